//! Dataset directories.
//!
//! ```text
//! <root>/manifest.tsv
//! <root>/images/<id>_pre.ppm, <id>_post.ppm, <id>_label.pgm
//! ```
//!
//! `manifest.tsv` starts with `# split=<train|test>` and `# seed=<n>`
//! comment lines followed by one `id<TAB>pre<TAB>post<TAB>label` row per
//! sample. Paths are relative to the root.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::pnm;
use crate::sample::{SamplePair, SegSample};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub pre: PathBuf,
    pub post: PathBuf,
    pub label: PathBuf,
}

impl ManifestRecord {
    /// Standard file names under `images/`.
    pub fn standard(id: &str) -> Self {
        let dir = Path::new(IMAGE_DIR);
        Self {
            id: id.to_string(),
            pre: dir.join(format!("{id}_pre.ppm")),
            post: dir.join(format!("{id}_post.ppm")),
            label: dir.join(format!("{id}_label.pgm")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("# split={}\n# seed={}\n", self.split, self.seed);
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.id,
                r.pre.display(),
                r.post.display(),
                r.label.display()
            ));
        }
        out
    }

    /// Parses manifest text; `root` is where relative paths resolve.
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut split = None;
        let mut seed = None;
        let mut records = Vec::new();
        let mut ids = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((k, v)) = comment.trim().split_once('=') {
                    match k.trim() {
                        "split" => split = Some(v.trim().parse()?),
                        "seed" => {
                            seed = Some(v.trim().parse().map_err(|_| {
                                Error::Data(format!("manifest line {}: bad seed {v:?}", n + 1))
                            })?)
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, pre, post, label] = fields[..] else {
                return Err(Error::Data(format!(
                    "manifest line {}: expected 4 tab-separated fields, got {}",
                    n + 1,
                    fields.len()
                )));
            };
            if !ids.insert(id.to_string()) {
                return Err(Error::Data(format!(
                    "manifest line {}: duplicate id {id}",
                    n + 1
                )));
            }
            records.push(ManifestRecord {
                id: id.to_string(),
                pre: pre.into(),
                post: post.into(),
                label: label.into(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            split: split.ok_or_else(|| Error::Data("manifest has no '# split=' line".into()))?,
            seed: seed.unwrap_or(0),
            records,
        })
    }

    /// Reads `<root>/manifest.tsv`.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, root)
    }

    pub fn save(&self) -> Result<()> {
        super::write_atomic(&self.root.join(MANIFEST_FILE), self.to_tsv().as_bytes())
    }

    pub fn path_of(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    /// Checks that every referenced file exists.
    pub fn check_paths(&self) -> Result<()> {
        for r in &self.records {
            for p in [&r.pre, &r.post, &r.label] {
                let full = self.path_of(p);
                if !full.is_file() {
                    return Err(Error::Data(format!(
                        "sample {}: missing file {}",
                        r.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load_sample(&self, index: usize) -> Result<SamplePair> {
        let r = &self.records[index];
        SamplePair::new(
            r.id.clone(),
            pnm::read_rgb(&self.path_of(&r.pre))?,
            pnm::read_rgb(&self.path_of(&r.post))?,
            pnm::read_label(&self.path_of(&r.label))?,
        )
    }

    /// Pre image and label only; the post file is never opened.
    pub fn load_seg_sample(&self, index: usize) -> Result<SegSample> {
        let r = &self.records[index];
        let pre = pnm::read_rgb(&self.path_of(&r.pre))?;
        let label = pnm::read_label(&self.path_of(&r.label))?;
        if (pre.height(), pre.width()) != (label.height(), label.width()) {
            return Err(Error::Data(format!(
                "sample {}: pre and label extents differ",
                r.id
            )));
        }
        Ok(SegSample {
            id: r.id.clone(),
            pre,
            label,
        })
    }

    pub fn load_all(&self) -> Result<Vec<SamplePair>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }

    pub fn load_all_seg(&self) -> Result<Vec<SegSample>> {
        (0..self.len()).map(|i| self.load_seg_sample(i)).collect()
    }
}

/// Writes the three rasters of `sample` under `root` using standard names.
pub fn write_sample(root: &Path, sample: &SamplePair) -> Result<ManifestRecord> {
    let rec = ManifestRecord::standard(&sample.id);
    pnm::write_rgb(&root.join(&rec.pre), &sample.pre)?;
    pnm::write_rgb(&root.join(&rec.post), &sample.post)?;
    pnm::write_label(&root.join(&rec.label), &sample.label)?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::{LabelMap, RgbImage};

    fn sample(id: &str) -> SamplePair {
        let pre = RgbImage::new(2, 2, (0..12).collect()).unwrap();
        let post = RgbImage::new(2, 2, (100..112).collect()).unwrap();
        SamplePair::new(
            id,
            pre,
            post,
            LabelMap::new(2, 2, vec![0, 1, 3, 4]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = ["a", "b"]
            .iter()
            .map(|id| write_sample(dir.path(), &sample(id)).unwrap())
            .collect();
        let m = DatasetManifest {
            root: dir.path().to_path_buf(),
            split: Split::Test,
            seed: 42,
            records,
        };
        m.save().unwrap();
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        back.check_paths().unwrap();
        assert_eq!(back.load_sample(1).unwrap(), sample("b"));
        assert_eq!(back.load_sample(0).unwrap().label.get(1, 1), 4);
    }

    #[test]
    fn seg_sample_ignores_post() {
        let dir = tempfile::tempdir().unwrap();
        let rec = write_sample(dir.path(), &sample("a")).unwrap();
        std::fs::remove_file(dir.path().join(&rec.post)).unwrap();
        let m = DatasetManifest {
            root: dir.path().to_path_buf(),
            split: Split::Train,
            seed: 0,
            records: vec![rec],
        };
        assert!(m.load_seg_sample(0).is_ok());
        assert!(m.load_sample(0).is_err());
        assert!(m.check_paths().is_err());
    }

    #[test]
    fn parse_errors() {
        let root = Path::new("/nonexistent");
        assert!(DatasetManifest::parse("a\tb\tc\td\n", root).is_err());
        assert!(DatasetManifest::parse("# split=train\na\tb\tc\n", root).is_err());
        assert!(DatasetManifest::parse("# split=train\na\tb\tc\td\na\tb\tc\td\n", root).is_err());
        assert!(DatasetManifest::parse("# split=val\n", root).is_err());
        let m = DatasetManifest::parse("# split=train\n# seed=5\n\nx\tp\tq\tr\n", root).unwrap();
        assert_eq!((m.seed, m.len()), (5, 1));
    }
}
