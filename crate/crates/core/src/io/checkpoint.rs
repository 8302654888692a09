//! `.bdack` checkpoint files.
//!
//! All integers little-endian:
//!
//! ```text
//! magic     8 bytes  "BDACKPT\0"
//! version   u32      1
//! count     u32      number of parameter entries
//! entry*    u32 name length, name (UTF-8), u32 rank, u64 × rank extents,
//!           f64 × product(extents) values
//! meta      u32 pair count, then per pair u32 key length, key,
//!           u32 value length, value
//! ```
//!
//! The whole file is parsed and checked before any model is touched.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::{ModelSpec, UNet};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BDACKPT\0";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "bdack";

/// Metadata key holding the serialized [`ModelSpec`].
pub const META_MODEL: &str = "model_spec";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_params(params: &ParamSet, metadata: BTreeMap<String, String>) -> Self {
        Self {
            entries: params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            metadata,
        }
    }

    /// Parameters plus the model layout under [`META_MODEL`].
    pub fn from_model(model: &UNet, mut metadata: BTreeMap<String, String>) -> Self {
        let spec = serde_json::to_string(model.spec()).expect("model spec serializes");
        metadata.insert(META_MODEL.into(), spec);
        Self::from_params(model.params(), metadata)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string("entry name")?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!(
                    "{name}: implausible rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("extent")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let n = n
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| {
                    Error::Checkpoint(format!("{name}: truncated values for shape {shape:?}"))
                })?;
            let raw = r.take(8 * n, "values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t =
                Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            entries.push((name, t));
        }
        let pairs = r.u32("metadata count")? as usize;
        let mut metadata = BTreeMap::new();
        for _ in 0..pairs {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            metadata.insert(k, v);
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        Ok(Self { entries, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&super::read_file(path)?).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let text = self
            .metadata
            .get(META_MODEL)
            .ok_or_else(|| Error::Checkpoint(format!("no {META_MODEL} metadata")))?;
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("bad model spec: {e}")))
    }

    /// Rebuilds the model described by the metadata and fills its parameters.
    pub fn to_model(&self) -> Result<UNet> {
        let mut model = UNet::from_spec(&self.model_spec()?, 0)?;
        model.load_params(&self.entries)?;
        Ok(model)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BranchMode};

    fn model() -> UNet {
        UNet::build(&BackboneConfig::desk(), BranchMode::DualShared, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let meta = BTreeMap::from([("stage".to_string(), "2".to_string())]);
        let ck = Checkpoint::from_model(&m, meta);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.to_model().unwrap();
        assert_eq!(rebuilt.params(), m.params());
        assert_eq!(rebuilt.spec(), m.spec());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bdack");
        let ck = Checkpoint::from_model(&model(), BTreeMap::new());
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        assert!(std::fs::read(&p).unwrap().starts_with(MAGIC));
    }

    #[test]
    fn every_truncation_is_rejected() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        ps.add("b.weight", Tensor::zeros(&[2, 1, 3, 3])).unwrap();
        let bytes =
            Checkpoint::from_params(&ps, BTreeMap::from([("k".into(), "v".into())])).to_bytes();
        for cut in 0..bytes.len() {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn rejects_unknown_version_and_magic() {
        let bytes = Checkpoint::from_model(&model(), BTreeMap::new()).to_bytes();
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2)
            .unwrap_err()
            .to_string()
            .contains("version 2"));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn mid_entry_truncation_leaves_model_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bdack");
        let mut other = model();
        let first = other.params().ids().next().unwrap();
        other.params_mut().get_mut(first).data_mut()[0] = 9.0;
        let bytes = Checkpoint::from_model(&other, BTreeMap::new()).to_bytes();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();

        let mut m = model();
        let before = m.params().clone();
        let result = Checkpoint::load(&p).and_then(|ck| m.load_params(&ck.entries));
        assert!(result.is_err());
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn shape_conflict_rejected_without_mutation() {
        let single = UNet::build(&BackboneConfig::desk(), BranchMode::Single, 1).unwrap();
        let ck = Checkpoint::from_model(&single, BTreeMap::new());
        let mut dual = model();
        let before = dual.params().clone();
        assert!(dual.load_params(&ck.entries).is_err());
        assert_eq!(dual.params(), &before);
    }
}
