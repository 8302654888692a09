//! Synthetic pre/post disaster scenes.
//!
//! A scene is a textured ground plane with a few tree clumps and
//! non-overlapping axis-aligned rectangular buildings. Each building gets a
//! roof colour, a darker rim and a cast shadow in the pre image. The post
//! image repeats the scene with fresh sensor noise and a global brightness
//! change, and redraws every roof by damage level:
//!
//! | level | post-image roof |
//! |-------|-----------------|
//! | 1 no damage | unchanged |
//! | 2 minor | sparse small debris spots, slight discolouration |
//! | 3 major | dense debris clusters and one side collapsed to rubble |
//! | 4 destroyed | whole footprint replaced by rubble texture |
//!
//! The label paints the full footprint with its level. Damage levels are
//! assigned along a golden-ratio sequence pushed through the cumulative
//! class mix, so even small sets follow the configured mix closely.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::dataset::{self, DatasetManifest, Split};
use crate::rng::{self, StreamRng};
use crate::sample::{LabelMap, RgbImage, SamplePair};

/// Share of building pixels per damage level in the xBD training split.
pub const XBD_CLASS_MIX: [f64; 4] = [0.7604, 0.0898, 0.0729, 0.0769];

const GOLDEN: f64 = 0.618_033_988_749_894_8;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_samples: usize,
    /// Square image side, divisible by 32.
    pub extent: usize,
    /// Inclusive range of buildings attempted per image.
    pub buildings_per_image: (usize, usize),
    /// Relative frequency of damage levels 1..=4.
    pub class_mix: [f64; 4],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 200,
            extent: 64,
            buildings_per_image: (3, 7),
            class_mix: XBD_CLASS_MIX,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extent == 0 || self.extent % 32 != 0 {
            return Err(Error::Config(format!(
                "extent {} is not a positive multiple of 32",
                self.extent
            )));
        }
        let (lo, hi) = self.buildings_per_image;
        if lo > hi || hi == 0 {
            return Err(Error::Config(format!(
                "bad buildings_per_image range ({lo}, {hi})"
            )));
        }
        if self.class_mix.iter().any(|&v| !(v >= 0.0)) || self.class_mix.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(format!("bad class mix {:?}", self.class_mix)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Building {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub level: u8,
}

impl Building {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.top + self.height && c >= self.left && c < self.left + self.width
    }

    fn clear_of(&self, o: &Building, gap: usize) -> bool {
        self.top >= o.top + o.height + gap
            || o.top >= self.top + self.height + gap
            || self.left >= o.left + o.width + gap
            || o.left >= self.left + self.width + gap
    }
}

/// Damage level sequence shared by all scenes of one split.
struct LevelSequence {
    cdf: [f64; 4],
    phase: f64,
    k: u64,
}

impl LevelSequence {
    fn new(mix: &[f64; 4], phase: f64) -> Self {
        let total: f64 = mix.iter().sum();
        let mut cdf = [0.0; 4];
        let mut acc = 0.0;
        for (c, m) in cdf.iter_mut().zip(mix) {
            acc += m / total;
            *c = acc;
        }
        Self { cdf, phase, k: 0 }
    }

    fn next(&mut self) -> u8 {
        let u = (self.phase + self.k as f64 * GOLDEN).fract();
        self.k += 1;
        self.cdf.iter().position(|&c| u < c).unwrap_or(3) as u8 + 1
    }
}

type Rgb = [f64; 3];

struct Canvas {
    n: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn get(&self, r: usize, c: usize) -> Rgb {
        self.px[r * self.n + c]
    }

    fn set(&mut self, r: usize, c: usize, v: Rgb) {
        self.px[r * self.n + c] = v;
    }

    fn scale(&mut self, r: usize, c: usize, f: f64) {
        let p = &mut self.px[r * self.n + c];
        for v in p.iter_mut() {
            *v *= f;
        }
    }

    fn to_image(&self) -> RgbImage {
        let mut data = vec![0u8; 3 * self.n * self.n];
        let plane = self.n * self.n;
        for (i, p) in self.px.iter().enumerate() {
            for ch in 0..3 {
                data[ch * plane + i] = p[ch].round().clamp(0.0, 255.0) as u8;
            }
        }
        RgbImage::new(self.n, self.n, data).expect("square canvas")
    }
}

const GROUND: [Rgb; 3] = [
    [78.0, 112.0, 58.0],
    [122.0, 104.0, 76.0],
    [158.0, 146.0, 112.0],
];
const ROOFS: [Rgb; 5] = [
    [168.0, 168.0, 174.0],
    [176.0, 78.0, 64.0],
    [96.0, 112.0, 150.0],
    [218.0, 212.0, 198.0],
    [70.0, 150.0, 160.0],
];
const RUBBLE: [Rgb; 4] = [
    [92.0, 80.0, 70.0],
    [140.0, 128.0, 112.0],
    [60.0, 52.0, 48.0],
    [176.0, 164.0, 150.0],
];
const DEBRIS: Rgb = [62.0, 48.0, 38.0];

fn jitter(rng: &mut StreamRng, amp: f64) -> f64 {
    rng.random_range(-amp..=amp)
}

fn add(c: Rgb, d: f64) -> Rgb {
    [c[0] + d, c[1] + d, c[2] + d]
}

/// Low-frequency ground texture: bilinear interpolation of a coarse grid.
fn ground(n: usize, rng: &mut StreamRng) -> Canvas {
    let base = GROUND[rng.random_range(0..GROUND.len())];
    let cell = 8usize;
    let g = n / cell + 2;
    let grid: Vec<f64> = (0..g * g).map(|_| jitter(rng, 22.0)).collect();
    let mut px = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let (fr, fc) = (r as f64 / cell as f64, c as f64 / cell as f64);
            let (ir, ic) = (fr as usize, fc as usize);
            let (tr, tc) = (fr - ir as f64, fc - ic as f64);
            let at = |a: usize, b: usize| grid[a * g + b];
            let v = at(ir, ic) * (1.0 - tr) * (1.0 - tc)
                + at(ir + 1, ic) * tr * (1.0 - tc)
                + at(ir, ic + 1) * (1.0 - tr) * tc
                + at(ir + 1, ic + 1) * tr * tc;
            px.push(add(base, v));
        }
    }
    let mut canvas = Canvas { n, px };
    // tree clumps
    for _ in 0..rng.random_range(2..=5) {
        let (cr, cc) = (rng.random_range(0..n) as f64, rng.random_range(0..n) as f64);
        let radius = rng.random_range(1.0..3.2);
        for r in 0..n {
            for c in 0..n {
                let d = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
                if d <= radius {
                    canvas.set(r, c, [38.0, 72.0, 34.0]);
                }
            }
        }
    }
    canvas
}

fn place_buildings(n: usize, count: usize, rng: &mut StreamRng) -> Vec<Building> {
    let s = n as f64 / 64.0;
    let lo = ((8.0 * s).round() as usize).max(2);
    let hi = ((18.0 * s).round() as usize)
        .max(lo)
        .min(n.saturating_sub(4));
    let mut placed: Vec<Building> = Vec::new();
    for _ in 0..count {
        for _ in 0..60 {
            let h = rng.random_range(lo..=hi);
            let w = rng.random_range(lo..=hi);
            let b = Building {
                top: rng.random_range(1..n - h - 1),
                left: rng.random_range(1..n - w - 1),
                height: h,
                width: w,
                level: 0,
            };
            if placed.iter().all(|o| b.clear_of(o, 2)) {
                placed.push(b);
                break;
            }
        }
    }
    placed
}

/// Roof pixels of an intact building, including rim and ridge.
fn roof_pixel(b: &Building, colour: Rgb, r: usize, c: usize, rng: &mut StreamRng) -> Rgb {
    let edge = r == b.top || c == b.left || r + 1 == b.top + b.height || c + 1 == b.left + b.width;
    let ridge = r == b.top + b.height / 2;
    let mut v = add(colour, jitter(rng, 5.0));
    if edge {
        v = [v[0] * 0.7, v[1] * 0.7, v[2] * 0.7];
    } else if ridge {
        v = add(v, 14.0);
    }
    v
}

fn rubble_pixel(rng: &mut StreamRng) -> Rgb {
    add(RUBBLE[rng.random_range(0..RUBBLE.len())], jitter(rng, 12.0))
}

/// Renders one scene and returns it with its footprints.
pub fn synth_scene(
    id: &str,
    extent: usize,
    buildings: (usize, usize),
    next_level: &mut dyn FnMut() -> u8,
    rng: &mut StreamRng,
) -> (SamplePair, Vec<Building>) {
    let n = extent;
    let mut pre = ground(n, rng);
    let count = rng.random_range(buildings.0..=buildings.1);
    let mut footprints = place_buildings(n, count, rng);
    let mut label = LabelMap::zeros(n, n);

    let mut colours = Vec::with_capacity(footprints.len());
    for b in footprints.iter_mut() {
        b.level = next_level();
        let colour = add(ROOFS[rng.random_range(0..ROOFS.len())], jitter(rng, 10.0));
        colours.push(colour);
        // shadow along the bottom and right edges
        for r in b.top + 1..=(b.top + b.height).min(n - 1) {
            let c = b.left + b.width;
            if c < n {
                pre.scale(r, c, 0.55);
            }
        }
        if b.top + b.height < n {
            for c in b.left + 1..=(b.left + b.width).min(n - 1) {
                pre.scale(b.top + b.height, c, 0.55);
            }
        }
        for r in b.top..b.top + b.height {
            for c in b.left..b.left + b.width {
                pre.set(r, c, roof_pixel(b, colour, r, c, rng));
                label.set(r, c, b.level);
            }
        }
    }

    let shift = jitter(rng, 10.0);
    let mut post = Canvas {
        n,
        px: pre.px.iter().map(|&p| add(p, shift)).collect(),
    };
    for b in &footprints {
        damage(&mut post, b, rng);
    }
    for p in post.px.iter_mut() {
        for v in p.iter_mut() {
            *v += jitter(rng, 4.0);
        }
    }

    let sample =
        SamplePair::new(id, pre.to_image(), post.to_image(), label).expect("consistent extents");
    (sample, footprints)
}

fn damage(post: &mut Canvas, b: &Building, rng: &mut StreamRng) {
    let pixels = || {
        (b.top..b.top + b.height).flat_map(move |r| (b.left..b.left + b.width).map(move |c| (r, c)))
    };
    match b.level {
        2 => {
            let tint = [-10.0, -14.0, -22.0];
            for (r, c) in pixels() {
                let p = post.get(r, c);
                post.set(r, c, [p[0] + tint[0], p[1] + tint[1], p[2] + tint[2]]);
            }
            let spots = (b.height * b.width / 14).max(3);
            for _ in 0..spots {
                let r = rng.random_range(b.top..b.top + b.height);
                let c = rng.random_range(b.left..b.left + b.width);
                post.set(r, c, add(DEBRIS, jitter(rng, 10.0)));
            }
        }
        3 => {
            // one side collapses
            let vertical = rng.random_bool(0.5);
            let far = rng.random_bool(0.5);
            let (span, start) = if vertical {
                (b.width, b.left)
            } else {
                (b.height, b.top)
            };
            let cut = (span * 2).div_ceil(5).max(1);
            let lo = if far { start + span - cut } else { start };
            for (r, c) in pixels() {
                let along = if vertical { c } else { r };
                if along >= lo && along < lo + cut {
                    post.set(r, c, rubble_pixel(rng));
                }
            }
            let blobs = (b.height * b.width / 16).max(2);
            for _ in 0..blobs {
                let cr = rng.random_range(b.top..b.top + b.height) as f64;
                let cc = rng.random_range(b.left..b.left + b.width) as f64;
                let rad = rng.random_range(0.8..1.8);
                for (r, c) in pixels() {
                    if (r as f64 - cr).hypot(c as f64 - cc) <= rad {
                        post.set(r, c, add(DEBRIS, jitter(rng, 14.0)));
                    }
                }
            }
        }
        4 => {
            for (r, c) in pixels() {
                post.set(r, c, rubble_pixel(rng));
            }
        }
        _ => {}
    }
}

fn split_code(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Test => 2,
    }
}

/// Generates `config.num_samples` scenes in memory.
pub fn generate_samples(
    config: &SynthConfig,
    split: Split,
) -> Result<Vec<(SamplePair, Vec<Building>)>> {
    config.validate()?;
    let code = split_code(split);
    let phase: f64 = rng::derive(config.seed, &[code, u64::MAX]).random();
    let mut levels = LevelSequence::new(&config.class_mix, phase);
    let mut next = || levels.next();
    Ok((0..config.num_samples)
        .map(|i| {
            let mut r = rng::derive(config.seed, &[code, i as u64]);
            let id = format!("{split}_{i:04}");
            synth_scene(
                &id,
                config.extent,
                config.buildings_per_image,
                &mut next,
                &mut r,
            )
        })
        .collect())
}

/// Generates scenes and writes them with a manifest under `root`.
pub fn synth_generate(config: &SynthConfig, root: &Path, split: Split) -> Result<DatasetManifest> {
    let scenes = generate_samples(config, split)?;
    let mut records = Vec::with_capacity(scenes.len());
    for (sample, _) in &scenes {
        records.push(dataset::write_sample(root, sample)?);
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        split,
        seed: config.seed,
        records,
    };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            num_samples: n,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_samples(&small(4, 3), Split::Train).unwrap();
        let b = generate_samples(&small(4, 3), Split::Train).unwrap();
        let c = generate_samples(&small(4, 4), Split::Train).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].0, c[0].0);
        let t = generate_samples(&small(4, 3), Split::Test).unwrap();
        assert_ne!(a[0].0.pre, t[0].0.pre);
    }

    #[test]
    fn labels_stay_inside_footprints() {
        for (s, fp) in generate_samples(&small(20, 1), Split::Train).unwrap() {
            assert!(!fp.is_empty());
            for r in 0..s.height() {
                for c in 0..s.width() {
                    let v = s.label.get(r, c);
                    let owner = fp.iter().find(|b| b.contains(r, c));
                    match owner {
                        Some(b) => assert_eq!(v, b.level),
                        None => assert_eq!(v, 0),
                    }
                }
            }
            for (i, a) in fp.iter().enumerate() {
                for b in &fp[i + 1..] {
                    assert!(a.clear_of(b, 2));
                }
            }
        }
    }

    #[test]
    fn class_mix_over_five_hundred_buildings() {
        let mut counts = [0usize; 4];
        let mut total = 0;
        let mut n = 50;
        while total < 500 {
            counts = [0; 4];
            total = 0;
            for (_, fp) in generate_samples(&small(n, 9), Split::Train).unwrap() {
                for b in fp {
                    counts[b.level as usize - 1] += 1;
                    total += 1;
                }
            }
            n += 50;
        }
        for (k, &c) in counts.iter().enumerate() {
            let share = c as f64 / total as f64;
            assert!(
                (share - XBD_CLASS_MIX[k]).abs() <= 0.03,
                "level {} share {share}",
                k + 1
            );
        }
    }

    #[test]
    fn rejects_bad_extent() {
        let cfg = SynthConfig {
            extent: 48,
            ..small(1, 0)
        };
        assert!(generate_samples(&cfg, Split::Train).is_err());
    }

    #[test]
    fn intact_roofs_match_between_dates() {
        // level-1 roofs differ only by brightness shift and sensor noise
        let scenes = generate_samples(&small(10, 2), Split::Train).unwrap();
        for (s, fp) in &scenes {
            for b in fp.iter().filter(|b| b.level == 1) {
                let r = b.top + 1;
                let c = b.left + 1;
                let d: i32 = (0..3)
                    .map(|ch| s.pre.get(ch, r, c) as i32 - s.post.get(ch, r, c) as i32)
                    .sum();
                assert!(d.abs() <= 3 * 16, "{d}");
            }
        }
    }

    #[test]
    fn write_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(&small(3, 5), dir.path(), Split::Test).unwrap();
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let mem = generate_samples(&small(3, 5), Split::Test).unwrap();
        assert_eq!(back.load_sample(2).unwrap(), mem[2].0);
    }
}
