//! Seeded augmentation. Every transform is applied identically to the pre
//! image, post image and label map of a sample.
//!
//! Random state for a sample is derived from `(seed, epoch, index)`, never
//! from a shared generator, so results do not depend on processing order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::sample::{LabelMap, RgbImage, SamplePair, SegSample};

/// Generator for one sample in one epoch. `stream` separates independent
/// uses (cropping, flips, CutMix) of the same sample.
pub fn sample_rng(seed: u64, epoch: u64, index: u64, stream: u64) -> StreamRng {
    rng::derive(seed, &[epoch, index, stream])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.top + self.height && c >= self.left && c < self.left + self.width
    }
}

/// A rectangle inside an `height×width` image. As a binary map it is 0
/// inside the rectangle (pixels taken from the source) and 1 outside.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutMixMask {
    rect: Rect,
    height: usize,
    width: usize,
}

impl CutMixMask {
    pub fn new(rect: Rect, height: usize, width: usize) -> Result<Self> {
        if rect.top + rect.height > height || rect.left + rect.width > width {
            return Err(Error::InvalidArgument(format!(
                "rectangle {rect:?} outside {height}×{width}"
            )));
        }
        Ok(Self {
            rect,
            height,
            width,
        })
    }

    /// Zero-area rectangle: mixing returns the target unchanged.
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            rect: Rect {
                top: 0,
                left: 0,
                height: 0,
                width: 0,
            },
            height,
            width,
        }
    }

    /// Whole-image rectangle: mixing returns the source.
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            rect: Rect {
                top: 0,
                left: 0,
                height,
                width,
            },
            height,
            width,
        }
    }

    pub fn rect(&self) -> Rect {
        self.rect
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn area_ratio(&self) -> f64 {
        self.rect.area() as f64 / (self.height * self.width) as f64
    }

    /// Row-major `M`: 0 inside the rectangle, 1 outside.
    pub fn binary(&self) -> Vec<u8> {
        let mut m = vec![1u8; self.height * self.width];
        for r in self.rect.top..self.rect.top + self.rect.height {
            let row = r * self.width;
            m[row + self.rect.left..row + self.rect.left + self.rect.width].fill(0);
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub difficult_classes: Vec<u8>,
    pub cutmix_probability: f64,
    pub area_ratio_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            difficult_classes: vec![2, 3],
            cutmix_probability: 0.5,
            area_ratio_range: (0.1, 0.4),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.cutmix_probability;
        let (lo, hi) = self.area_ratio_range;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!(
                "cutmix probability {p} outside [0, 1]"
            )));
        }
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "area ratio range ({lo}, {hi}) must satisfy 0 < min < max < 1"
            )));
        }
        if self.difficult_classes.iter().any(|&c| c == 0 || c > 4) {
            return Err(Error::Config(format!(
                "difficult classes {:?} must be damage levels 1..4",
                self.difficult_classes
            )));
        }
        Ok(())
    }
}

/// `M·A + (1−M)·B` on pre, post and label alike.
pub fn cutmix(a: &SamplePair, b: &SamplePair, mask: &CutMixMask) -> Result<SamplePair> {
    let ext = (a.height(), a.width());
    if (b.height(), b.width()) != ext || mask.extent() != ext {
        return Err(Error::Data(format!(
            "cutmix extents differ: target {:?}, source {:?}, mask {:?}",
            ext,
            (b.height(), b.width()),
            mask.extent()
        )));
    }
    let mut out = a.clone();
    let Rect {
        top,
        left,
        height,
        width,
    } = mask.rect;
    let (h, w) = ext;
    for r in top..top + height {
        let span = r * w + left..r * w + left + width;
        for c in 0..3 {
            let plane = c * h * w;
            let s = plane + span.start..plane + span.end;
            out.pre.data_mut()[s.clone()].copy_from_slice(&b.pre.data()[s.clone()]);
            out.post.data_mut()[s.clone()].copy_from_slice(&b.post.data()[s]);
        }
        for col in left..left + width {
            out.label.set(r, col, b.label.get(r, col));
        }
    }
    Ok(out)
}

/// Samples that contain at least one pixel of a difficult class, with the
/// offsets of those pixels.
#[derive(Clone, Debug, Default)]
pub struct DifficultPool {
    entries: Vec<(usize, Vec<usize>)>,
}

impl DifficultPool {
    pub fn new<'a>(labels: impl IntoIterator<Item = &'a LabelMap>, classes: &[u8]) -> Self {
        let entries = labels
            .into_iter()
            .enumerate()
            .filter_map(|(i, l)| {
                let px: Vec<usize> = l
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| classes.contains(v))
                    .map(|(o, _)| o)
                    .collect();
                (!px.is_empty()).then_some((i, px))
            })
            .collect();
        Self { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Indices of qualifying samples, ascending.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }
}

/// Draws a source sample uniformly from `pool` and a rectangle around one of
/// its difficult pixels. `extent` is the source image size. Returns `None`
/// when no sample qualifies.
pub fn sample_difficult_source(
    pool: &DifficultPool,
    extent: (usize, usize),
    config: &AugmentConfig,
    rng: &mut StreamRng,
) -> Option<(usize, CutMixMask)> {
    if pool.is_empty() {
        return None;
    }
    let (index, pixels) = &pool.entries[rng.random_range(0..pool.entries.len())];
    let offset = pixels[rng.random_range(0..pixels.len())];
    let (h, w) = extent;
    let (rh, rw) = draw_rect_size(h, w, config.area_ratio_range, rng);
    let (pr, pc) = (offset / w, offset % w);
    // centred on the pixel, then shifted inward so the area is kept
    let top = pr.saturating_sub(rh / 2).min(h - rh);
    let left = pc.saturating_sub(rw / 2).min(w - rw);
    let rect = Rect {
        top,
        left,
        height: rh,
        width: rw,
    };
    Some((
        *index,
        CutMixMask {
            rect,
            height: h,
            width: w,
        },
    ))
}

/// Integer rectangle sides whose area ratio lies inside `range`.
fn draw_rect_size(h: usize, w: usize, range: (f64, f64), rng: &mut StreamRng) -> (usize, usize) {
    let total = (h * w) as f64;
    let fits = |rh: usize, rw: usize| {
        let r = (rh * rw) as f64 / total;
        rh >= 1 && rw >= 1 && rh <= h && rw <= w && r >= range.0 && r <= range.1
    };
    for _ in 0..64 {
        let ratio = rng.random_range(range.0..=range.1);
        let aspect = rng.random_range(-1.0f64..1.0).exp2();
        let rh = ((ratio * total * aspect).sqrt().round() as usize).clamp(1, h);
        let rw = ((ratio * total / rh as f64).round() as usize).clamp(1, w);
        if fits(rh, rw) {
            return (rh, rw);
        }
    }
    // deterministic scan for tiny images where random draws keep missing
    let target = 0.5 * (range.0 + range.1) * total;
    (1..=h)
        .flat_map(|rh| (1..=w).map(move |rw| (rh, rw)))
        .filter(|&(rh, rw)| fits(rh, rw))
        .min_by(|a, b| {
            let da = ((a.0 * a.1) as f64 - target).abs();
            let db = ((b.0 * b.1) as f64 - target).abs();
            da.total_cmp(&db)
        })
        .unwrap_or((h, w))
}

/// Flips then `quarter_turns` clockwise rotations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpatialTransform {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl SpatialTransform {
    /// Independent fair coin flips and a uniform rotation. Rotation is left
    /// at zero for non-square images.
    pub fn draw(rng: &mut StreamRng, square: bool) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let turns = rng.random_range(0..4u8);
        Self {
            hflip,
            vflip,
            quarter_turns: if square { turns } else { 0 },
        }
    }

    /// Destination of source pixel `(r, c)` and the output extents.
    pub fn map(&self, h: usize, w: usize, r: usize, c: usize) -> (usize, usize) {
        let mut r = if self.vflip { h - 1 - r } else { r };
        let mut c = if self.hflip { w - 1 - c } else { c };
        for _ in 0..self.quarter_turns % 4 {
            (r, c) = (c, h - 1 - r);
        }
        (r, c)
    }

    fn remap<T: Copy + Default>(&self, plane: &[T], h: usize, w: usize) -> Vec<T> {
        if self.quarter_turns % 4 != 0 {
            assert_eq!(h, w, "rotation of a non-square plane");
        }
        let mut out = vec![T::default(); plane.len()];
        for r in 0..h {
            for c in 0..w {
                let (dr, dc) = self.map(h, w, r, c);
                out[dr * w + dc] = plane[r * w + c];
            }
        }
        out
    }

    pub fn apply_rgb(&self, img: &RgbImage) -> RgbImage {
        let (h, w) = (img.height(), img.width());
        let mut data = Vec::with_capacity(img.data().len());
        for c in 0..3 {
            data.extend(self.remap(img.plane(c), h, w));
        }
        RgbImage::new(h, w, data).expect("same extents")
    }

    pub fn apply_label(&self, label: &LabelMap) -> LabelMap {
        let (h, w) = (label.height(), label.width());
        LabelMap::new(h, w, self.remap(label.data(), h, w)).expect("same classes")
    }

    pub fn apply_pair(&self, s: &SamplePair) -> SamplePair {
        SamplePair {
            id: s.id.clone(),
            pre: self.apply_rgb(&s.pre),
            post: self.apply_rgb(&s.post),
            label: self.apply_label(&s.label),
        }
    }

    pub fn apply_seg(&self, s: &SegSample) -> SegSample {
        SegSample {
            id: s.id.clone(),
            pre: self.apply_rgb(&s.pre),
            label: self.apply_label(&s.label),
        }
    }
}

/// Random flips and quarter-turn rotation of a whole sample.
pub fn basic_augment(sample: &SamplePair, rng: &mut StreamRng) -> SamplePair {
    SpatialTransform::draw(rng, sample.height() == sample.width()).apply_pair(sample)
}

/// Top-left corner of a uniformly placed `crop×crop` window.
pub fn random_crop_origin(
    h: usize,
    w: usize,
    crop: usize,
    rng: &mut StreamRng,
) -> Result<(usize, usize)> {
    if crop > h || crop > w {
        return Err(Error::Data(format!(
            "crop {crop} larger than image {h}×{w}"
        )));
    }
    Ok((
        rng.random_range(0..=h - crop),
        rng.random_range(0..=w - crop),
    ))
}
