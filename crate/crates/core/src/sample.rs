//! In-memory rasters: 8-bit channels-first RGB images and class maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Background, no damage, minor, major, destroyed.
pub const NUM_CLASSES: usize = 5;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "no-damage",
    "minor-damage",
    "major-damage",
    "destroyed",
];

/// 3×H×W, channels-first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Data(format!(
                "rgb buffer has {} bytes, expected 3×{height}×{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, c: usize, r: usize, col: usize) -> u8 {
        self.data[(c * self.height + r) * self.width + col]
    }

    pub fn set(&mut self, c: usize, r: usize, col: usize, v: u8) {
        self.data[(c * self.height + r) * self.width + col] = v;
    }

    pub fn plane(&self, c: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Values scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![3, self.height, self.width],
            self.data.iter().map(|&v| v as f64 / 255.0).collect(),
        )
        .expect("extents are positive")
    }

    /// Interleaved RGB rows, as stored in a P6 file.
    pub fn to_interleaved(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            out.extend([self.data[i], self.data[n + i], self.data[2 * n + i]]);
        }
        out
    }

    pub fn from_interleaved(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        let n = height * width;
        if rgb.len() != 3 * n {
            return Err(Error::Data(format!(
                "interleaved buffer has {} bytes, expected {}",
                rgb.len(),
                3 * n
            )));
        }
        let mut data = vec![0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = rgb[3 * i + c];
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        check_window("crop", self.height, self.width, top, left, h, w)?;
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for r in top..top + h {
                let start = (c * self.height + r) * self.width + left;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }
}

/// H×W class ids in `0..NUM_CLASSES`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    /// Rejects any class id ≥ 5, naming the value and its offset.
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Data(format!(
                "label buffer has {} bytes, expected {height}×{width}",
                data.len()
            )));
        }
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, &v)| v as usize >= NUM_CLASSES)
        {
            return Err(Error::Data(format!(
                "label value {v} at offset {i} is not a class id"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    /// Panics on a class id ≥ 5.
    pub fn set(&mut self, r: usize, c: usize, class: u8) {
        assert!((class as usize) < NUM_CLASSES, "class {class} out of range");
        self.data[r * self.width + c] = class;
    }

    /// `true` where the pixel belongs to any building.
    pub fn building_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v > 0).collect()
    }

    /// Building mask as a 1×H×W tensor of 0/1.
    pub fn building_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width],
            self.data
                .iter()
                .map(|&v| if v > 0 { 1.0 } else { 0.0 })
                .collect(),
        )
        .expect("extents are positive")
    }

    pub fn histogram(&self) -> [u64; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        check_window("crop", self.height, self.width, top, left, h, w)?;
        let mut data = Vec::with_capacity(h * w);
        for r in top..top + h {
            let start = r * self.width + left;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }
}

fn check_window(
    op: &str,
    height: usize,
    width: usize,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
) -> Result<()> {
    if h == 0 || w == 0 || top + h > height || left + w > width {
        return Err(Error::InvalidArgument(format!(
            "{op} window {h}×{w} at ({top},{left}) outside {height}×{width}"
        )));
    }
    Ok(())
}

/// Co-registered pre/post images with their damage label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePair {
    pub id: String,
    pub pre: RgbImage,
    pub post: RgbImage,
    pub label: LabelMap,
}

impl SamplePair {
    pub fn new(
        id: impl Into<String>,
        pre: RgbImage,
        post: RgbImage,
        label: LabelMap,
    ) -> Result<Self> {
        let id = id.into();
        let ext = (label.height, label.width);
        if (pre.height, pre.width) != ext || (post.height, post.width) != ext {
            return Err(Error::Data(format!(
                "sample {id}: extents differ (pre {}×{}, post {}×{}, label {}×{})",
                pre.height, pre.width, post.height, post.width, ext.0, ext.1
            )));
        }
        Ok(Self {
            id,
            pre,
            post,
            label,
        })
    }

    pub fn height(&self) -> usize {
        self.label.height
    }

    pub fn width(&self) -> usize {
        self.label.width
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            pre: self.pre.crop(top, left, h, w)?,
            post: self.post.crop(top, left, h, w)?,
            label: self.label.crop(top, left, h, w)?,
        })
    }
}

/// Pre image and label only, for building segmentation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegSample {
    pub id: String,
    pub pre: RgbImage,
    pub label: LabelMap,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleave_round_trip() {
        let rgb: Vec<u8> = (0..18).collect();
        let img = RgbImage::from_interleaved(2, 3, &rgb).unwrap();
        assert_eq!(img.get(0, 0, 1), 3);
        assert_eq!(img.get(2, 1, 2), 17);
        assert_eq!(img.to_interleaved(), rgb);
    }

    #[test]
    fn label_rejects_value_with_offset() {
        let err = LabelMap::new(1, 3, vec![0, 4, 9]).unwrap_err().to_string();
        assert!(err.contains('9') && err.contains("offset 2"), "{err}");
        assert_eq!(LabelMap::new(1, 1, vec![4]).unwrap().get(0, 0) as usize, 4);
        assert_eq!(CLASS_NAMES[4], "destroyed");
    }

    #[test]
    fn crop_picks_window() {
        let rgb: Vec<u8> = (0..48).collect();
        let img = RgbImage::from_interleaved(4, 4, &rgb).unwrap();
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.get(0, 0, 0), img.get(0, 1, 2));
        assert_eq!(c.get(1, 1, 1), img.get(1, 2, 3));
        assert!(img.crop(3, 3, 2, 2).is_err());
    }

    #[test]
    fn mismatched_extents_rejected() {
        let a = RgbImage::filled(4, 4, [0; 3]);
        let b = RgbImage::filled(4, 5, [0; 3]);
        assert!(SamplePair::new("x", a.clone(), b, LabelMap::zeros(4, 4)).is_err());
        assert!(SamplePair::new("x", a.clone(), a, LabelMap::zeros(4, 4)).is_ok());
    }
}
