//! Binary portable maps: P6 for RGB images, P5 for label maps.
//!
//! Parsing and encoding go through the `image` crate. Only files with a
//! maximum sample value of 255 are accepted, since the decoder rescales
//! other ranges and would silently change class ids.

use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder, ImageEncoder};

use crate::error::{Error, Result};
use crate::sample::{LabelMap, RgbImage};

fn decode(bytes: &[u8], want: PnmSubtype, what: &str) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |e: image::ImageError| Error::Data(format!("{what}: {e}"));
    let (_, header) = PnmDecoder::new(bytes).map_err(bad)?.into_inner();
    if header.subtype() != want {
        return Err(Error::Data(format!(
            "{what}: expected {:?}, found {:?}",
            want,
            header.subtype()
        )));
    }
    if header.maximal_sample() != 255 {
        return Err(Error::Data(format!(
            "{what}: maximum sample {} unsupported, need 255",
            header.maximal_sample()
        )));
    }
    let dec = PnmDecoder::new(bytes).map_err(bad)?;
    let (w, h) = dec.dimensions();
    let mut buf = vec![0; dec.total_bytes() as usize];
    dec.read_image(&mut buf).map_err(bad)?;
    Ok((h as usize, w as usize, buf))
}

fn encode(
    data: &[u8],
    h: usize,
    w: usize,
    subtype: PnmSubtype,
    color: ExtendedColorType,
) -> Vec<u8> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(data, w as u32, h as u32, color)
        .expect("in-memory pnm encoding cannot fail");
    out
}

pub fn encode_rgb(img: &RgbImage) -> Vec<u8> {
    encode(
        &img.to_interleaved(),
        img.height(),
        img.width(),
        PnmSubtype::Pixmap(SampleEncoding::Binary),
        ExtendedColorType::Rgb8,
    )
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let (h, w, buf) = decode(
        bytes,
        PnmSubtype::Pixmap(SampleEncoding::Binary),
        "P6 image",
    )?;
    RgbImage::from_interleaved(h, w, &buf)
}

pub fn encode_label(label: &LabelMap) -> Vec<u8> {
    encode(
        label.data(),
        label.height(),
        label.width(),
        PnmSubtype::Graymap(SampleEncoding::Binary),
        ExtendedColorType::L8,
    )
}

/// Decodes and validates class ids.
pub fn decode_label(bytes: &[u8]) -> Result<LabelMap> {
    let (h, w, buf) = decode(
        bytes,
        PnmSubtype::Graymap(SampleEncoding::Binary),
        "P5 label",
    )?;
    LabelMap::new(h, w, buf)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    super::write_atomic(path, &encode_rgb(img))
}

pub fn write_label(path: &Path, label: &LabelMap) -> Result<()> {
    super::write_atomic(path, &encode_label(label))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    decode_rgb(&super::read_file(path)?).map_err(|e| with_path(path, e))
}

pub fn read_label(path: &Path) -> Result<LabelMap> {
    decode_label(&super::read_file(path)?).map_err(|e| with_path(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}
