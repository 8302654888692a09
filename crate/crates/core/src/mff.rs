//! Multi-scale feature fusion.
//!
//! The image is area-downsampled to 0.5× and 0.25×. Each downsampled copy
//! goes through its own 3×3 conv block, is concatenated with the encoder
//! feature map of matching resolution (level 1 at H/2, level 2 at H/4), and
//! a 1×1 convolution reduces the concatenation back to the encoder width.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, ConvBlock, ConvLayer, Init, ParamSet};

#[derive(Clone, Debug)]
pub struct MffWeights {
    pub stream2: ConvBlock,
    pub reduce1: ConvLayer,
    pub stream3: ConvBlock,
    pub reduce2: ConvLayer,
}

impl MffWeights {
    /// `widths` are the encoder widths of levels 1 and 2.
    pub fn register(
        params: &mut ParamSet,
        init: Init,
        prefix: &str,
        image_channels: usize,
        widths: (usize, usize),
    ) -> Result<Self> {
        let (e1, e2) = widths;
        Ok(Self {
            stream2: ConvBlock::register(
                params,
                init,
                &format!("{prefix}.stream2"),
                image_channels,
                e1,
                3,
                1,
            )?,
            reduce1: ConvLayer::register(
                params,
                init,
                &format!("{prefix}.reduce1"),
                2 * e1,
                e1,
                1,
                1,
            )?,
            stream3: ConvBlock::register(
                params,
                init,
                &format!("{prefix}.stream3"),
                image_channels,
                e2,
                3,
                1,
            )?,
            reduce2: ConvLayer::register(
                params,
                init,
                &format!("{prefix}.reduce2"),
                2 * e2,
                e2,
                1,
                1,
            )?,
        })
    }
}

fn fuse<'t>(
    p: &Bound<'t>,
    image: &Var<'t>,
    feat: &Var<'t>,
    factor: usize,
    stream: &ConvBlock,
    reduce: &ConvLayer,
) -> Result<Var<'t>> {
    let (_, h, w) = image.value().dims3("mff")?;
    let (_, fh, fw) = feat.value().dims3("mff")?;
    if h % factor != 0 || w % factor != 0 || (fh, fw) != (h / factor, w / factor) {
        return Err(Error::ShapeMismatch {
            op: "mff",
            lhs: image.shape().to_vec(),
            rhs: feat.shape().to_vec(),
        });
    }
    let small = nn::downsample_avg(image, factor)?;
    let streamed = stream.forward(p, &small)?;
    reduce.forward(p, &feat.concat_channels(&streamed)?)
}

/// Fuses the 0.5× stream into the level-1 feature map (H/2).
pub fn fuse_level1<'t>(
    p: &Bound<'t>,
    w: &MffWeights,
    image: &Var<'t>,
    level1: &Var<'t>,
) -> Result<Var<'t>> {
    fuse(p, image, level1, 2, &w.stream2, &w.reduce1)
}

/// Fuses the 0.25× stream into the level-2 feature map (H/4).
pub fn fuse_level2<'t>(
    p: &Bound<'t>,
    w: &MffWeights,
    image: &Var<'t>,
    level2: &Var<'t>,
) -> Result<Var<'t>> {
    fuse(p, image, level2, 4, &w.stream3, &w.reduce2)
}

/// Both fusions for given level-1 and level-2 maps. Inside the encoder the
/// level-2 map is computed from the fused level-1 output; this helper takes
/// both maps as given.
pub fn mff_forward<'t>(
    p: &Bound<'t>,
    w: &MffWeights,
    image: &Var<'t>,
    level1: &Var<'t>,
    level2: &Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    Ok((
        fuse_level1(p, w, image, level1)?,
        fuse_level2(p, w, image, level2)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn fused_maps_keep_their_shapes() {
        let mut ps = ParamSet::new();
        let w = MffWeights::register(&mut ps, Init { seed: 5 }, "mff", 3, (4, 6)).unwrap();
        let tape = Tape::inference();
        let p = ps.bind(&tape, false);
        let mut rng = rand::rng();
        let img = tape.constant(Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng));
        let l1 = tape.constant(Tensor::uniform(&[4, 8, 8], -1.0, 1.0, &mut rng));
        let l2 = tape.constant(Tensor::uniform(&[6, 4, 4], -1.0, 1.0, &mut rng));
        let (f1, f2) = mff_forward(&p, &w, &img, &l1, &l2).unwrap();
        assert_eq!(f1.shape(), l1.shape());
        assert_eq!(f2.shape(), l2.shape());
        assert!(mff_forward(&p, &w, &img, &l2, &l1).is_err());
    }

    #[test]
    fn full_width_concat_has_twice_the_level_width() {
        let mut ps = ParamSet::new();
        let w = MffWeights::register(&mut ps, Init { seed: 5 }, "mff", 3, (64, 256)).unwrap();
        assert_eq!(ps.get(w.reduce1.weight).shape(), &[64, 128, 1, 1]);
        assert_eq!(ps.get(w.reduce2.weight).shape(), &[256, 512, 1, 1]);
    }
}
