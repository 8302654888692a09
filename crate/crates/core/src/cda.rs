//! Cross-directional attention between the pre- and post-disaster decoder
//! streams, and single-stream squeeze-excitation blocks for comparison.
//!
//! With `U_pre, U_post ∈ R^{E×h×w}`:
//!
//! ```text
//! I_cha      = σ(dense(pool([U_pre, U_post])))          dense: 2E → E
//! U_pre_cha  = I_cha ⊛ U_post + U_pre
//! U_post_cha = I_cha ⊛ U_pre  + U_post
//! I_spa      = σ(conv1x1([U_pre_cha, U_post_cha]))      conv: 2E → 1
//! U_pre_spa  = I_spa · U_post_cha + U_pre
//! U_post_spa = I_spa · U_pre_cha  + U_post
//! ```
//!
//! Each stream's gated features are added to the *other* stream. The final
//! residual uses the original inputs, not the channel-fused maps.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, ConvLayer, DenseLayer, Init, ParamSet};

/// Learnable parameters of one attention site of width `E`.
#[derive(Clone, Debug)]
pub struct CdaWeights {
    pub channel_reduce: DenseLayer,
    pub spatial_conv: ConvLayer,
    pub width: usize,
}

impl CdaWeights {
    pub fn register(params: &mut ParamSet, init: Init, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            channel_reduce: DenseLayer::register(
                params,
                init,
                &format!("{prefix}.channel"),
                2 * width,
                width,
            )?,
            spatial_conv: ConvLayer::register(
                params,
                init,
                &format!("{prefix}.spatial"),
                2 * width,
                1,
                1,
                1,
            )?,
            width,
        })
    }
}

/// Fused maps plus the gates, kept for inspection.
pub struct CdaOutputs<'t> {
    pub u_pre_spa: Var<'t>,
    pub u_post_spa: Var<'t>,
    pub i_cha: Var<'t>,
    pub i_spa: Var<'t>,
}

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Channel gate `I_cha ∈ (0,1)^E` from pooled concatenated features.
pub fn channel_gate<'t>(
    p: &Bound<'t>,
    w: &CdaWeights,
    u_pre: &Var<'t>,
    u_post: &Var<'t>,
) -> Result<Var<'t>> {
    same_shape("channel_gate", u_pre, u_post)?;
    let (e, _, _) = u_pre.value().dims3("channel_gate")?;
    if e != w.width {
        return Err(Error::ShapeMismatch {
            op: "channel_gate",
            lhs: vec![w.width],
            rhs: u_pre.shape().to_vec(),
        });
    }
    let pooled = nn::global_avg_pool(&u_pre.concat_channels(u_post)?)?;
    w.channel_reduce.forward(p, &pooled)?.sigmoid()
}

/// Cross-directional channel fusion with gate `i_cha` of length `E`.
pub fn channel_fuse<'t>(
    u_pre: &Var<'t>,
    u_post: &Var<'t>,
    i_cha: &Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    same_shape("channel_fuse", u_pre, u_post)?;
    let (e, _, _) = u_pre.value().dims3("channel_fuse")?;
    if i_cha.shape() != [e] {
        return Err(Error::ShapeMismatch {
            op: "channel_fuse",
            lhs: vec![e],
            rhs: i_cha.shape().to_vec(),
        });
    }
    let gate = i_cha.reshape(&[e, 1, 1])?;
    let pre = u_post.mul(&gate)?.add(u_pre)?;
    let post = u_pre.mul(&gate)?.add(u_post)?;
    Ok((pre, post))
}

/// Spatial gate `I_spa ∈ (0,1)^{1×h×w}`.
pub fn spatial_gate<'t>(
    p: &Bound<'t>,
    w: &CdaWeights,
    u_pre_cha: &Var<'t>,
    u_post_cha: &Var<'t>,
) -> Result<Var<'t>> {
    same_shape("spatial_gate", u_pre_cha, u_post_cha)?;
    let cat = u_pre_cha.concat_channels(u_post_cha)?;
    w.spatial_conv.forward(p, &cat)?.sigmoid()
}

pub fn cda_forward<'t>(
    p: &Bound<'t>,
    w: &CdaWeights,
    u_pre: &Var<'t>,
    u_post: &Var<'t>,
) -> Result<CdaOutputs<'t>> {
    let i_cha = channel_gate(p, w, u_pre, u_post)?;
    let (pre_cha, post_cha) = channel_fuse(u_pre, u_post, &i_cha)?;
    let i_spa = spatial_gate(p, w, &pre_cha, &post_cha)?;
    let u_pre_spa = post_cha.mul(&i_spa)?.add(u_pre)?;
    let u_post_spa = pre_cha.mul(&i_spa)?.add(u_post)?;
    Ok(CdaOutputs {
        u_pre_spa,
        u_post_spa,
        i_cha,
        i_spa,
    })
}

/// Which gates a single-stream squeeze-excitation block applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeVariant {
    Channel,
    Spatial,
    Both,
}

/// Parameters of a single-stream SE block of width `E`.
#[derive(Clone, Debug)]
pub struct SeWeights {
    pub variant: SeVariant,
    pub channel: Option<DenseLayer>,
    pub spatial: Option<ConvLayer>,
    pub width: usize,
}

impl SeWeights {
    pub fn register(
        params: &mut ParamSet,
        init: Init,
        prefix: &str,
        width: usize,
        variant: SeVariant,
    ) -> Result<Self> {
        let channel = match variant {
            SeVariant::Channel | SeVariant::Both => Some(DenseLayer::register(
                params,
                init,
                &format!("{prefix}.channel"),
                width,
                width,
            )?),
            SeVariant::Spatial => None,
        };
        let spatial = match variant {
            SeVariant::Spatial | SeVariant::Both => Some(ConvLayer::register(
                params,
                init,
                &format!("{prefix}.spatial"),
                width,
                1,
                1,
                1,
            )?),
            SeVariant::Channel => None,
        };
        Ok(Self {
            variant,
            channel,
            spatial,
            width,
        })
    }
}

/// Squeeze-excitation on one stream, with residual:
///
/// * channel: `u' = σ(dense(pool(u))) ⊛ u + u`
/// * spatial: `u' = σ(conv1x1(u)) · u + u`
/// * both: the spatial form applied to the channel form's output.
pub fn se_block<'t>(p: &Bound<'t>, w: &SeWeights, u: &Var<'t>) -> Result<Var<'t>> {
    let (e, _, _) = u.value().dims3("se_block")?;
    if e != w.width {
        return Err(Error::ShapeMismatch {
            op: "se_block",
            lhs: vec![w.width],
            rhs: u.shape().to_vec(),
        });
    }
    let mut out = u.clone();
    if let Some(dense) = &w.channel {
        let gate = dense
            .forward(p, &nn::global_avg_pool(&out)?)?
            .sigmoid()?
            .reshape(&[e, 1, 1])?;
        out = out.mul(&gate)?.add(&out)?;
    }
    if let Some(conv) = &w.spatial {
        let gate = conv.forward(p, &out)?.sigmoid()?;
        out = out.mul(&gate)?.add(&out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn zeroed(width: usize) -> (ParamSet, CdaWeights) {
        let mut ps = ParamSet::new();
        let w = CdaWeights::register(&mut ps, Init { seed: 0 }, "cda", width).unwrap();
        for id in ps.ids().collect::<Vec<_>>() {
            ps.get_mut(id).data_mut().fill(0.0);
        }
        (ps, w)
    }

    #[test]
    fn zero_weights_give_half_gates_and_zero_outputs() {
        let (ps, w) = zeroed(3);
        let tape = Tape::inference();
        let p = ps.bind(&tape, false);
        let z = tape.constant(Tensor::zeros(&[3, 2, 2]));
        let out = cda_forward(&p, &w, &z, &z).unwrap();
        assert_eq!(out.i_cha.value(), &Tensor::full(&[3], 0.5));
        assert_eq!(out.i_spa.value(), &Tensor::full(&[1, 2, 2], 0.5));
        assert!(out.u_pre_spa.value().data().iter().all(|&v| v == 0.0));
        assert!(out.u_post_spa.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(out.u_pre_spa.shape(), &[3, 2, 2]);
    }

    /// Random weights whose pre and post input blocks are equal.
    fn block_symmetric(width: usize, seed: u64) -> (ParamSet, CdaWeights) {
        let mut ps = ParamSet::new();
        let w = CdaWeights::register(&mut ps, Init { seed }, "cda", width).unwrap();
        let mut rng = crate::rng::derive(seed, &[7]);
        for id in [w.channel_reduce.bias, w.spatial_conv.bias] {
            let n = ps.get(id).len();
            ps.get_mut(id)
                .data_mut()
                .copy_from_slice(Tensor::uniform(&[n], -0.5, 0.5, &mut rng).data());
        }
        let dense = ps.get_mut(w.channel_reduce.weight).data_mut();
        for row in dense.chunks_mut(2 * width) {
            let (a, b) = row.split_at_mut(width);
            b.copy_from_slice(a);
        }
        let conv = ps.get_mut(w.spatial_conv.weight).data_mut();
        let (a, b) = conv.split_at_mut(width);
        b.copy_from_slice(a);
        (ps, w)
    }

    proptest::proptest! {
        #[test]
        fn swapping_streams_swaps_outputs(width in 1usize..5, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
            let (ps, cw) = block_symmetric(width, seed);
            let tape = Tape::inference();
            let p = ps.bind(&tape, false);
            let mut rng = crate::rng::derive(seed, &[8]);
            let a = tape.constant(Tensor::uniform(&[width, h, w], -2.0, 2.0, &mut rng));
            let b = tape.constant(Tensor::uniform(&[width, h, w], -2.0, 2.0, &mut rng));
            let ab = cda_forward(&p, &cw, &a, &b).unwrap();
            let ba = cda_forward(&p, &cw, &b, &a).unwrap();
            proptest::prop_assert!(ab.u_pre_spa.value().max_abs_diff(ba.u_post_spa.value()) <= 1e-12);
            proptest::prop_assert!(ab.u_post_spa.value().max_abs_diff(ba.u_pre_spa.value()) <= 1e-12);
        }

        #[test]
        fn gates_stay_inside_the_unit_interval(width in 1usize..6, h in 1usize..6, w in 1usize..6, seed in 0u64..u64::MAX) {
            let mut ps = ParamSet::new();
            let cw = CdaWeights::register(&mut ps, Init { seed }, "cda", width).unwrap();
            let tape = Tape::inference();
            let p = ps.bind(&tape, false);
            let mut rng = crate::rng::derive(seed, &[9]);
            let a = tape.constant(Tensor::uniform(&[width, h, w], -3.0, 3.0, &mut rng));
            let b = tape.constant(Tensor::uniform(&[width, h, w], -3.0, 3.0, &mut rng));
            let out = cda_forward(&p, &cw, &a, &b).unwrap();
            for g in out.i_cha.value().data().iter().chain(out.i_spa.value().data()) {
                proptest::prop_assert!(*g > 0.0 && *g < 1.0, "gate {}", g);
            }
        }
    }

    #[test]
    fn channel_fuse_cases() {
        let tape = Tape::inference();
        let mut rng = rand::rng();
        let a = tape.constant(Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng));
        let b = tape.constant(Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng));
        let g = tape.constant(Tensor::uniform(&[2], 0.0, 1.0, &mut rng));
        let zero = tape.constant(Tensor::zeros(&[2, 3, 3]));

        let (pre, _) = channel_fuse(&a, &zero, &g).unwrap();
        assert_eq!(pre.value(), a.value());

        let half = tape.constant(Tensor::full(&[2], 0.5));
        let (p1, p2) = channel_fuse(&a, &a, &half).unwrap();
        let expect = a.value().map(|v| 1.5 * v);
        assert_eq!(p1.value(), &expect);
        assert_eq!(p2.value(), &expect);

        let (x1, x2) = channel_fuse(&a, &b, &g).unwrap();
        let (y1, y2) = channel_fuse(&b, &a, &g).unwrap();
        assert_eq!(x1.value(), y2.value());
        assert_eq!(x2.value(), y1.value());

        assert!(channel_fuse(&a, &b, &tape.constant(Tensor::zeros(&[3]))).is_err());
    }

    #[test]
    fn gate_width_must_match_weights() {
        let (ps, w) = zeroed(4);
        let tape = Tape::inference();
        let p = ps.bind(&tape, false);
        let u = tape.constant(Tensor::zeros(&[3, 2, 2]));
        assert!(channel_gate(&p, &w, &u, &u).is_err());
    }

    #[test]
    fn se_zero_weights_scale_by_one_and_a_half() {
        let tape = Tape::inference();
        let u = tape.constant(
            Tensor::new(
                vec![2, 2, 2],
                vec![1.0, -2.0, 3.0, 0.5, -1.0, 4.0, 2.0, -0.25],
            )
            .unwrap(),
        );
        for (variant, factor) in [
            (SeVariant::Channel, 1.5),
            (SeVariant::Spatial, 1.5),
            (SeVariant::Both, 2.25),
        ] {
            let mut ps = ParamSet::new();
            let w = SeWeights::register(&mut ps, Init { seed: 1 }, "se", 2, variant).unwrap();
            for id in ps.ids().collect::<Vec<_>>() {
                ps.get_mut(id).data_mut().fill(0.0);
            }
            let p = ps.bind(&tape, false);
            let out = se_block(&p, &w, &u).unwrap();
            assert_eq!(out.value(), &u.value().map(|v| factor * v), "{variant:?}");
        }
    }

    #[test]
    fn se_channel_matches_hand_evaluation() {
        // u: channel 0 = [1,2,3,4] (mean 2.5), channel 1 = [-1,0,1,2] (mean 0.5)
        // W = [[0.2,-0.4],[1.0,0.6]], b = [0.1,-0.3]
        // z0 = 0.5 - 0.2 + 0.1 = 0.4, z1 = 2.5 + 0.3 - 0.3 = 2.5
        let tape = Tape::inference();
        let mut ps = ParamSet::new();
        let w =
            SeWeights::register(&mut ps, Init { seed: 1 }, "se", 2, SeVariant::Channel).unwrap();
        let dense = w.channel.as_ref().unwrap();
        ps.get_mut(dense.weight)
            .data_mut()
            .copy_from_slice(&[0.2, -0.4, 1.0, 0.6]);
        ps.get_mut(dense.bias)
            .data_mut()
            .copy_from_slice(&[0.1, -0.3]);
        let p = ps.bind(&tape, false);
        let u = tape.constant(
            Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]).unwrap(),
        );
        let out = se_block(&p, &w, &u).unwrap();
        let s0 = 1.0 / (1.0 + (-0.4f64).exp());
        let s1 = 1.0 / (1.0 + (-2.5f64).exp());
        let expect = [
            1.0 * (1.0 + s0),
            2.0 * (1.0 + s0),
            3.0 * (1.0 + s0),
            4.0 * (1.0 + s0),
            -1.0 * (1.0 + s1),
            0.0,
            1.0 + s1,
            2.0 * (1.0 + s1),
        ];
        for (got, want) in out.value().data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}
