//! Central-difference gradient oracle and the per-operation check suite.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::cda::{self, CdaWeights, SeVariant, SeWeights};
use crate::error::Result;
use crate::mff::{self, MffWeights};
use crate::nn;
use crate::params::{Bound, ConvBlock, ConvLayer, Init, NormLayer, ParamSet};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Maximum accepted relative error in double precision.
pub const TOLERANCE: f64 = 1e-4;

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every element `i`.
pub fn finite_diff_gradient(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    step: f64,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// `max_i |a_i − n_i| / max(1, |a_i|)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares backward against central differences for every input of `f`,
/// returning the largest relative error found.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;

    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(var);
        let numeric = finite_diff_gradient(
            |probe| {
                let tape = Tape::inference();
                let vars: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.constant(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                f(&tape, &vars)?.value().item()
            },
            &inputs[k],
            DEFAULT_STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// One suite entry.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so that every
/// output element contributes a distinct gradient.
fn probe_loss<'t>(out: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng::derive(seed, &[0x5eed]));
    out.mul(&out.tape().constant(w))?.sum()
}

fn uniform(shape: &[usize], rng: &mut StreamRng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Parameter values with nonzero biases and non-unit norm scales.
fn jittered(params: &ParamSet, rng: &mut StreamRng) -> Vec<Tensor> {
    params
        .iter()
        .map(|(_, t)| {
            let mut j = t.clone();
            j.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.3..0.3));
            j
        })
        .collect()
}

/// Checks `f(bound_params, data_vars)` with respect to both data and parameters.
fn check_module<F>(
    data: Vec<Tensor>,
    params: &ParamSet,
    seed: u64,
    rng: &mut StreamRng,
    f: F,
) -> Result<f64>
where
    F: for<'t> Fn(&Bound<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let n = data.len();
    let mut inputs = data;
    inputs.extend(jittered(params, rng));
    check_gradients(&inputs, |_, vars| {
        let bound = Bound::from_vars(vars[n..].to_vec());
        probe_loss(&f(&bound, &vars[..n])?, seed)
    })
}

struct Composite {
    levels: Vec<(ConvLayer, NormLayer, ConvLayer, NormLayer, ConvLayer)>,
    dec: ConvBlock,
    head: ConvLayer,
}

impl Composite {
    fn build(params: &mut ParamSet, init: Init) -> Result<Self> {
        let mut levels = Vec::new();
        for (l, (i, o)) in [(3, 2), (2, 3)].into_iter().enumerate() {
            let name = format!("enc{l}");
            levels.push((
                ConvLayer::register(params, init, &format!("{name}.conv_a"), i, o, 3, 2)?,
                NormLayer::register(params, &format!("{name}.norm_a"), o)?,
                ConvLayer::register(params, init, &format!("{name}.conv_b"), o, o, 3, 1)?,
                NormLayer::register(params, &format!("{name}.norm_b"), o)?,
                ConvLayer::register(params, init, &format!("{name}.proj"), i, o, 1, 2)?,
            ));
        }
        Ok(Self {
            levels,
            dec: ConvBlock::register(params, init, "dec", 5, 2, 3, 1)?,
            head: ConvLayer::register(params, init, "head", 2, 1, 3, 1)?,
        })
    }

    fn forward<'t>(&self, p: &Bound<'t>, image: &Var<'t>) -> Result<Var<'t>> {
        let mut feats = Vec::new();
        let mut x = image.clone();
        for (conv_a, norm_a, conv_b, norm_b, proj) in &self.levels {
            let a = norm_a.forward(p, &conv_a.forward(p, &x)?)?.relu()?;
            let b = norm_b.forward(p, &conv_b.forward(p, &a)?)?;
            x = b.add(&proj.forward(p, &x)?)?.relu()?;
            feats.push(x.clone());
        }
        let up = nn::upsample_nearest(&feats[1], 2)?.concat_channels(&feats[0])?;
        let d = self.dec.forward(p, &up)?;
        self.head.forward(p, &nn::upsample_nearest(&d, 2)?)
    }
}

/// Every differentiable operation on small random tensors for one seed.
pub fn run_seed(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng::derive(seed, &[0x67c]);
    let rng = &mut rng;
    let init = Init { seed };
    let mut out = Vec::new();
    let mut push = |name: &'static str, err: f64| {
        out.push(CheckResult {
            name,
            seed,
            max_rel_error: err,
        })
    };

    let x = uniform(&[2, 5, 5], rng);
    let w = uniform(&[3, 2, 3, 3], rng);
    let b = uniform(&[3], rng);
    push(
        "conv2d",
        check_gradients(&[x.clone(), w.clone(), b.clone()], |_, v| {
            probe_loss(&nn::conv2d(&v[0], &v[1], &v[2], 1, 1)?, seed)
        })?,
    );
    push(
        "conv2d_stride2",
        check_gradients(&[x, w, b], |_, v| {
            probe_loss(&nn::conv2d(&v[0], &v[1], &v[2], 2, 1)?, seed)
        })?,
    );

    let x = uniform(&[3, 4, 4], rng);
    let g = uniform(&[3], rng).map(|v| v + 1.5);
    let b = uniform(&[3], rng);
    push(
        "group_norm",
        check_gradients(&[x.clone(), g, b], |_, v| {
            probe_loss(&nn::group_norm(&v[0], &v[1], &v[2])?, seed)
        })?,
    );
    push(
        "global_avg_pool",
        check_gradients(&[x.clone()], |_, v| {
            probe_loss(&nn::global_avg_pool(&v[0])?, seed)
        })?,
    );
    push(
        "downsample_avg",
        check_gradients(&[x.clone()], |_, v| {
            probe_loss(&nn::downsample_avg(&v[0], 2)?, seed)
        })?,
    );
    push(
        "upsample_nearest",
        check_gradients(&[x.clone()], |_, v| {
            probe_loss(&nn::upsample_nearest(&v[0], 2)?, seed)
        })?,
    );
    push(
        "sigmoid",
        check_gradients(&[x.clone()], |_, v| probe_loss(&v[0].sigmoid()?, seed))?,
    );
    push(
        "relu",
        check_gradients(&[x.clone()], |_, v| probe_loss(&v[0].relu()?, seed))?,
    );
    let gate_c = uniform(&[3, 1, 1], rng);
    let gate_s = uniform(&[1, 4, 4], rng);
    push(
        "broadcast_mul",
        check_gradients(&[x.clone(), gate_c, gate_s], |_, v| {
            probe_loss(&v[0].mul(&v[1])?.mul(&v[2])?.add(&v[0])?, seed)
        })?,
    );
    let y = uniform(&[2, 4, 4], rng);
    push(
        "concat_channels",
        check_gradients(&[x, y], |_, v| {
            probe_loss(&v[0].concat_channels(&v[1])?.scale(0.5)?, seed)
        })?,
    );

    let xv = uniform(&[4], rng);
    let wv = uniform(&[3, 4], rng);
    let bv = uniform(&[3], rng);
    push(
        "dense",
        check_gradients(&[xv, wv, bv], |_, v| {
            probe_loss(&nn::dense(&v[0], &v[1], &v[2])?, seed)
        })?,
    );

    let logits = uniform(&[5, 2, 2], rng).map(|v| 2.0 * v);
    push(
        "softmax_channels",
        check_gradients(&[logits.clone()], |_, v| {
            probe_loss(&v[0].softmax_channels()?, seed)
        })?,
    );
    let target: Vec<u8> = (0..4).map(|_| rng.random_range(0..5)).collect();
    push(
        "categorical_cross_entropy",
        check_gradients(&[logits], |_, v| {
            nn::categorical_cross_entropy(&v[0], &target)
        })?,
    );
    let pred = Tensor::uniform(&[1, 3, 3], 0.1, 0.9, rng);
    let mask = Tensor::uniform(&[1, 3, 3], 0.0, 1.0, rng).map(|v| if v < 0.5 { 0.0 } else { 1.0 });
    push(
        "binary_cross_entropy",
        check_gradients(&[pred], |_, v| nn::binary_cross_entropy(&v[0], &mask))?,
    );

    let e = 3;
    let mut ps = ParamSet::new();
    let cw = CdaWeights::register(&mut ps, init, "cda", e)?;
    let ua = uniform(&[e, 4, 4], rng);
    let ub = uniform(&[e, 4, 4], rng);
    push(
        "channel_gate",
        check_module(vec![ua.clone(), ub.clone()], &ps, seed, rng, |p, v| {
            cda::channel_gate(p, &cw, &v[0], &v[1])
        })?,
    );
    let gate = Tensor::uniform(&[e], 0.0, 1.0, rng);
    push(
        "channel_fuse",
        check_gradients(&[ua.clone(), ub.clone(), gate], |_, v| {
            let (a, b) = cda::channel_fuse(&v[0], &v[1], &v[2])?;
            probe_loss(&a.concat_channels(&b)?, seed)
        })?,
    );
    push(
        "spatial_gate",
        check_module(vec![ua.clone(), ub.clone()], &ps, seed, rng, |p, v| {
            cda::spatial_gate(p, &cw, &v[0], &v[1])
        })?,
    );
    push(
        "cda_forward",
        check_module(vec![ua.clone(), ub], &ps, seed, rng, |p, v| {
            let o = cda::cda_forward(p, &cw, &v[0], &v[1])?;
            o.u_pre_spa.concat_channels(&o.u_post_spa)
        })?,
    );

    for (name, variant) in [
        ("se_channel", SeVariant::Channel),
        ("se_spatial", SeVariant::Spatial),
        ("se_both", SeVariant::Both),
    ] {
        let mut ps = ParamSet::new();
        let sw = SeWeights::register(&mut ps, init, "se", e, variant)?;
        push(
            name,
            check_module(vec![ua.clone()], &ps, seed, rng, |p, v| {
                cda::se_block(p, &sw, &v[0])
            })?,
        );
    }

    let mut ps = ParamSet::new();
    let mw = MffWeights::register(&mut ps, init, "mff", 3, (2, 3))?;
    let img = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, rng);
    let l1 = uniform(&[2, 4, 4], rng);
    let l2 = uniform(&[3, 2, 2], rng);
    push(
        "mff_forward",
        check_module(vec![img.clone(), l1, l2], &ps, seed, rng, |p, v| {
            let (a, b) = mff::mff_forward(p, &mw, &v[0], &v[1], &v[2])?;
            a.sum()?.add(&b.sum()?)
        })?,
    );

    let mut ps = ParamSet::new();
    let net = Composite::build(&mut ps, init)?;
    push(
        "encoder_decoder_2level",
        check_module(vec![img], &ps, seed, rng, |p, v| net.forward(p, &v[0]))?,
    );

    Ok(out)
}

/// [`run_seed`] for every seed in order.
pub fn suite(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<CheckResult>> {
    let mut all = Vec::new();
    for s in seeds {
        all.extend(run_seed(s)?);
    }
    Ok(all)
}
