//! Differentiable network operations on channels-first feature maps.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Variance floor used by [`group_norm`].
pub const NORM_EPS: f64 = 1e-5;

/// Upper bound on im2col buffer size, in elements. Convolutions over large
/// maps are processed in bands of output rows so memory stays bounded.
const IM2COL_BUDGET: usize = 1 << 20;

/// `floor((input + 2·padding − kernel) / stride) + 1`, rejected when < 1.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::InvalidArgument(
            "stride and kernel must be positive".into(),
        ));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::InvalidArgument(format!(
            "kernel {kernel} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// `C = beta·C + A·B` for strided row/column views. Bounds are checked
/// before handing the raw pointers to the GEMM kernel.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len());
    assert!(k == 0 || last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: every index the kernel touches was bounds-checked above, and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Output rows per band so the im2col buffer stays within budget.
    fn band_rows(&self) -> usize {
        (IM2COL_BUDGET / (self.patch() * self.wo).max(1)).clamp(1, self.ho)
    }

    /// Fills `cols` (patch × rows·wo) for output rows `row0..row0+rows`.
    fn im2col(&self, x: &[f64], row0: usize, rows: usize, cols: &mut [f64]) {
        let n = rows * self.wo;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut cols[r * n..(r + 1) * n];
                    for (ry, oy) in (row0..row0 + rows).enumerate() {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let row = &mut dst[ry * self.wo..(ry + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back onto the input gradient.
    fn col2im(&self, cols: &[f64], row0: usize, rows: usize, dx: &mut [f64]) {
        let n = rows * self.wo;
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (ci * self.k + ki) * self.k + kj;
                    let src = &cols[r * n..(r + 1) * n];
                    for (ry, oy) in (row0..row0 + rows).enumerate() {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let row = &src[ry * self.wo..(ry + 1) * self.wo];
                        let base = iy as usize * self.w;
                        for (ox, v) in row.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[base + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `x` is `inC×h×w`, `weight` is `outC×inC×k×k`, `bias` has `outC` entries.
pub fn conv2d<'t>(
    x: &Var<'t>,
    weight: &Var<'t>,
    bias: &Var<'t>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t>> {
    let (c, h, w) = x.value().dims3("conv2d")?;
    let (o, k) = match weight.shape() {
        &[o, ci, k, k2] if ci == c && k == k2 => (o, k),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            })
        }
    };
    if bias.shape() != [o] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            lhs: vec![o],
            rhs: bias.shape().to_vec(),
        });
    }
    let ho = conv_output_extent(h, k, stride, padding)?;
    let wo = conv_output_extent(w, k, stride, padding)?;
    let d = ConvDims {
        c,
        h,
        w,
        o,
        k,
        stride,
        pad: padding,
        ho,
        wo,
    };

    let plane = ho * wo;
    let mut out = vec![0.0; o * plane];
    for (ch, b) in bias.value().data().iter().enumerate() {
        out[ch * plane..(ch + 1) * plane].fill(*b);
    }
    let band = d.band_rows();
    let mut cols = vec![0.0; d.patch() * band * wo];
    let xs = x.value().data();
    let ws = weight.value().data();
    let mut row0 = 0;
    while row0 < ho {
        let rows = band.min(ho - row0);
        let n = rows * wo;
        d.im2col(xs, row0, rows, &mut cols[..d.patch() * n]);
        gemm(
            o,
            d.patch(),
            n,
            ws,
            (d.patch(), 1),
            &cols[..d.patch() * n],
            (n, 1),
            1.0,
            &mut out[row0 * wo..],
            (plane, 1),
        );
        row0 += rows;
    }
    let out = Tensor::new(vec![o, ho, wo], out)?;

    x.tape()
        .record("conv2d", &[x, weight, bias], out, move |args| {
            let g = args.grad.data();
            let xs = args.inputs[0].data();
            let ws = args.inputs[1].data();
            let patch = d.patch();
            let mut dx = args.needs[0].then(|| vec![0.0; xs.len()]);
            let mut dw = args.needs[1].then(|| vec![0.0; ws.len()]);
            let db = args.needs[2].then(|| {
                let data = (0..d.o)
                    .map(|ch| g[ch * plane..(ch + 1) * plane].iter().sum())
                    .collect();
                Tensor::new(vec![d.o], data).expect("shape")
            });
            if dx.is_some() || dw.is_some() {
                let band = d.band_rows();
                let mut cols = vec![0.0; patch * band * d.wo];
                let mut row0 = 0;
                while row0 < d.ho {
                    let rows = band.min(d.ho - row0);
                    let n = rows * d.wo;
                    let gband = &g[row0 * d.wo..];
                    if let Some(dw) = dw.as_mut() {
                        d.im2col(xs, row0, rows, &mut cols[..patch * n]);
                        // dW += gOut · colsᵀ
                        gemm(
                            d.o,
                            n,
                            patch,
                            gband,
                            (plane, 1),
                            &cols[..patch * n],
                            (1, n),
                            1.0,
                            dw,
                            (patch, 1),
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dCols = Wᵀ · gOut
                        gemm(
                            patch,
                            d.o,
                            n,
                            ws,
                            (1, patch),
                            gband,
                            (plane, 1),
                            0.0,
                            &mut cols[..patch * n],
                            (n, 1),
                        );
                        d.col2im(&cols[..patch * n], row0, rows, dx);
                    }
                    row0 += rows;
                }
            }
            vec![
                dx.map(|v| Tensor::new(vec![d.c, d.h, d.w], v).expect("shape")),
                dw.map(|v| Tensor::new(vec![d.o, d.c, d.k, d.k], v).expect("shape")),
                db,
            ]
        })
}

/// Group normalization with a single group: statistics over the whole
/// `C×h×w` map, followed by a per-channel affine transform.
pub fn group_norm<'t>(x: &Var<'t>, gamma: &Var<'t>, beta: &Var<'t>) -> Result<Var<'t>> {
    let (c, h, w) = x.value().dims3("group_norm")?;
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                lhs: vec![c],
                rhs: p.shape().to_vec(),
            });
        }
    }
    let plane = h * w;
    let n = (c * plane) as f64;
    let xs = x.value().data();
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + NORM_EPS).sqrt();
    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv_std).collect();
    let gs = gamma.value().data();
    let bs = beta.value().data();
    let out: Vec<f64> = xhat
        .iter()
        .enumerate()
        .map(|(i, v)| gs[i / plane] * v + bs[i / plane])
        .collect();
    let out = Tensor::new(vec![c, h, w], out)?;
    x.tape()
        .record("group_norm", &[x, gamma, beta], out, move |args| {
            let g = args.grad.data();
            let gs = args.inputs[1].data();
            let dgamma = args.needs[1].then(|| {
                let data = (0..c)
                    .map(|ch| (ch * plane..(ch + 1) * plane).map(|i| g[i] * xhat[i]).sum())
                    .collect();
                Tensor::new(vec![c], data).expect("shape")
            });
            let dbeta = args.needs[2].then(|| {
                let data = (0..c)
                    .map(|ch| g[ch * plane..(ch + 1) * plane].iter().sum())
                    .collect();
                Tensor::new(vec![c], data).expect("shape")
            });
            let dx = args.needs[0].then(|| {
                let gx: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * gs[i / plane])
                    .collect();
                let sum_g: f64 = gx.iter().sum();
                let sum_gx: f64 = gx.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                let data = gx
                    .iter()
                    .zip(&xhat)
                    .map(|(gi, xi)| inv_std * (gi - sum_g / n - xi * sum_gx / n))
                    .collect();
                Tensor::new(vec![c, h, w], data).expect("shape")
            });
            vec![dx, dgamma, dbeta]
        })
}

/// Per-channel spatial mean: `C×h×w → C`.
pub fn global_avg_pool<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let (c, h, w) = x.value().dims3("global_avg_pool")?;
    let plane = h * w;
    let data = (0..c)
        .map(|ch| x.value().channel(ch).iter().sum::<f64>() / plane as f64)
        .collect();
    let out = Tensor::new(vec![c], data)?;
    x.tape().record("global_avg_pool", &[x], out, move |args| {
        let g = args.grad.data();
        let data = (0..c * plane)
            .map(|i| g[i / plane] / plane as f64)
            .collect();
        vec![Some(Tensor::new(vec![c, h, w], data).expect("shape"))]
    })
}

/// Non-overlapping `factor×factor` mean pooling.
pub fn downsample_avg<'t>(x: &Var<'t>, factor: usize) -> Result<Var<'t>> {
    let (c, h, w) = x.value().dims3("downsample_avg")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidShape {
            op: "downsample_avg",
            shape: x.shape().to_vec(),
            reason: format!("spatial extents not divisible by {factor}"),
        });
    }
    let (oh, ow) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    let xs = x.value().data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ch * oh + y / factor) * ow + xx / factor] += xs[(ch * h + y) * w + xx];
            }
        }
    }
    for v in &mut out {
        *v /= area;
    }
    let out = Tensor::new(vec![c, oh, ow], out)?;
    x.tape().record("downsample_avg", &[x], out, move |args| {
        let g = args.grad.data();
        let mut dx = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    dx[(ch * h + y) * w + xx] = g[(ch * oh + y / factor) * ow + xx / factor] / area;
                }
            }
        }
        vec![Some(Tensor::new(vec![c, h, w], dx).expect("shape"))]
    })
}

/// Nearest-neighbour upsampling: each pixel becomes a `factor×factor` block.
pub fn upsample_nearest<'t>(x: &Var<'t>, factor: usize) -> Result<Var<'t>> {
    let (c, h, w) = x.value().dims3("upsample_nearest")?;
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "upsample factor must be positive".into(),
        ));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xs = x.value().data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let row = &xs[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
            for xx in 0..ow {
                out.push(row[xx / factor]);
            }
        }
    }
    let out = Tensor::new(vec![c, oh, ow], out)?;
    x.tape().record("upsample_nearest", &[x], out, move |args| {
        let g = args.grad.data();
        let mut dx = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    dx[(ch * h + y / factor) * w + xx / factor] += g[(ch * oh + y) * ow + xx];
                }
            }
        }
        vec![Some(Tensor::new(vec![c, h, w], dx).expect("shape"))]
    })
}

/// Fully connected layer `weight·x + bias` with `weight: out×in`.
pub fn dense<'t>(x: &Var<'t>, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
    let n_in = x.value().len();
    let n_out = match weight.shape() {
        &[o, i] if i == n_in && x.value().rank() == 1 => o,
        _ => {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: x.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            })
        }
    };
    if bias.shape() != [n_out] {
        return Err(Error::ShapeMismatch {
            op: "dense bias",
            lhs: vec![n_out],
            rhs: bias.shape().to_vec(),
        });
    }
    let xs = x.value().data();
    let ws = weight.value().data();
    let data = (0..n_out)
        .map(|r| {
            let row = &ws[r * n_in..(r + 1) * n_in];
            row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() + bias.value().data()[r]
        })
        .collect();
    let out = Tensor::new(vec![n_out], data)?;
    x.tape()
        .record("dense", &[x, weight, bias], out, move |args| {
            let g = args.grad.data();
            let xs = args.inputs[0].data();
            let ws = args.inputs[1].data();
            let dx = args.needs[0].then(|| {
                let data = (0..n_in)
                    .map(|c| (0..n_out).map(|r| ws[r * n_in + c] * g[r]).sum())
                    .collect();
                Tensor::new(vec![n_in], data).expect("shape")
            });
            let dw = args.needs[1].then(|| {
                let data = (0..n_out * n_in)
                    .map(|i| g[i / n_in] * xs[i % n_in])
                    .collect();
                Tensor::new(vec![n_out, n_in], data).expect("shape")
            });
            let db = args.needs[2].then(|| args.grad.clone());
            vec![dx, dw, db]
        })
}

/// Mean binary cross-entropy between probabilities `pred` and a `{0,1}`
/// target of the same shape. Predictions are clamped to `[ε, 1−ε]`; clamped
/// entries pass no gradient.
pub fn binary_cross_entropy<'t>(pred: &Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "binary_cross_entropy",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if let Some(bad) = target.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument(format!(
            "binary target value {bad} outside {{0,1}}"
        )));
    }
    let n = pred.value().len() as f64;
    let total: f64 = pred
        .value()
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    let out = Tensor::scalar(total / n);
    let target = target.clone();
    pred.tape()
        .record("binary_cross_entropy", &[pred], out, move |args| {
            let g = args.grad.data()[0] / n;
            let data = args.inputs[0]
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &y)| {
                    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                        0.0
                    } else {
                        g * ((1.0 - y) / (1.0 - p) - y / p)
                    }
                })
                .collect();
            vec![Some(
                Tensor::new(target.shape().to_vec(), data).expect("shape"),
            )]
        })
}

/// Mean over pixels of `−log softmax(logits)[target]`.
///
/// `logits` is `C×h×w`; `target` holds `h·w` class ids in `0..C`.
pub fn categorical_cross_entropy<'t>(logits: &Var<'t>, target: &[u8]) -> Result<Var<'t>> {
    let (c, h, w) = logits.value().dims3("categorical_cross_entropy")?;
    let plane = h * w;
    if c < 2 {
        return Err(Error::InvalidShape {
            op: "categorical_cross_entropy",
            shape: logits.shape().to_vec(),
            reason: "need at least two classes".into(),
        });
    }
    if target.len() != plane {
        return Err(Error::ShapeMismatch {
            op: "categorical_cross_entropy",
            lhs: vec![h, w],
            rhs: vec![target.len()],
        });
    }
    if let Some((i, &t)) = target.iter().enumerate().find(|(_, &t)| t as usize >= c) {
        return Err(Error::InvalidArgument(format!(
            "class id {t} at pixel {i} outside 0..{c}"
        )));
    }
    let probs = crate::autodiff::softmax_channels(logits.value());
    let xs = logits.value().data();
    let total: f64 = target
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            // log-sum-exp directly, so saturated logits give ~0 and never -inf
            let max = (0..c)
                .map(|k| xs[k * plane + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = (0..c)
                .map(|k| (xs[k * plane + p] - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            lse - xs[t as usize * plane + p]
        })
        .sum();
    let out = Tensor::scalar(total / plane as f64);
    let target = target.to_vec();
    logits
        .tape()
        .record("categorical_cross_entropy", &[logits], out, move |args| {
            let g = args.grad.data()[0] / plane as f64;
            let mut dx: Vec<f64> = probs.data().iter().map(|p| p * g).collect();
            for (p, &t) in target.iter().enumerate() {
                dx[t as usize * plane + p] -= g;
            }
            vec![Some(Tensor::new(vec![c, h, w], dx).expect("shape"))]
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::uniform(&[1, 4, 5], -1.0, 1.0, &mut rand::rng()));
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::ones(&[1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.value().data(), &[9.0]);
    }

    #[test]
    fn padding_and_stride_geometry() {
        assert_eq!(conv_output_extent(512, 5, 2, 2).unwrap(), 256);
        assert_eq!(conv_output_extent(7, 3, 2, 1).unwrap(), 4);
        assert!(conv_output_extent(2, 5, 1, 0).is_err());

        let tape = Tape::inference();
        let x = tape.constant(Tensor::ones(&[2, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 2, 3, 3]));
        let b = tape.constant(Tensor::full(&[1], 0.5));
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        // corner sees a 2×2 window in both channels, centre the full 3×3
        assert_eq!(y.value().data()[0], 8.5);
        assert_eq!(y.value().data()[4], 18.5);

        let wrong = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
        assert!(conv2d(&x, &wrong, &b, 1, 1).is_err());
    }

    #[test]
    fn banded_convolution_matches_direct_sum() {
        // wide enough that the im2col buffer is split into several bands
        let mut rng = rand::rng();
        let tape = Tape::inference();
        let x = tape.constant(Tensor::uniform(&[3, 40, 300], -1.0, 1.0, &mut rng));
        let w = tape.constant(Tensor::uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng));
        let b = tape.constant(Tensor::uniform(&[2], -1.0, 1.0, &mut rng));
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        let (xs, ws) = (x.value().data(), w.value().data());
        for &(o, oy, ox) in &[(0, 0, 0), (1, 39, 299), (0, 20, 150), (1, 7, 0)] {
            let mut acc = b.value().data()[o];
            for c in 0..3 {
                for ki in 0..3 {
                    for kj in 0..3 {
                        let (iy, ix) =
                            (oy as isize + ki as isize - 1, ox as isize + kj as isize - 1);
                        if iy >= 0 && iy < 40 && ix >= 0 && ix < 300 {
                            acc += ws[((o * 3 + c) * 3 + ki) * 3 + kj]
                                * xs[(c * 40 + iy as usize) * 300 + ix as usize];
                        }
                    }
                }
            }
            let got = y.value().data()[(o * 40 + oy) * 300 + ox];
            assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
        }
    }

    #[test]
    fn pooling_and_resampling_values() {
        let tape = Tape::inference();
        let c = tape.constant(Tensor::full(&[2, 3, 3], 1.25));
        assert_eq!(global_avg_pool(&c).unwrap().value().data(), &[1.25, 1.25]);
        let ramp = tape.constant(t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        assert_eq!(global_avg_pool(&ramp).unwrap().value().data(), &[1.5]);

        let flat = tape.constant(Tensor::full(&[1, 4, 4], 3.0));
        assert_eq!(
            downsample_avg(&flat, 2).unwrap().value(),
            &Tensor::full(&[1, 2, 2], 3.0)
        );
        let q = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(downsample_avg(&q, 2).unwrap().value().data(), &[2.5]);
        let big = tape.constant(Tensor::zeros(&[1, 512, 512]));
        assert_eq!(downsample_avg(&big, 4).unwrap().shape(), &[1, 128, 128]);
        assert!(downsample_avg(&tape.constant(Tensor::zeros(&[1, 6, 6])), 4).is_err());

        let seven = tape.constant(Tensor::full(&[1, 1, 1], 7.0));
        assert_eq!(
            upsample_nearest(&seven, 2).unwrap().value(),
            &Tensor::full(&[1, 2, 2], 7.0)
        );
        let m = tape.constant(Tensor::zeros(&[3, 16, 16]));
        assert_eq!(upsample_nearest(&m, 2).unwrap().shape(), &[3, 32, 32]);
    }

    #[test]
    fn down_then_up_preserves_mean_of_constant() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::full(&[2, 8, 8], -0.75));
        let y = upsample_nearest(&downsample_avg(&x, 4).unwrap(), 4).unwrap();
        assert_eq!(y.value().sum() / 128.0, -0.75);
    }

    #[test]
    fn dense_values() {
        let tape = Tape::inference();
        let x = tape.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let zero = tape.constant(Tensor::zeros(&[3]));
        assert_eq!(dense(&x, &eye, &zero).unwrap().value(), x.value());

        let x = tape.constant(t(&[2], &[2.0, 3.0]));
        let w = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        assert_eq!(dense(&x, &w, &b).unwrap().value().data(), &[5.0]);
        assert!(dense(&x, &eye, &zero).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        let tape = Tape::inference();
        let target = t(&[1, 2, 2], &[1.0, 0.0, 1.0, 0.0]);
        let perfect = tape.constant(target.clone());
        let l = binary_cross_entropy(&perfect, &target).unwrap();
        assert!(l.value().item().unwrap() <= -(1.0 - PROB_EPS).ln() + 1e-15);

        let half = tape.constant(Tensor::full(&[1, 2, 2], 0.5));
        let l = binary_cross_entropy(&half, &target).unwrap();
        assert!((l.value().item().unwrap() - 2f64.ln()).abs() < 1e-15);

        let p = tape.constant(t(&[1, 1, 1], &[0.25]));
        let l = binary_cross_entropy(&p, &t(&[1, 1, 1], &[1.0])).unwrap();
        assert!((l.value().item().unwrap() - 4f64.ln()).abs() < 1e-15);

        assert!(binary_cross_entropy(&p, &t(&[1, 1, 1], &[0.5])).is_err());
        assert!(binary_cross_entropy(&half, &t(&[1, 1, 4], &[0.0; 4])).is_err());
    }

    #[test]
    fn cce_closed_forms() {
        let tape = Tape::inference();
        let uniform = tape.constant(Tensor::full(&[5, 2, 2], 0.3));
        let l = categorical_cross_entropy(&uniform, &[0, 1, 4, 2]).unwrap();
        assert!((l.value().item().unwrap() - 5f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::zeros(&[5, 1, 2]);
        logits.data_mut()[3 * 2] = 50.0;
        logits.data_mut()[2 + 1] = 50.0;
        let l = categorical_cross_entropy(&tape.constant(logits), &[3, 1]).unwrap();
        assert!(l.value().item().unwrap() < 1e-20);

        assert!(categorical_cross_entropy(&uniform, &[0, 1, 5, 2]).is_err());
        assert!(categorical_cross_entropy(&uniform, &[0, 1]).is_err());
    }

    #[test]
    fn group_norm_normalizes() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::uniform(&[3, 4, 4], -5.0, 9.0, &mut rand::rng()));
        let y = group_norm(
            &x,
            &tape.constant(Tensor::ones(&[3])),
            &tape.constant(Tensor::zeros(&[3])),
        )
        .unwrap();
        let mean = y.value().sum() / 48.0;
        let var = y.value().data().iter().map(|v| v * v).sum::<f64>() / 48.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}
