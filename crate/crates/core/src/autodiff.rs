//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation whose inputs depend on a gradient leaf.
//! Each record keeps the input values, the output value and a local backward
//! rule. [`Tape::backward`] walks the records in reverse insertion order,
//! which is a valid reverse topological order because an operation can only
//! consume values that already exist.
//!
//! ```
//! use bda::autodiff::Tape;
//! use bda::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = x.mul(&x).unwrap();
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.get(&x).unwrap().item().unwrap(), 6.0);
//! ```
//!
//! An inference tape ([`Tape::inference`]) records nothing, so intermediate
//! values are freed as soon as the last [`Var`] holding them is dropped.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs handed to a local backward rule.
pub(crate) struct BackwardArgs<'a> {
    /// Gradient of the loss with respect to this operation's output.
    pub grad: &'a Tensor,
    pub inputs: &'a [Rc<Tensor>],
    pub output: &'a Tensor,
    /// Which inputs need a gradient. Rules may skip the others.
    pub needs: &'a [bool],
}

type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    inputs: Vec<Option<usize>>,
    input_values: Vec<Rc<Tensor>>,
    output: Rc<Tensor>,
    /// `None` marks a leaf.
    backward: Option<BackwardFn>,
}

/// Ordered record of executed operations. Owned by one execution context.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that never records; every value behaves as a constant.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded operations, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A gradient leaf (requires_grad = true on a recording tape).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.leaf_rc(Rc::new(value))
    }

    pub(crate) fn leaf_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        if !self.recording {
            return Var {
                tape: self,
                node: None,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: Vec::new(),
            input_values: Vec::new(),
            output: value.clone(),
            backward: None,
        });
        Var {
            tape: self,
            node: Some(nodes.len() - 1),
            value,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            node: None,
            value: Rc::new(value),
        }
    }

    /// Records `output` as the result of `op` applied to `inputs`.
    ///
    /// Rejects non-finite outputs. The backward rule is only kept when at
    /// least one input takes part in gradient computation.
    pub(crate) fn record<'t, F>(
        &'t self,
        op: &'static str,
        inputs: &[&Var<'t>],
        output: Tensor,
        backward: F,
    ) -> Result<Var<'t>>
    where
        F: Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        if !output.is_finite() {
            return Err(Error::NonFinite { op });
        }
        debug_assert!(inputs.iter().all(|v| std::ptr::eq(v.tape, self)));
        let output = Rc::new(output);
        let tracked = self.recording && inputs.iter().any(|v| v.node.is_some());
        if !tracked {
            return Ok(Var {
                tape: self,
                node: None,
                value: output,
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: inputs.iter().map(|v| v.node).collect(),
            input_values: inputs.iter().map(|v| v.value.clone()).collect(),
            output: output.clone(),
            backward: Some(Box::new(backward)),
        });
        Ok(Var {
            tape: self,
            node: Some(nodes.len() - 1),
            value: output,
        })
    }

    /// Propagates gradients from a scalar `loss` to every reachable leaf.
    ///
    /// The tape is left untouched, so calling this twice yields identical
    /// gradients.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: loss.value.shape().to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        let Some(loss_id) = loss.node else {
            return Err(Error::InvalidArgument(
                "loss does not depend on any gradient leaf".into(),
            ));
        };
        let nodes = self.nodes.borrow();
        let mut pending: Vec<Option<Tensor>> = vec![None; loss_id + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];
        pending[loss_id] = Some(Tensor::ones(loss.value.shape()));

        for id in (0..=loss_id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let Some(rule) = &node.backward else {
                leaves[id] = Some(grad);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = rule(&BackwardArgs {
                grad: &grad,
                inputs: &node.input_values,
                output: &node.output,
                needs: &needs,
            });
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let (Some(j), Some(g)) = (input, g) else {
                    continue;
                };
                match &mut pending[*j] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `leaf`, or `None` when the loss does not reach it.
    pub fn get(&self, leaf: &Var<'_>) -> Option<&Tensor> {
        leaf.node.and_then(|id| self.leaves.get(id)?.as_ref())
    }

    /// Gradient of `leaf`, zeros when unreached.
    pub fn get_or_zeros(&self, leaf: &Var<'_>) -> Tensor {
        self.get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape()))
    }
}

/// A value on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    node: Option<usize>,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("shape", &self.value.shape())
            .finish()
    }
}

/// Broadcast forms accepted by the elementwise operations. The right-hand
/// operand is the one that broadcasts.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Same,
    Scalar,
    /// `1×h×w` against `E×h×w`.
    Spatial {
        plane: usize,
    },
    /// `E×1×1` against `E×h×w`.
    Channel {
        plane: usize,
    },
}

impl Broadcast {
    fn classify(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        if b.iter().product::<usize>() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if let ([e, h, w], [be, bh, bw]) = (a, b) {
            if *be == 1 && bh == h && bw == w {
                return Ok(Broadcast::Spatial { plane: h * w });
            }
            if be == e && *bh == 1 && *bw == 1 {
                return Ok(Broadcast::Channel { plane: h * w });
            }
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Spatial { plane } => i % plane,
            Broadcast::Channel { plane } => i / plane,
        }
    }

    /// Sums a full-size gradient down to the broadcast operand's shape.
    fn reduce(self, full: Tensor, b_shape: &[usize]) -> Tensor {
        if self == Broadcast::Same {
            return full;
        }
        let mut out = Tensor::zeros(b_shape);
        let dst = out.data_mut();
        for (i, g) in full.data().iter().enumerate() {
            dst[self.index(i)] += g;
        }
        out
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// True when this value takes part in gradient computation.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Elementwise sum. `other` may be a scalar, a `1×h×w` spatial map or an
    /// `E×1×1` channel vector broadcast against `self`.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let kind = Broadcast::classify("add", self.shape(), other.shape())?;
        let a = self.value.data();
        let b = other.value.data();
        let data = a
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[kind.index(i)])
            .collect();
        let out = Tensor::new(self.shape().to_vec(), data)?;
        self.tape.record("add", &[self, other], out, move |args| {
            let ga = args.needs[0].then(|| args.grad.clone());
            let gb = args.needs[1].then(|| kind.reduce(args.grad.clone(), args.inputs[1].shape()));
            vec![ga, gb]
        })
    }

    /// Elementwise product with the same broadcast forms as [`Var::add`].
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let kind = Broadcast::classify("mul", self.shape(), other.shape())?;
        let a = self.value.data();
        let b = other.value.data();
        let data = a
            .iter()
            .enumerate()
            .map(|(i, x)| x * b[kind.index(i)])
            .collect();
        let out = Tensor::new(self.shape().to_vec(), data)?;
        self.tape.record("mul", &[self, other], out, move |args| {
            let (a, b) = (&args.inputs[0], &args.inputs[1]);
            let g = args.grad.data();
            let ga = args.needs[0].then(|| {
                let data = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * b.data()[kind.index(i)])
                    .collect();
                Tensor::new(a.shape().to_vec(), data).expect("shape")
            });
            let gb = args.needs[1].then(|| {
                let data = g.iter().zip(a.data()).map(|(gi, ai)| gi * ai).collect();
                let full = Tensor::new(a.shape().to_vec(), data).expect("shape");
                kind.reduce(full, b.shape())
            });
            vec![ga, gb]
        })
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        let out = self.value.map(|v| v * s);
        self.tape.record("scale", &[self], out, move |args| {
            vec![Some(args.grad.map(|g| g * s))]
        })
    }

    /// Stacks `self` (C1×h×w) and `other` (C2×h×w) along the channel axis.
    pub fn concat_channels(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (c1, h, w) = self.value.dims3("concat_channels")?;
        let (c2, h2, w2) = other.value.dims3("concat_channels")?;
        if (h, w) != (h2, w2) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity((c1 + c2) * h * w);
        data.extend_from_slice(self.value.data());
        data.extend_from_slice(other.value.data());
        let out = Tensor::new(vec![c1 + c2, h, w], data)?;
        let split = c1 * h * w;
        self.tape
            .record("concat_channels", &[self, other], out, move |args| {
                let g = args.grad.data();
                let ga = args.needs[0]
                    .then(|| Tensor::new(vec![c1, h, w], g[..split].to_vec()).expect("shape"));
                let gb = args.needs[1]
                    .then(|| Tensor::new(vec![c2, h, w], g[split..].to_vec()).expect("shape"));
                vec![ga, gb]
            })
    }

    /// Logistic function, evaluated without overflow for large |x|.
    pub fn sigmoid(&self) -> Result<Var<'t>> {
        let out = self.value.map(sigmoid);
        self.tape.record("sigmoid", &[self], out, |args| {
            let data = args
                .grad
                .data()
                .iter()
                .zip(args.output.data())
                .map(|(g, s)| g * s * (1.0 - s))
                .collect();
            vec![Some(
                Tensor::new(args.output.shape().to_vec(), data).expect("shape"),
            )]
        })
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        let out = self.value.map(|v| v.max(0.0));
        self.tape.record("relu", &[self], out, |args| {
            let data = args
                .grad
                .data()
                .iter()
                .zip(args.inputs[0].data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            vec![Some(
                Tensor::new(args.output.shape().to_vec(), data).expect("shape"),
            )]
        })
    }

    /// Softmax over the channel axis of a `C×h×w` map, per pixel.
    pub fn softmax_channels(&self) -> Result<Var<'t>> {
        let (c, h, w) = self.value.dims3("softmax_channels")?;
        if c < 2 {
            return Err(Error::InvalidShape {
                op: "softmax_channels",
                shape: self.shape().to_vec(),
                reason: "need at least two channels".into(),
            });
        }
        let out = softmax_channels(&self.value);
        self.tape
            .record("softmax_channels", &[self], out, move |args| {
                let plane = h * w;
                let s = args.output.data();
                let g = args.grad.data();
                let mut dx = vec![0.0; s.len()];
                for p in 0..plane {
                    let dot: f64 = (0..c).map(|k| g[k * plane + p] * s[k * plane + p]).sum();
                    for k in 0..c {
                        let i = k * plane + p;
                        dx[i] = s[i] * (g[i] - dot);
                    }
                }
                vec![Some(Tensor::new(vec![c, h, w], dx).expect("shape"))]
            })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.value.sum());
        self.tape.record("sum", &[self], out, |args| {
            let g = args.grad.data()[0];
            vec![Some(Tensor::full(args.inputs[0].shape(), g))]
        })
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value.len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Same buffer viewed with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value.reshape(shape)?;
        self.tape.record("reshape", &[self], out, |args| {
            let g = args.grad.reshape(args.inputs[0].shape()).expect("shape");
            vec![Some(g)]
        })
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel softmax over channels with max subtraction.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = h * w;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..plane {
        let max = (0..c)
            .map(|k| src[k * plane + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for k in 0..c {
            let e = (src[k * plane + p] - max).exp();
            out[k * plane + p] = e;
            total += e;
        }
        for k in 0..c {
            out[k * plane + p] /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn mul_and_add_elementwise() {
        let tape = Tape::inference();
        let a = tape.constant(t(&[2], &[2.0, 3.0]));
        let b = tape.constant(t(&[2], &[4.0, 5.0]));
        assert_eq!(a.mul(&b).unwrap().value().data(), &[8.0, 15.0]);
        let x = tape.constant(t(&[2, 2], &[1.0, -2.0, 3.5, 0.25]));
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        assert_eq!(x.add(&z).unwrap().value(), x.value());
    }

    #[test]
    fn spatial_gate_broadcast() {
        let tape = Tape::inference();
        let feat = tape.constant(Tensor::full(&[3, 2, 2], 4.0));
        let gate = tape.constant(Tensor::full(&[1, 2, 2], 0.5));
        let out = feat.mul(&gate).unwrap();
        assert_eq!(out.value(), &Tensor::full(&[3, 2, 2], 2.0));
    }

    #[test]
    fn channel_broadcast_and_rejection() {
        let tape = Tape::inference();
        let feat = tape.constant(Tensor::ones(&[2, 2, 3]));
        let gate = tape.constant(t(&[2, 1, 1], &[2.0, 3.0]));
        let out = feat.mul(&gate).unwrap();
        assert_eq!(&out.value().data()[..6], &[2.0; 6]);
        assert_eq!(&out.value().data()[6..], &[3.0; 6]);

        let bad = tape.constant(Tensor::ones(&[2, 2, 1]));
        match feat.add(&bad) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 2, 3]);
                assert_eq!(rhs, vec![2, 2, 1]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn concat_layout_and_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::uniform(&[2, 2, 2], -1.0, 1.0, &mut rand::rng()));
        let b = tape.leaf(Tensor::uniform(&[2, 2, 2], -1.0, 1.0, &mut rand::rng()));
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.shape(), &[4, 2, 2]);
        assert_eq!(c.value().channel(0), a.value().channel(0));
        assert_eq!(c.value().channel(2), b.value().channel(0));
        let g = tape.backward(&c.sum().unwrap()).unwrap();
        assert_eq!(g.get(&a).unwrap(), &Tensor::ones(&[2, 2, 2]));
        assert_eq!(g.get(&b).unwrap(), &Tensor::ones(&[2, 2, 2]));

        let odd = tape.leaf(Tensor::ones(&[1, 3, 2]));
        assert!(a.concat_channels(&odd).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(50.0) - 1.0).abs() <= 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4]));
        let loss = x.sigmoid().unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_closed_forms() {
        let tape = Tape::inference();
        let u = tape.constant(Tensor::full(&[5, 2, 3], 1.7));
        let s = u.softmax_channels().unwrap();
        assert!(s.value().data().iter().all(|v| (v - 0.2).abs() < 1e-15));

        let l = tape.constant(t(&[2, 1, 1], &[0.0, 2f64.ln()]));
        let s = l.softmax_channels().unwrap();
        assert!((s.value().data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.value().data()[1] - 2.0 / 3.0).abs() < 1e-15);

        let r = tape.constant(Tensor::uniform(&[4, 3, 3], -30.0, 30.0, &mut rand::rng()));
        let s = r.softmax_channels().unwrap();
        for p in 0..9 {
            let total: f64 = (0..4).map(|k| s.value().data()[k * 9 + p]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let single = tape.constant(Tensor::ones(&[1, 2, 2]));
        assert!(single.softmax_channels().is_err());
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_is_repeatable() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.3, -1.2, 2.0]));
        let y = x.sigmoid().unwrap();
        assert!(tape.backward(&y).is_err());
        let w = tape.constant(t(&[3], &[1.5, -0.5, 2.0]));
        let loss = y.mul(&w).unwrap().relu().unwrap().sum().unwrap();
        let g1 = tape.backward(&loss).unwrap();
        let g2 = tape.backward(&loss).unwrap();
        assert_eq!(g1.get(&x), g2.get(&x));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = tape.leaf(Tensor::ones(&[2]));
        let y = x.scale(2.0).unwrap().sum().unwrap();
        assert!(tape.is_empty());
        assert!(!y.requires_grad());
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], f64::MAX));
        assert!(matches!(x.scale(10.0), Err(Error::NonFinite { .. })));
    }
}
