//! Named parameter storage and the layer handles that index into it.

use std::collections::HashMap;
use std::ops::Index;
use std::rc::Rc;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::rng;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Rc<Tensor>>,
    index: HashMap<String, usize>,
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name}"
            )));
        }
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(Rc::new(value));
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| v.as_ref()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Places every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf_rc(v.clone())
                } else {
                    tape.constant((**v).clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a tape, indexable by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps vars created elsewhere; position `i` answers `ParamId(i)`.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    /// Gradient per parameter, zeros for parameters the loss never reached.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

/// Seeded initializer. Each tensor draws from its own stream keyed by the
/// parameter name, so adding or removing a module never perturbs the
/// initial values of the others.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    /// Fan-in scaled normal, `std = sqrt(2 / fan_in)`.
    pub fn he_normal(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        Tensor::randn(shape, std, &mut rng::derive_named(self.seed, name))
    }
}

/// Convolution weight/bias pair with fixed stride and `k/2` padding.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn register(
        params: &mut ParamSet,
        init: Init,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let shape = [out_c, in_c, kernel, kernel];
        let weight = params.add(
            &wname,
            init.he_normal(&wname, &shape, in_c * kernel * kernel),
        )?;
        let bias = params.add(&format!("{name}.bias"), Tensor::zeros(&[out_c]))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        nn::conv2d(x, &p[self.weight], &p[self.bias], self.stride, self.padding)
    }
}

/// Single-group normalization with per-channel scale and shift.
#[derive(Clone, Debug)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormLayer {
    pub fn register(params: &mut ParamSet, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: params.add(&format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: params.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        nn::group_norm(x, &p[self.gamma], &p[self.beta])
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn register(
        params: &mut ParamSet,
        init: Init,
        name: &str,
        n_in: usize,
        n_out: usize,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let weight = params.add(&wname, init.he_normal(&wname, &[n_out, n_in], n_in))?;
        let bias = params.add(&format!("{name}.bias"), Tensor::zeros(&[n_out]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        nn::dense(x, &p[self.weight], &p[self.bias])
    }
}

/// Convolution, normalization, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: ConvLayer,
    pub norm: NormLayer,
}

impl ConvBlock {
    pub fn register(
        params: &mut ParamSet,
        init: Init,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: ConvLayer::register(
                params,
                init,
                &format!("{name}.conv"),
                in_c,
                out_c,
                kernel,
                stride,
            )?,
            norm: NormLayer::register(params, &format!("{name}.norm"), out_c)?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        self.norm.forward(p, &self.conv.forward(p, x)?)?.relu()
    }
}
