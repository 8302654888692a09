//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One update `p ← p − lr · m̂ / (√v̂ + ε)`.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for (&id, g) in ids.iter().zip(grads) {
        if params.get(id).shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: params.get(id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, (&id, g)) in ids.iter().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            p[i] -= cfg.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::vector(vec![value])).unwrap();
        ps
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = one(0.5);
        let mut st = AdamState::new(&ps);
        let cfg = AdamConfig::default();
        adam_step(&mut ps, &[Tensor::vector(vec![1.0])], &mut st, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((ps.get(ps.id("w").unwrap()).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut ps = one(0.25);
        let mut st = AdamState::new(&ps);
        for _ in 0..3 {
            adam_step(
                &mut ps,
                &[Tensor::zeros(&[1])],
                &mut st,
                &AdamConfig::default(),
            )
            .unwrap();
        }
        assert_eq!(ps.by_name("w").unwrap().data(), &[0.25]);
        assert_eq!(st.m[0].data(), &[0.0]);
        assert_eq!(st.v[0].data(), &[0.0]);
    }

    #[test]
    fn trajectories_repeat_bitwise() {
        let run = || {
            let mut ps = one(1.0);
            let mut st = AdamState::new(&ps);
            for k in 0..20 {
                let g = Tensor::vector(vec![(k as f64 * 0.37).sin()]);
                adam_step(&mut ps, &[g], &mut st, &AdamConfig::default()).unwrap();
            }
            (ps, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut ps = one(1.0);
        let mut st = AdamState::new(&ps);
        assert!(adam_step(
            &mut ps,
            &[Tensor::zeros(&[2])],
            &mut st,
            &AdamConfig::default()
        )
        .is_err());
        assert!(adam_step(&mut ps, &[], &mut st, &AdamConfig::default()).is_err());
        assert_eq!(st.step, 0);
    }
}
