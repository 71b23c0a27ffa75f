use std::collections::HashMap;

use crate::adapt::ParameterRegistry;
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::tensor::Tensor;

/// Adam moments for every learnable tensor, keyed by name.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: HashMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every tensor in `model` for which
/// `learnable` holds. Every such tensor needs a gradient in `grads`; all
/// other tensors are left untouched.
pub fn adam_update<P: Parameterized + ?Sized>(
    model: &mut P,
    learnable: &dyn Fn(&str) -> bool,
    grads: &[(String, Tensor)],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let by_name: HashMap<&str, &Tensor> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
    let mut missing = None;
    model.visit(&mut |p| {
        if missing.is_none() && learnable(p.name()) && !by_name.contains_key(p.name()) {
            missing = Some(p.name().to_string());
        }
    });
    if let Some(name) = missing {
        return Err(Error::MissingGradient(name));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut shape_error = None;
    model.visit_mut(&mut |p| {
        if !learnable(p.name()) || shape_error.is_some() {
            return;
        }
        let g = by_name[p.name()];
        if g.shape() != p.value().shape() {
            shape_error = Some(p.name().to_string());
            return;
        }
        let n = g.len();
        let (m, v) = state
            .moments
            .entry(p.name().to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let w = p.value_mut().data_mut();
        for i in 0..n {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            w[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    });
    match shape_error {
        Some(name) => Err(Error::CheckpointEntry {
            name,
            reason: "gradient shape differs from the tensor".into(),
        }),
        None => Ok(()),
    }
}

/// [`adam_update`] restricted to the registry's learnable entries.
pub fn adam_step<P: Parameterized + ?Sized>(
    model: &mut P,
    registry: &ParameterRegistry,
    grads: &[(String, Tensor)],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let names = registry.learnable_names();
    adam_update(model, &|n| names.contains(n), grads, state, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Param;

    struct One(Param);

    impl Parameterized for One {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
            f(&self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = One(Param::new("w", Tensor::scalar(1.0)));
        let mut st = AdamState::default();
        adam_update(&mut m, &|_| true, &[("w".into(), Tensor::scalar(1.0))], &mut st, 0.1).unwrap();
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((m.0.value().item() - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut m = One(Param::new("w", Tensor::full(&[3], 0.7)));
        let mut st = AdamState::default();
        for _ in 0..5 {
            adam_update(&mut m, &|_| true, &[("w".into(), Tensor::zeros(&[3]))], &mut st, 0.1).unwrap();
        }
        assert!(m.0.value().bit_eq(&Tensor::full(&[3], 0.7)));
    }

    #[test]
    fn missing_gradient_and_frozen_entries() {
        let mut m = One(Param::new("w", Tensor::scalar(1.0)));
        let mut st = AdamState::default();
        assert!(matches!(
            adam_update(&mut m, &|_| true, &[], &mut st, 0.1),
            Err(Error::MissingGradient(n)) if n == "w"
        ));
        adam_update(&mut m, &|_| false, &[], &mut st, 0.1).unwrap();
        assert_eq!(m.0.value().item(), 1.0);
    }
}
