use rand::Rng;

use crate::tensor::{Param, Result, Tape, Tensor, TensorError, Var};

/// Anything that owns named parameters.
pub trait Parameterized {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value().len());
        n
    }
}

/// `y = x·W + b` with `W: [C_in×C_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / (c_in + c_out) as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::randn(&[c_in, c_out], std, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    /// Zero weight and bias.
    pub fn zeros(name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[c_in, c_out])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

impl Parameterized for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNormParams {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[width])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        layernorm_forward(tape, x, g, b)
    }
}

impl Parameterized for LayerNormParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Per-vector standardisation over the last dimension (eps = 1e-5), then
/// `gamma ⊙ x̂ + beta`.
pub fn layernorm_forward(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    tape.layer_norm(x, gamma, beta)
}

/// Inverted dropout. In training mode each element is zeroed with
/// probability `p` and survivors are scaled by `1/(1-p)`; otherwise identity.
pub fn dropout_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::Invalid(format!(
            "dropout probability must lie in [0, 1), got {p}"
        )));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let n = tape.value(x)?.len();
    let keep = 1.0 / (1.0 - p);
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.mask_mul(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layernorm_constant_vector_maps_to_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 6], 3.7));
        let g = tape.constant(Tensor::ones(&[6]));
        let b = tape.constant(Tensor::zeros(&[6]));
        let y = layernorm_forward(&mut tape, x, g, b).unwrap();
        assert!(tape.value(y).unwrap().data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layernorm_two_point_closed_form() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = layernorm_forward(&mut tape, x, g, b).unwrap();
        // variance 1, so the eps correction is 1/sqrt(1 + 1e-5)
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        let v = tape.value(y).unwrap().data().to_vec();
        assert!((v[0] + want).abs() < 1e-15 && (v[1] - want).abs() < 1e-15);
    }

    #[test]
    fn layernorm_output_is_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[4, 64], 20.0, &mut rng));
        let g = tape.constant(Tensor::ones(&[64]));
        let b = tape.constant(Tensor::zeros(&[64]));
        let y = layernorm_forward(&mut tape, x, g, b).unwrap();
        for row in tape.value(y).unwrap().data().chunks(64) {
            let mean = row.iter().sum::<f64>() / 64.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_identity_cases_and_bad_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[3, 3], 1.0, &mut rng));
        assert_eq!(dropout_forward(&mut tape, x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout_forward(&mut tape, x, 0.7, false, &mut rng).unwrap(), x);
        assert!(dropout_forward(&mut tape, x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_monte_carlo_expectation() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, n]));
        let y = dropout_forward(&mut tape, x, 0.5, true, &mut rng).unwrap();
        let out = tape.value(y).unwrap();
        let survivors = out.data().iter().filter(|v| **v != 0.0).count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((survivors - 0.5 * n as f64).abs() < 3.0 * sigma);
        let mean = out.sum() / n as f64;
        assert!((mean - 1.0).abs() < 0.02);
    }
}
