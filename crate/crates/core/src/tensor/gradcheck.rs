use super::{Result, Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function against central
/// differences. Returns the largest
/// `|autodiff − fd| / max(1, |fd|)` over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let out_shape = tape.shape(out)?.to_vec();
    if out_shape.iter().product::<usize>() != 1 {
        return Err(TensorError::NonScalarLoss(out_shape));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false);
        let y = f(&mut t, v)?;
        Ok(t.value(y)?.item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::new(&[2, 3], vec![0.1, -0.4, 2.0, 3.3, -1.0, 0.0]).unwrap();
        let err = grad_check(|t, v| t.sum(v), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_non_scalar_and_bad_eps() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            grad_check(|_, v| Ok(v), &x, 1e-5),
            Err(TensorError::NonScalarLoss(_))
        ));
        assert!(grad_check(|t, v| t.sum(v), &x, 0.0).is_err());
    }
}
