use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{ensure, numeric, Result};

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients of the scalar function `f` at `x`.
///
/// Per coordinate the error is `|analytic - numeric| / max(1, |analytic|)`
/// with `numeric = (f(x + h e) - f(x - h e)) / 2h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    ensure!(h > 0.0 && h <= 1e-3, "grad_check step {} outside (0, 1e-3]", h);

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    ensure!(
        tape.value(y).numel() == 1,
        "grad_check needs a scalar function, got shape {:?}",
        tape.shape(y)
    );
    tape.backward(y)?;
    let analytic = tape.grad(xv);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let out = f(&mut t, v)?;
        let value = t.value(out).item();
        if value.is_finite() {
            Ok(value)
        } else {
            Err(numeric(format!("function is not finite at a probe point: {value}")))
        }
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{with_gradient_fault, OpKind};

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let err = grad_check(|t, v| t.mul(v, v), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linear_is_exact_for_any_step() {
        // at the origin the difference quotient carries no cancellation error
        let x = Tensor::zeros(&[3]);
        for h in [1e-3, 1e-4, 1e-6] {
            let err = grad_check(
                |t, v| {
                    let s = t.scale(v, 2.5);
                    Ok(t.sum_all(s))
                },
                &x,
                h,
            )
            .unwrap();
            assert!(err < 1e-10, "h={h}: {err}");
        }
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|_, v| Ok(v), &x, 0.0).is_err());
        assert!(grad_check(|_, v| Ok(v), &x, 1e-2).is_err());
    }

    #[test]
    fn non_finite_probe_is_numeric_error() {
        // finite at x, overflows at x + h
        let x = Tensor::scalar(709.78271);
        let r = grad_check(
            |t, v| {
                let e = t.exp(v);
                Ok(t.sum_all(e))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(crate::Error::Numeric(_))), "{r:?}");
    }

    #[test]
    fn detects_injected_fault() {
        let x = Tensor::from_vec(vec![0.1, 0.2]);
        let f = |t: &mut Tape, v: Var| {
            let y = t.tanh(v);
            Ok(t.sum_all(y))
        };
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-8);
        let err = with_gradient_fault(OpKind::Tanh, 1.01, || grad_check(f, &x, 1e-5).unwrap());
        assert!(err > 1e-3);
    }
}
