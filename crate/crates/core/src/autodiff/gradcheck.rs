//! Finite-difference gradient checking.
//!
//! The central-difference quotient is the independent oracle used to verify
//! every backward rule: it only ever calls the forward path.

use super::tape::{Tape, Tensor};
use super::value::Value;
use crate::error::{Error, Result};

/// Compare the analytic gradient of a scalar-valued function against central
/// finite differences.
///
/// Returns `max_i |analytic_i - fd_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Value, eps: f32) -> Result<f32>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::config("grad_check: eps must be positive"));
    }
    // analytic gradient
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::shape(format!(
            "grad_check: function output must be scalar, got shape {:?}",
            y.shape()
        )));
    }
    let grads = y.backward()?;
    let analytic = grads
        .wrt(&leaf)
        .ok_or_else(|| Error::config("grad_check: no gradient reached the input"))?
        .to_vec();

    let eval = |v: &Value| -> Result<f32> {
        let t = Tape::new();
        let l = t.leaf(v.clone(), false);
        f(&l)?.scalar()
    };

    let mut max_rel = 0.0f32;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        let xp = orig + eps;
        let xm = orig - eps;
        probe.data[i] = xp;
        let fp = eval(&probe)?;
        probe.data[i] = xm;
        let fm = eval(&probe)?;
        probe.data[i] = orig;
        // divide by the realized f32 step, not the nominal one
        let fd = (fp - fm) / (xp - xm);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let x = Value::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(|t| t.mul(t)?.sum_all(), &x, 1e-3).unwrap();
        assert!(err <= 1e-4, "rel error {err}");
    }

    #[test]
    fn linear_function_is_exact() {
        // central differences of a linear map are exact for any step, so a
        // large eps keeps f32 rounding noise out of the quotient
        let x = Value::new(vec![4], vec![0.3, -1.2, 0.8, 2.0]).unwrap();
        let err = grad_check(|t| t.sum_all(), &x, 0.25).unwrap();
        assert!(err <= 1e-6, "rel error {err}");
    }

    #[test]
    fn non_scalar_output_is_error() {
        let x = Value::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|t| t.mul(t), &x, 1e-3).is_err());
    }
}
