//! Central finite-difference validation of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences, returning the largest relative error over all coordinates of
/// `x`:
///
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`
///
/// `f` receives a fresh tape and the variable holding `x` and must return a
/// scalar node.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param("x", x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let o = f(&mut t, v)?;
        let value = t.value(o);
        if !value.is_scalar() {
            return Err(Error::Contract("function output is not scalar".into()));
        }
        let y = value.data()[0];
        if !y.is_finite() {
            return Err(Error::Numeric(format!("function value {y} is not finite")));
        }
        Ok(y)
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
