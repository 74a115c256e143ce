//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::tape::{GradTape, VarId};
use crate::numerics::tensor::Tensor;

/// Compare the tape gradient of a scalar function against central
/// differences. Returns the max over coordinates of
/// |analytic − numeric| / (|numeric| + 1e−12).
///
/// `f` must record the same computation every call; any sampling inside it
/// has to be driven by fixed noise so perturbed evaluations stay on the same
/// branch.
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut GradTape, VarId) -> Result<VarId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }

    let eval = |f: &mut F, data: &[f64]| -> Result<f64> {
        let mut tape = GradTape::new();
        let xv = tape.param(data, x.shape());
        let loss = f(&mut tape, xv)?;
        if tape.len_of(loss) != 1 {
            return Err(Error::Shape("grad_check expects a scalar function".into()));
        }
        let v = tape.scalar_value(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = GradTape::new();
    let xv = tape.param(x.data(), x.shape());
    let loss = f(&mut tape, xv)?;
    if !tape.scalar_value(loss).is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    tape.backward(loss)?;
    let analytic = tape.grad_or_zeros(xv);

    // Numeric pass, one coordinate at a time.
    let mut worst: f64 = 0.0;
    let mut data = x.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + eps;
        let up = eval(&mut f, &data)?;
        data[i] = orig - eps;
        let down = eval(&mut f, &data)?;
        data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
