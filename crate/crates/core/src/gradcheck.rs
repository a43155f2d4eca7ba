//! Central finite differences for checking tape gradients.

use crate::error::Result;
use crate::numerics::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(|a| + |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Numerical gradient of `f` with respect to every element of every input,
/// using `(f(x + h) - f(x - h)) / 2h`.
pub fn numerical_gradient<F>(mut f: F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for slot in 0..inputs.len() {
        let mut g = vec![0.0; inputs[slot].numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[slot].data()[i];
            work[slot].data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work[slot].data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work[slot].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.iter().zip(n).map(|(x, y)| relative_error(*x, *y)))
        .fold(0.0, f64::max)
}
