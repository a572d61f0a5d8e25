use crate::error::{Error, Result};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let plus = f(&probe);
        probe[i] = params[i] - step;
        let minus = f(&probe);
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite objective while probing coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Largest relative disagreement between `analytic` and central differences
/// of `f` at `params`, measured as `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check(
    f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<f64> {
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "grad_check: {} analytic components for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let numeric = numeric_gradient(f, params, step)?;
    Ok(relative_error(analytic, &numeric))
}

pub(crate) fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / 1e-8f64.max(a.abs() + n.abs()))
        .fold(0.0, f64::max)
}
