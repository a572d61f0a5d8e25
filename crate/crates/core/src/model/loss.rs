//! Losses on predicted class probabilities.
//!
//! All three return the loss value together with its gradient with respect to
//! the probability vector; the network chains that through its output softmax.

use crate::error::{Error, Result};

/// Lower clamp on the true-class probability inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    /// Weights of the cross-entropy and absolute-error terms.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0;
        if !ok || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "loss weights need alpha, beta >= 0 and alpha + beta > 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn ce_only() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// d(loss)/d(probabilities).
    pub grad: Vec<f64>,
}

fn check_probabilities(f: &[f64], y: usize) -> Result<()> {
    if y >= f.len() {
        return Err(Error::Numeric(format!(
            "label {y} out of range for {} classes",
            f.len()
        )));
    }
    let sum: f64 = f.iter().sum();
    if f.iter().any(|p| !(*p >= 0.0 && *p <= 1.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Numeric(format!("not a probability vector: {f:?}")));
    }
    Ok(())
}

/// `||e_y - f||_1`, with gradient `-sign(e_y - f)` (sign(0) = 0).
pub fn mae_loss(f: &[f64], y: usize) -> Result<LossValue> {
    check_probabilities(f, y)?;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(f.len());
    for (j, &p) in f.iter().enumerate() {
        let target = if j == y { 1.0 } else { 0.0 };
        let diff: f64 = target - p;
        value += diff.abs();
        grad.push(if diff > 0.0 {
            -1.0
        } else if diff < 0.0 {
            1.0
        } else {
            0.0
        });
    }
    Ok(LossValue { value, grad })
}

/// `-ln f_y` with `f_y` clamped below at [`PROB_FLOOR`]; gradient `-1/f_y` at `y`.
pub fn ce_loss(f: &[f64], y: usize) -> Result<LossValue> {
    check_probabilities(f, y)?;
    let p = f[y].max(PROB_FLOOR);
    let mut grad = vec![0.0; f.len()];
    grad[y] = -1.0 / p;
    Ok(LossValue {
        value: -p.ln(),
        grad,
    })
}

pub fn combined_loss(f: &[f64], y: usize, w: LossWeights) -> Result<LossValue> {
    w.validate()?;
    let ce = ce_loss(f, y)?;
    let mae = mae_loss(f, y)?;
    let grad = ce
        .grad
        .iter()
        .zip(&mae.grad)
        .map(|(c, m)| w.alpha * c + w.beta * m)
        .collect();
    Ok(LossValue {
        value: w.alpha * ce.value + w.beta * mae.value,
        grad,
    })
}
