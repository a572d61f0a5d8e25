use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are laid out in the same order
/// as the parameter list passed to [`AdamState::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        Self {
            step: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &[&Tensor], lr: f64) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        Self::new(&sizes, lr)
    }

    /// One update using each parameter's gradient slot. A parameter without a
    /// gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "adam: {} parameter tensors for {} moment buffers",
                params.len(),
                self.first_moment.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.first_moment) {
            if p.numel() != m.len() {
                return Err(Error::Shape(format!(
                    "adam: parameter of shape {:?} for a moment buffer of length {}",
                    p.shape(),
                    m.len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let correction1 = 1.0 - self.beta1.powf(t);
        let correction2 = 1.0 - self.beta2.powf(t);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let Some(grad) = p.grad.take() else { continue };
            for (((w, &g), mi), vi) in p
                .data
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / correction1;
                let v_hat = *vi / correction2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
