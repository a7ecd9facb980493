use crate::encoder::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam with per-tensor moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        let zeros = |prefix: &str| {
            params
                .iter()
                .map(|t| Tensor::zeros(format!("{prefix}.{}", t.name), t.shape.clone()))
                .collect()
        };
        Self { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, m: zeros("adam.m"), v: zeros("adam.v") }
    }

    /// One update. Fails without touching anything if a gradient is
    /// non-finite or shapes disagree.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.data.len() != g.data.len() || p.data.len() != m.data.len() {
                return Err(Error::Shape(format!("adam: size mismatch for tensor `{}`", p.name)));
            }
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient in tensor `{}`", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
