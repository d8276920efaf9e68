use super::{NnError, Params, Result};

/// Bias-corrected Adam. Moment buffers are allocated on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

/// Cosine annealing from `start` at epoch 1 to `end` at epoch `epochs`.
pub fn cosine_lr(start: f64, end: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return start;
    }
    let progress = (epoch.clamp(1, epochs) - 1) as f64 / (epochs - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * progress).cos())
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update. Non-finite gradients abort before any parameter changes.
    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads = grads.params();
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(NnError::NonFiniteGradient(i));
        }
        let mut params = params.params_mut();
        if params.len() != grads.len() {
            return Err(NnError::ParamMismatch {
                expected: params.len(),
                found: grads.len(),
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(NnError::ParamMismatch {
                expected: self.m.len(),
                found: params.len(),
            });
        }
        for (index, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.len() != self.m[index].len() || g.len() != p.len() {
                return Err(NnError::TensorSize {
                    index,
                    expected: self.m[index].len(),
                    found: p.len().min(g.len()),
                });
            }
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(&grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
