use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Adam with bias correction. One moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    step_count: u64,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
}

impl AdamState {
    /// Zero-initialized state for parameters with the given shapes.
    pub fn new<'a>(lr: f32, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Vec<f32>> = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            second_moment: zeros.clone(),
            first_moment: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite
    /// or any shape disagrees.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f32]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "adam: state for {} tensors, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[i].len() {
                return Err(Error::dim(format!(
                    "adam: parameter {i} has {} values, gradient {}",
                    p.len(),
                    g.len()
                )));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Optimizer(format!(
                    "non-finite gradient at parameter {i}, element {j}; step refused"
                )));
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (k, value) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *value -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
