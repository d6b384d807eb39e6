use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
///
/// After each training batch, `running = (1 - momentum)·running + momentum·batch`.
/// The first batch initializes the statistics directly.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Option<Tensor>,
    pub var: Option<Tensor>,
    pub momentum: f32,
    pub epsilon: f32,
}

impl Default for RunningStats {
    fn default() -> Self {
        RunningStats { mean: None, var: None, momentum: BN_MOMENTUM, epsilon: BN_EPSILON }
    }
}

impl RunningStats {
    /// Mean 0, variance 1: eval mode passes inputs through (up to ε) until trained.
    pub fn identity(channels: usize) -> Self {
        RunningStats { mean: Some(Tensor::zeros(&[channels])), var: Some(Tensor::ones(&[channels])), ..Default::default() }
    }

    pub fn is_initialized(&self) -> bool {
        self.mean.is_some() && self.var.is_some()
    }

    fn update(&mut self, mean: &[f32], var: &[f32]) -> Result<()> {
        let m = self.momentum;
        let blend = |old: &Option<Tensor>, new: &[f32]| -> Result<Tensor> {
            let data = match old {
                Some(t) => t.data().iter().zip(new).map(|(o, n)| (1.0 - m) * o + m * n).collect(),
                None => new.to_vec(),
            };
            Tensor::new(&[new.len()], data)
        };
        self.mean = Some(blend(&self.mean, mean)?);
        self.var = Some(blend(&self.var, var)?);
        Ok(())
    }
}

/// (batch, channels, spatial size) of an N×C×… tensor.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!("batchnorm wants at least N×C input, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl Graph {
    /// Batch normalization over every axis except the channel axis (axis 1).
    ///
    /// Train mode normalizes with biased batch statistics and folds them into
    /// `stats`; eval mode uses `stats` and fails if they were never set.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (n, c, spatial) = layout(&shape)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "batchnorm gamma {:?} / beta {:?} for input {shape:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = stats.epsilon;
        let x = self.value(input).data();
        let count = (n * spatial) as f32;

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let vals = || (0..n).flat_map(move |b| x[(b * c + ch) * spatial..][..spatial].iter());
                    let mu = (vals().map(|&v| v as f64).sum::<f64>() / count as f64) as f32;
                    let sq = vals().map(|&v| ((v - mu) as f64).powi(2)).sum::<f64>();
                    mean[ch] = mu;
                    var[ch] = (sq / count as f64) as f32;
                }
                (mean, var)
            }
            Mode::Eval => match (&stats.mean, &stats.var) {
                (Some(m), Some(v)) => (m.data().to_vec(), v.data().to_vec()),
                _ => return Err(Error::State("batchnorm eval with uninitialized running stats".into())),
            },
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0f32; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    out[i] = gm[ch] * (x[i] - mean[ch]) * inv_std[ch] + bt[ch];
                }
            }
        }
        let value = Tensor::from_parts(shape, out, "batchnorm")?;
        if mode == Mode::Train {
            stats.update(&mean, &var)?;
        }

        Ok(self.push(
            value,
            vec![input, gamma, beta],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let gm = ctx.inputs[1].data();
                let g = ctx.grad;
                let mut dx = vec![0.0f32; x.len()];
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for ch in 0..c {
                    let idx = || (0..n).flat_map(move |b| {
                        let off = (b * c + ch) * spatial;
                        off..off + spatial
                    });
                    let xhat = |i: usize| (x[i] - mean[ch]) * inv_std[ch];
                    let mut sum_g = 0.0f64;
                    let mut sum_g_xhat = 0.0f64;
                    for i in idx() {
                        sum_g += g[i] as f64;
                        sum_g_xhat += (g[i] * xhat(i)) as f64;
                    }
                    dgamma[ch] = sum_g_xhat as f32;
                    dbeta[ch] = sum_g as f32;
                    match mode {
                        Mode::Train => {
                            // dx = γ·σ⁻¹·(g − mean(g) − x̂·mean(g·x̂))
                            let mg = (sum_g / count as f64) as f32;
                            let mgx = (sum_g_xhat / count as f64) as f32;
                            for i in idx() {
                                dx[i] = gm[ch] * inv_std[ch] * (g[i] - mg - xhat(i) * mgx);
                            }
                        }
                        Mode::Eval => {
                            for i in idx() {
                                dx[i] = gm[ch] * inv_std[ch] * g[i];
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }
}
