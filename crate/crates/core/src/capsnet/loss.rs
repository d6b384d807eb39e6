use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const MARGIN_POSITIVE: f32 = 0.9;
pub const MARGIN_NEGATIVE: f32 = 0.1;
pub const DOWN_WEIGHT: f32 = 0.5;

/// Whole-training-set class counts behind the imbalance-weighted loss.
///
/// The COVID term is weighted by `N⁻/(N⁺+N⁻)` and the non-COVID term by
/// `N⁺/(N⁺+N⁻)`, so the rarer class receives the larger weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassWeights {
    pub n_pos: usize,
    pub n_neg: usize,
}

impl ClassWeights {
    pub fn new(n_pos: usize, n_neg: usize) -> Result<Self> {
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::usage(format!(
                "class weights need both classes present (N⁺={n_pos}, N⁻={n_neg})"
            )));
        }
        Ok(ClassWeights { n_pos, n_neg })
    }

    pub fn from_labels(labels: &[bool]) -> Result<Self> {
        let pos = labels.iter().filter(|&&l| l).count();
        Self::new(pos, labels.len() - pos)
    }

    /// Weight on the COVID (positive) loss term.
    pub fn positive_weight(&self) -> f64 {
        self.n_neg as f64 / (self.n_pos + self.n_neg) as f64
    }

    /// Weight on the non-COVID (negative) loss term.
    pub fn negative_weight(&self) -> f64 {
        self.n_pos as f64 / (self.n_pos + self.n_neg) as f64
    }

    /// `w⁻·loss⁻ + w⁺·loss⁺`; a missing class term contributes nothing.
    pub fn combine(&self, loss_pos: Option<f64>, loss_neg: Option<f64>) -> f64 {
        self.positive_weight() * loss_pos.unwrap_or(0.0) + self.negative_weight() * loss_neg.unwrap_or(0.0)
    }
}

/// Margin loss of one sample given its class-capsule norms and one-hot target.
pub fn margin_loss_value(norms: &[f32], target: &[f32]) -> Result<f32> {
    check_one_hot(target, norms.len())?;
    Ok(norms
        .iter()
        .zip(target)
        .map(|(&n, &t)| {
            let present = (MARGIN_POSITIVE - n).max(0.0);
            let absent = (n - MARGIN_NEGATIVE).max(0.0);
            t * present * present + DOWN_WEIGHT * (1.0 - t) * absent * absent
        })
        .sum())
}

fn check_one_hot(target: &[f32], classes: usize) -> Result<()> {
    let ones = target.iter().filter(|&&t| t == 1.0).count();
    let zeros = target.iter().filter(|&&t| t == 0.0).count();
    if target.len() != classes || ones != 1 || ones + zeros != classes {
        return Err(Error::usage(format!("target {target:?} is not one-hot over {classes} classes")));
    }
    Ok(())
}

impl Graph {
    /// Per-sample margin loss from B×K capsule norms and B×K one-hot targets.
    /// Returns a length-B vector.
    pub fn margin_loss(&mut self, norms: Var, targets: &[f32]) -> Result<Var> {
        let shape = self.shape(norms).to_vec();
        let [b, k] = match *shape.as_slice() {
            [b, k] => [b, k],
            _ => return Err(Error::dim(format!("margin_loss wants B×K norms, got {shape:?}"))),
        };
        if targets.len() != b * k {
            return Err(Error::dim(format!("margin_loss: {} targets for norms {shape:?}", targets.len())));
        }
        let n = self.value(norms).data();
        let mut losses = Vec::with_capacity(b);
        for (row, t) in n.chunks(k).zip(targets.chunks(k)) {
            losses.push(margin_loss_value(row, t)?);
        }
        let value = Tensor::from_parts(vec![b], losses, "margin_loss")?;
        let targets = targets.to_vec();
        Ok(self.push(
            value,
            vec![norms],
            Box::new(move |ctx| {
                let n = ctx.inputs[0].data();
                let d = n
                    .iter()
                    .zip(&targets)
                    .enumerate()
                    .map(|(idx, (&v, &t))| {
                        let present = (MARGIN_POSITIVE - v).max(0.0);
                        let absent = (v - MARGIN_NEGATIVE).max(0.0);
                        ctx.grad[idx / k] * (-2.0 * t * present + 2.0 * DOWN_WEIGHT * (1.0 - t) * absent)
                    })
                    .collect();
                vec![Some(d)]
            }),
        ))
    }

    /// Class-weighted combination of per-sample losses: `loss⁺` and `loss⁻`
    /// are the means over the batch's COVID and non-COVID samples.
    pub fn weighted_class_loss(&mut self, losses: Var, is_covid: &[bool], weights: &ClassWeights) -> Result<Var> {
        if is_covid.is_empty() {
            return Err(Error::usage("weighted loss over an empty batch"));
        }
        if self.shape(losses) != [is_covid.len()] {
            return Err(Error::dim(format!(
                "weighted loss: losses {:?} for {} labels",
                self.shape(losses),
                is_covid.len()
            )));
        }
        let pos = is_covid.iter().filter(|&&c| c).count();
        let neg = is_covid.len() - pos;
        let coefficients = is_covid
            .iter()
            .map(|&c| {
                if c {
                    (weights.positive_weight() / pos as f64) as f32
                } else {
                    (weights.negative_weight() / neg as f64) as f32
                }
            })
            .collect();
        self.weighted_sum(losses, coefficients)
    }
}
