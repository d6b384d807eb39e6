use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Guards the capsule norm at the origin.
pub const NORM_EPSILON: f64 = 1e-8;

/// Scale factor `f(q) = q / ((1 + q)·√(q + ε))` applied to a capsule with squared norm `q`,
/// and its derivative with respect to `q`.
fn squash_factor(q: f64) -> (f64, f64) {
    let r = (q + NORM_EPSILON).sqrt();
    let f = q / ((1.0 + q) * r);
    let df = (q + 2.0 * NORM_EPSILON - q * q) / (2.0 * r * r * r * (1.0 + q) * (1.0 + q));
    (f, df)
}

/// Squashes consecutive rows of length `dim`.
pub(crate) fn squash_rows(x: &[f32], dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(dim) {
        let q: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum();
        let (f, _) = squash_factor(q);
        out.extend(row.iter().map(|&v| (v as f64 * f) as f32));
    }
    out
}

/// Euclidean norm of each row, with the same guard as `squash`.
pub(crate) fn row_norms(x: &[f32], dim: usize) -> Vec<f32> {
    x.chunks(dim)
        .map(|row| {
            let q: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum();
            (q + NORM_EPSILON).sqrt() as f32
        })
        .collect()
}

impl Graph {
    /// `v = (‖s‖² / (1 + ‖s‖²)) · s / ‖s‖` over the last axis.
    pub fn squash(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let dim = *shape.last().ok_or_else(|| Error::dim("squash on rank-0 tensor"))?;
        let data = squash_rows(self.value(input).data(), dim);
        let value = Tensor::from_parts(shape, data, "squash")?;
        Ok(self.push(
            value,
            vec![input],
            Box::new(move |ctx| {
                let mut dx = Vec::with_capacity(ctx.grad.len());
                for (s, g) in ctx.inputs[0].data().chunks(dim).zip(ctx.grad.chunks(dim)) {
                    let q: f64 = s.iter().map(|&v| (v as f64).powi(2)).sum();
                    let (f, df) = squash_factor(q);
                    let gs: f64 = s.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum();
                    dx.extend(
                        s.iter()
                            .zip(g)
                            .map(|(&sv, &gv)| (f * gv as f64 + 2.0 * df * gs * sv as f64) as f32),
                    );
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Norm of each capsule (last axis), dropping that axis.
    pub fn capsule_norm(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("capsule_norm wants rank ≥ 2, got {shape:?}")));
        }
        let dim = shape[shape.len() - 1];
        let norms = row_norms(self.value(input).data(), dim);
        let value = Tensor::from_parts(shape[..shape.len() - 1].to_vec(), norms, "capsule_norm")?;
        Ok(self.push(
            value,
            vec![input],
            Box::new(move |ctx| {
                let mut dx = Vec::with_capacity(ctx.inputs[0].len());
                for ((s, &n), &g) in ctx.inputs[0].data().chunks(dim).zip(ctx.output.data()).zip(ctx.grad) {
                    dx.extend(s.iter().map(|&v| g * v / n));
                }
                vec![Some(dx)]
            }),
        ))
    }
}
