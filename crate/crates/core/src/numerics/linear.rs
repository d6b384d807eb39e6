use crate::error::{Error, Result};

use super::gemm::gemm;
use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// (outer, axis length, inner) strides for reducing along `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along one axis of a flat buffer.
pub(crate) fn softmax_kernel(x: &[f32], outer: usize, len: usize, inner: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                y[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                y[at(k)] /= total;
            }
        }
    }
    y
}

impl Graph {
    /// Affine map `input·weights + bias` for an N×F input and F×G weights.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weights), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::dim(format!(
                "dense: input {xs:?}, weights {ws:?}, bias {bs:?}"
            )));
        }
        let (n, f, g) = (xs[0], xs[1], ws[1]);
        let b = self.value(bias).data();
        let mut out: Vec<f32> = (0..n).flat_map(|_| b.iter().copied()).collect();
        gemm(n, f, g, self.value(input).data(), false, self.value(weights).data(), false, 1.0, &mut out);
        let value = Tensor::from_parts(vec![n, g], out, "dense")?;
        Ok(self.push(
            value,
            vec![input, weights, bias],
            Box::new(move |ctx| {
                let (x, w, go) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
                let mut dx = vec![0.0f32; n * f];
                gemm(n, g, f, go, false, w, true, 0.0, &mut dx);
                let mut dw = vec![0.0f32; f * g];
                gemm(f, n, g, x, true, go, false, 0.0, &mut dw);
                let mut db = vec![0.0f32; g];
                for row in go.chunks(g) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                vec![Some(dx), Some(dw), Some(db)]
            }),
        ))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_layout(self.shape(input), axis)?;
        let y = softmax_kernel(self.value(input).data(), outer, len, inner);
        let value = Tensor::from_parts(self.shape(input).to_vec(), y, "softmax")?;
        Ok(self.push(
            value,
            vec![input],
            Box::new(move |ctx| {
                let (y, g) = (ctx.output.data(), ctx.grad);
                let mut dx = vec![0.0f32; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f32 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean softmax cross-entropy of N×K logits against class indices.
    /// Every sample counts equally.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::dim(format!(
                "cross-entropy: logits {shape:?} for {} targets",
                targets.len()
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::usage(format!("target class {bad} with only {k} logits")));
        }
        let probs = softmax_kernel(self.value(logits).data(), n, k, 1);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(row, &t)| -(probs[row * k + t].max(f32::MIN_POSITIVE) as f64).ln())
            .sum::<f64>()
            / n as f64;
        let value = Tensor::from_parts(vec![1], vec![loss as f32], "cross-entropy")?;
        let targets = targets.to_vec();
        Ok(self.push(
            value,
            vec![logits],
            Box::new(move |ctx| {
                let scale = ctx.grad[0] / n as f32;
                let mut d = probs.clone();
                for (row, &t) in targets.iter().enumerate() {
                    d[row * k + t] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![Some(d)]
            }),
        ))
    }
}
