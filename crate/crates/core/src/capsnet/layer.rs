use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

use super::routing::{dynamic_routing, Routed};

pub const DEFAULT_ROUTING_ITERATIONS: usize = 3;

/// Shape of a fully connected capsule layer.
///
/// With `share_transform_spatially`, the `in_capsules` inputs are laid out
/// type-major (`type · positions + position`) and all positions of a type use
/// the same transforms, so weights are `capsule_types × out × in_dim × out_dim`.
/// Otherwise every input capsule owns its transforms: `in × out × in_dim × out_dim`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapsuleLayerSpec {
    pub in_capsules: usize,
    pub in_dim: usize,
    pub out_capsules: usize,
    pub out_dim: usize,
    pub routing_iterations: usize,
    pub share_transform_spatially: bool,
    pub capsule_types: usize,
}

impl CapsuleLayerSpec {
    pub fn dense(in_capsules: usize, in_dim: usize, out_capsules: usize, out_dim: usize) -> Self {
        CapsuleLayerSpec {
            in_capsules,
            in_dim,
            out_capsules,
            out_dim,
            routing_iterations: DEFAULT_ROUTING_ITERATIONS,
            share_transform_spatially: false,
            capsule_types: in_capsules,
        }
    }

    pub fn shared(
        capsule_types: usize,
        positions: usize,
        in_dim: usize,
        out_capsules: usize,
        out_dim: usize,
    ) -> Self {
        CapsuleLayerSpec {
            in_capsules: capsule_types * positions,
            in_dim,
            out_capsules,
            out_dim,
            routing_iterations: DEFAULT_ROUTING_ITERATIONS,
            share_transform_spatially: true,
            capsule_types,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.in_capsules, self.in_dim, self.out_capsules, self.out_dim, self.capsule_types];
        if dims.contains(&0) {
            return Err(Error::usage(format!("capsule layer dims must be ≥ 1: {self:?}")));
        }
        if self.routing_iterations < 1 {
            return Err(Error::usage("routing_iterations must be ≥ 1"));
        }
        if self.share_transform_spatially && !self.in_capsules.is_multiple_of(self.capsule_types) {
            return Err(Error::usage(format!(
                "{} input capsules do not split into {} types",
                self.in_capsules, self.capsule_types
            )));
        }
        Ok(())
    }

    /// Number of distinct transform groups.
    pub fn transform_groups(&self) -> usize {
        if self.share_transform_spatially {
            self.capsule_types
        } else {
            self.in_capsules
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.transform_groups(), self.out_capsules, self.in_dim, self.out_dim]
    }

    pub fn parameter_count(&self) -> usize {
        self.weight_shape().iter().product()
    }
}

impl Graph {
    /// Prediction vectors `û[b,i,j,:] = u[b,i,:] · W[group(i), j]`, where
    /// input capsule `i` uses transform group `i / (I / groups)`.
    pub fn capsule_predictions(&mut self, input: Var, weights: Var) -> Result<Var> {
        let (us, ws) = (self.shape(input).to_vec(), self.shape(weights).to_vec());
        let ([b, i, din], [k, j, wdin, dout]) = match (us.as_slice(), ws.as_slice()) {
            (&[b, i, din], &[k, j, wdin, dout]) => ([b, i, din], [k, j, wdin, dout]),
            _ => {
                return Err(Error::dim(format!(
                    "capsule_predictions wants B×I×Din input and K×J×Din×Dout weights, got {us:?} and {ws:?}"
                )))
            }
        };
        if din != wdin || i % k != 0 {
            return Err(Error::dim(format!(
                "capsule_predictions input {us:?} does not fit weights {ws:?}"
            )));
        }
        let per_group = i / k;
        let (u, w) = (self.value(input).data(), self.value(weights).data());
        let mut out = vec![0.0f32; b * i * j * dout];
        for bb in 0..b {
            for ii in 0..i {
                let group = ii / per_group;
                let ui = &u[(bb * i + ii) * din..][..din];
                for jj in 0..j {
                    let dst = &mut out[((bb * i + ii) * j + jj) * dout..][..dout];
                    let wm = &w[(group * j + jj) * din * dout..][..din * dout];
                    for (p, &uv) in ui.iter().enumerate() {
                        dst.iter_mut().zip(&wm[p * dout..][..dout]).for_each(|(o, wv)| *o += uv * wv);
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![b, i, j, dout], out, "capsule_predictions")?;
        Ok(self.push(
            value,
            vec![input, weights],
            Box::new(move |ctx| {
                let (u, w, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
                let mut du = vec![0.0f32; u.len()];
                let mut dw = vec![0.0f32; w.len()];
                for bb in 0..b {
                    for ii in 0..i {
                        let group = ii / per_group;
                        let ui = &u[(bb * i + ii) * din..][..din];
                        for jj in 0..j {
                            let go = &g[((bb * i + ii) * j + jj) * dout..][..dout];
                            let base = (group * j + jj) * din * dout;
                            for p in 0..din {
                                let row = base + p * dout;
                                let wm = &w[row..][..dout];
                                du[(bb * i + ii) * din + p] += go.iter().zip(wm).map(|(x, y)| x * y).sum::<f32>();
                                dw[row..][..dout].iter_mut().zip(go).for_each(|(o, gv)| *o += ui[p] * gv);
                            }
                        }
                    }
                }
                vec![Some(du), Some(dw)]
            }),
        ))
    }
}

/// Capsule layer on the tape: predictions, then routing.
/// `input` is B×in_capsules×in_dim, the result B×out_capsules×out_dim.
pub fn capsule_layer_forward(g: &mut Graph, input: Var, spec: &CapsuleLayerSpec, weights: Var) -> Result<Routed> {
    spec.validate()?;
    let shape = g.shape(input);
    if shape.len() != 3 || shape[1] != spec.in_capsules || shape[2] != spec.in_dim {
        return Err(Error::dim(format!(
            "capsule layer expects B×{}×{} input, got {shape:?}",
            spec.in_capsules, spec.in_dim
        )));
    }
    if g.shape(weights) != spec.weight_shape() {
        return Err(Error::dim(format!(
            "capsule layer weights {:?}, expected {:?}",
            g.shape(weights),
            spec.weight_shape()
        )));
    }
    let predictions = g.capsule_predictions(input, weights)?;
    dynamic_routing(g, predictions, spec.routing_iterations)
}
