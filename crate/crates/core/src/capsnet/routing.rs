use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Output of [`dynamic_routing`].
pub struct Routed {
    /// Squashed output capsules, B×J×D.
    pub output: Var,
    /// Coupling coefficients used by each iteration, each B×I×J.
    pub couplings: Vec<Var>,
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [b, i, j, d] => Ok([b, i, j, d]),
        _ => Err(Error::dim(format!("{what} wants B×I×J×D predictions, got {shape:?}"))),
    }
}

impl Graph {
    /// `s[b,j,:] = Σ_i c[b,i,j] · û[b,i,j,:]`.
    pub fn routing_vote(&mut self, couplings: Var, predictions: Var) -> Result<Var> {
        let [b, i, j, d] = dims4(self.shape(predictions), "routing_vote")?;
        if self.shape(couplings) != [b, i, j] {
            return Err(Error::dim(format!(
                "routing_vote couplings {:?} for predictions {:?}",
                self.shape(couplings),
                self.shape(predictions)
            )));
        }
        let (c, u) = (self.value(couplings).data(), self.value(predictions).data());
        let mut s = vec![0.0f32; b * j * d];
        for bb in 0..b {
            for ii in 0..i {
                for jj in 0..j {
                    let w = c[(bb * i + ii) * j + jj];
                    let src = &u[((bb * i + ii) * j + jj) * d..][..d];
                    let dst = &mut s[(bb * j + jj) * d..][..d];
                    dst.iter_mut().zip(src).for_each(|(o, v)| *o += w * v);
                }
            }
        }
        let value = Tensor::from_parts(vec![b, j, d], s, "routing_vote")?;
        Ok(self.push(
            value,
            vec![couplings, predictions],
            Box::new(move |ctx| {
                let (c, u, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
                let mut dc = vec![0.0f32; c.len()];
                let mut du = vec![0.0f32; u.len()];
                for bb in 0..b {
                    for ii in 0..i {
                        for jj in 0..j {
                            let k = (bb * i + ii) * j + jj;
                            let gj = &g[(bb * j + jj) * d..][..d];
                            let uk = &u[k * d..][..d];
                            dc[k] = gj.iter().zip(uk).map(|(x, y)| x * y).sum();
                            du[k * d..][..d].iter_mut().zip(gj).for_each(|(o, gv)| *o = c[k] * gv);
                        }
                    }
                }
                vec![Some(dc), Some(du)]
            }),
        ))
    }

    /// `a[b,i,j] = û[b,i,j,:] · v[b,j,:]`.
    pub fn routing_agreement(&mut self, predictions: Var, outputs: Var) -> Result<Var> {
        let [b, i, j, d] = dims4(self.shape(predictions), "routing_agreement")?;
        if self.shape(outputs) != [b, j, d] {
            return Err(Error::dim(format!(
                "routing_agreement outputs {:?} for predictions {:?}",
                self.shape(outputs),
                self.shape(predictions)
            )));
        }
        let (u, v) = (self.value(predictions).data(), self.value(outputs).data());
        let mut a = vec![0.0f32; b * i * j];
        for bb in 0..b {
            for ii in 0..i {
                for jj in 0..j {
                    let k = (bb * i + ii) * j + jj;
                    let vj = &v[(bb * j + jj) * d..][..d];
                    a[k] = u[k * d..][..d].iter().zip(vj).map(|(x, y)| x * y).sum();
                }
            }
        }
        let value = Tensor::from_parts(vec![b, i, j], a, "routing_agreement")?;
        Ok(self.push(
            value,
            vec![predictions, outputs],
            Box::new(move |ctx| {
                let (u, v, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
                let mut du = vec![0.0f32; u.len()];
                let mut dv = vec![0.0f32; v.len()];
                for bb in 0..b {
                    for ii in 0..i {
                        for jj in 0..j {
                            let k = (bb * i + ii) * j + jj;
                            let vj = &v[(bb * j + jj) * d..][..d];
                            let uk = &u[k * d..][..d];
                            du[k * d..][..d].iter_mut().zip(vj).for_each(|(o, x)| *o = g[k] * x);
                            dv[(bb * j + jj) * d..][..d]
                                .iter_mut()
                                .zip(uk)
                                .for_each(|(o, x)| *o += g[k] * x);
                        }
                    }
                }
                vec![Some(du), Some(dv)]
            }),
        ))
    }
}

/// Routing by agreement over predictions û of shape B×I×J×D.
///
/// Logits start at zero on every call. Each iteration computes
/// `c = softmax_j(b)`, `v = squash(Σ_i c·û)` and then `b += û·v`; the last
/// iteration's update would not change `v` and is skipped. The whole unrolled
/// loop is recorded, so gradients also flow through the coupling coefficients.
pub fn dynamic_routing(g: &mut Graph, predictions: Var, iterations: usize) -> Result<Routed> {
    if iterations < 1 {
        return Err(Error::usage("routing needs at least one iteration"));
    }
    let [b, i, j, _] = dims4(g.shape(predictions), "dynamic_routing")?;
    let mut logits = g.constant(Tensor::zeros(&[b, i, j]));
    let mut couplings = Vec::with_capacity(iterations);
    let mut output = None;
    for iter in 0..iterations {
        let c = g.softmax(logits, 2)?;
        couplings.push(c);
        let s = g.routing_vote(c, predictions)?;
        let v = g.squash(s)?;
        if iter + 1 < iterations {
            let agreement = g.routing_agreement(predictions, v)?;
            logits = g.add(logits, agreement)?;
        }
        output = Some(v);
    }
    Ok(Routed { output: output.expect("iterations >= 1"), couplings })
}
