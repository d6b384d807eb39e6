use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub(crate) struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f32],
}

/// Returns one gradient buffer per input, `None` for inputs that need none.
pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f32>>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Reverse-mode tape.
///
/// Nodes are appended in evaluation order, so index order is a topological
/// order and the backward sweep is a reverse scan. Leaf gradients accumulate
/// across [`Graph::backward`] calls until [`Graph::zero_grad`]; gradients of
/// interior nodes are overwritten by each sweep and stay readable afterwards.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = requires_grad.then_some(backward);
        self.nodes.push(Node { value, parents, backward, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the last backward sweep with respect to `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(
            Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone(), "gradient")
                .expect("gradients are checked during the sweep"),
        )
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Back-propagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(loss, &[1.0])
    }

    /// Vector-Jacobian product: back-propagates `seed` as the gradient of `output`.
    pub fn backward_seeded(&mut self, output: Var, seed: &[f32]) -> Result<()> {
        if seed.len() != self.nodes[output.0].value.len() {
            return Err(Error::dim(format!(
                "seed of length {} for output of shape {:?}",
                seed.len(),
                self.shape(output)
            )));
        }
        let mut pending: Vec<Option<Vec<f32>>> = vec![None; output.0 + 1];
        pending[output.0] = Some(seed.to_vec());

        for idx in (0..=output.0).rev() {
            let Some(grad) = pending[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(rule) = &node.backward {
                let ctx = BackwardCtx {
                    inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                    output: &node.value,
                    grad: &grad,
                };
                let input_grads = rule(&ctx);
                debug_assert_eq!(input_grads.len(), node.parents.len());
                for (parent, g) in node.parents.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[parent.0].requires_grad {
                        continue;
                    }
                    super::tensor::check_finite(&g, "back-propagated gradient")?;
                    accumulate(&mut pending[parent.0], g);
                }
                self.grads[idx] = Some(grad);
            } else {
                // leaf
                accumulate(&mut self.grads[idx], grad);
            }
        }
        Ok(())
    }

    fn unary(
        &mut self,
        x: Var,
        data: Vec<f32>,
        what: &str,
        backward: BackwardFn,
    ) -> Result<Var> {
        let value = Tensor::from_parts(self.shape(x).to_vec(), data, what)?;
        Ok(self.push(value, vec![x], backward))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::from_parts(self.shape(a).to_vec(), data, "add")?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let value = Tensor::from_parts(self.shape(a).to_vec(), data, "sub")?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|ctx| {
                vec![Some(ctx.grad.to_vec()), Some(ctx.grad.iter().map(|g| -g).collect())]
            }),
        ))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::from_parts(self.shape(a).to_vec(), data, "mul")?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.grad.iter().zip(b).map(|(g, y)| g * y).collect();
                let gb = ctx.grad.iter().zip(a).map(|(g, x)| g * x).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        self.unary(
            x,
            data,
            "scale",
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|g| g * factor).collect())]),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        self.unary(
            x,
            data,
            "relu",
            Box::new(|ctx| {
                let g = ctx
                    .grad
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f32 = self.value(x).data().iter().sum();
        let value = Tensor::from_parts(vec![1], vec![total], "sum")?;
        Ok(self.push(
            value,
            vec![x],
            Box::new(|ctx| vec![Some(vec![ctx.grad[0]; ctx.inputs[0].len()])]),
        ))
    }

    /// Dot product of `x` with fixed coefficients, as a one-element tensor.
    pub fn weighted_sum(&mut self, x: Var, coefficients: Vec<f32>) -> Result<Var> {
        if coefficients.len() != self.value(x).len() {
            return Err(Error::dim(format!(
                "weighted_sum: {} coefficients for shape {:?}",
                coefficients.len(),
                self.shape(x)
            )));
        }
        let total: f32 = self.value(x).data().iter().zip(&coefficients).map(|(a, b)| a * b).sum();
        let value = Tensor::from_parts(vec![1], vec![total], "weighted_sum")?;
        Ok(self.push(
            value,
            vec![x],
            Box::new(move |ctx| vec![Some(coefficients.iter().map(|c| c * ctx.grad[0]).collect())]),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, vec![x], Box::new(|ctx| vec![Some(ctx.grad.to_vec())])))
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5).unwrap());
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_doubles_leaf_grads() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let c = g.constant(Tensor::full(&[2], 3.0));
        let y = g.mul(x, c).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }
}
