//! Capsule math: squash, routing by agreement, capsule layers, and the
//! margin / class-weighted losses.

mod layer;
mod loss;
mod routing;
mod squash;

pub use layer::{capsule_layer_forward, CapsuleLayerSpec, DEFAULT_ROUTING_ITERATIONS};
pub use loss::{margin_loss_value, ClassWeights, DOWN_WEIGHT, MARGIN_NEGATIVE, MARGIN_POSITIVE};
pub use routing::{dynamic_routing, Routed};
pub use squash::NORM_EPSILON;

pub(crate) use squash::row_norms;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};

/// A set of capsules for one sample: `num_capsules × capsule_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleTensor {
    values: Tensor,
}

impl CapsuleTensor {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::dim(format!("capsules must be N×D, got {:?}", values.shape())));
        }
        Ok(CapsuleTensor { values })
    }

    pub fn num_capsules(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn capsule_dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn capsule(&self, index: usize) -> &[f32] {
        &self.values.data()[index * self.capsule_dim()..][..self.capsule_dim()]
    }

    pub fn norms(&self) -> Vec<f32> {
        row_norms(self.values.data(), self.capsule_dim())
    }

    pub fn squash(&self) -> CapsuleTensor {
        let data = squash::squash_rows(self.values.data(), self.capsule_dim());
        let values = Tensor::new(self.values.shape(), data).expect("squash keeps values finite");
        CapsuleTensor { values }
    }

    /// Applies a capsule layer to this sample.
    pub fn through_layer(&self, spec: &CapsuleLayerSpec, weights: &Tensor) -> Result<CapsuleTensor> {
        let mut g = Graph::new();
        let input = g.constant(self.values.reshape(&[1, self.num_capsules(), self.capsule_dim()])?);
        let w = g.constant(weights.clone());
        let routed = capsule_layer_forward(&mut g, input, spec, w)?;
        CapsuleTensor::new(g.value(routed.output).reshape(&[spec.out_capsules, spec.out_dim])?)
    }

    /// Routes prediction vectors `in_caps × out_caps × out_dim` to output capsules.
    pub fn route(predictions: &Tensor, iterations: usize) -> Result<CapsuleTensor> {
        let shape = predictions.shape();
        if shape.len() != 3 {
            return Err(Error::dim(format!("predictions must be I×J×D, got {shape:?}")));
        }
        let mut g = Graph::new();
        let p = g.constant(predictions.reshape(&[1, shape[0], shape[1], shape[2]])?);
        let routed = dynamic_routing(&mut g, p, iterations)?;
        CapsuleTensor::new(g.value(routed.output).reshape(&[shape[1], shape[2]])?)
    }

    /// Margin loss against a one-hot target over the capsules.
    pub fn margin_loss(&self, target: &[f32]) -> Result<f32> {
        margin_loss_value(&self.norms(), target)
    }
}
