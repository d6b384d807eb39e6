use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsnet::{capsule_layer_forward, CapsuleLayerSpec, CapsuleTensor, DEFAULT_ROUTING_ITERATIONS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Mode, RunningStats, Tensor, Var};

use super::init::xavier_uniform;

pub const SUPPORTED_INPUT_SIZES: [usize; 4] = [32, 64, 128, 256];

/// Each of the four stride-2 convolutions halves the side, and so does the
/// pooling after the second one.
const DOWNSAMPLING: usize = 32;

/// Layer sizes of the slice-level capsule network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceArchitecture {
    pub input_size: usize,
    pub conv_channels: [usize; 4],
    pub kernel: usize,
    pub capsule_types: usize,
    pub primary_dim: usize,
    pub feature_capsules: usize,
    pub feature_dim: usize,
    pub class_capsules: usize,
    pub class_dim: usize,
    pub routing_iterations: usize,
}

impl SliceArchitecture {
    pub fn new(input_size: usize) -> Result<Self> {
        let arch = SliceArchitecture {
            input_size,
            conv_channels: [32, 96, 256, 64],
            kernel: 3,
            capsule_types: 8,
            primary_dim: 8,
            feature_capsules: 32,
            feature_dim: 16,
            class_capsules: 2,
            class_dim: 16,
            routing_iterations: DEFAULT_ROUTING_ITERATIONS,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_INPUT_SIZES.contains(&self.input_size) {
            return Err(Error::usage(format!(
                "unsupported input size {}; expected one of {SUPPORTED_INPUT_SIZES:?}",
                self.input_size
            )));
        }
        if self.conv_channels[3] != self.capsule_types * self.primary_dim {
            return Err(Error::usage(format!(
                "last conv width {} must equal capsule types × primary dim ({} × {})",
                self.conv_channels[3], self.capsule_types, self.primary_dim
            )));
        }
        if self.kernel.is_multiple_of(2) || self.conv_channels.contains(&0) {
            return Err(Error::usage(format!("invalid conv stack {self:?}")));
        }
        Ok(())
    }

    /// Side of the primary-capsule grid.
    pub fn grid(&self) -> usize {
        self.input_size / DOWNSAMPLING
    }

    pub fn primary_capsules(&self) -> usize {
        self.capsule_types * self.grid() * self.grid()
    }

    pub fn feature_spec(&self) -> CapsuleLayerSpec {
        CapsuleLayerSpec {
            routing_iterations: self.routing_iterations,
            ..CapsuleLayerSpec::shared(
                self.capsule_types,
                self.grid() * self.grid(),
                self.primary_dim,
                self.feature_capsules,
                self.feature_dim,
            )
        }
    }

    pub fn class_spec(&self) -> CapsuleLayerSpec {
        CapsuleLayerSpec {
            routing_iterations: self.routing_iterations,
            ..CapsuleLayerSpec::dense(self.feature_capsules, self.feature_dim, self.class_capsules, self.class_dim)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// Learned state of the slice-level network.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceModel {
    pub arch: SliceArchitecture,
    pub convs: [ConvParams; 4],
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_stats: RunningStats,
    pub feature_weights: Tensor,
    pub class_weights: Tensor,
}

/// Handles into one recorded forward pass.
pub struct SliceGraph {
    /// Trainable leaves, in [`SliceModel::parameters`] order.
    pub params: Vec<Var>,
    /// Activated output of the last convolution, B×C×g×g.
    pub last_conv: Var,
    /// Feature capsules, B×32×16.
    pub features: Var,
    /// Class capsules, B×2×16.
    pub classes: Var,
    /// Class-capsule norms, B×2.
    pub class_norms: Var,
    /// Batch-norm statistics after this pass (changed only in train mode).
    pub bn_stats: RunningStats,
}

/// Outputs of [`SliceModel::slice_forward`] for one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceOutput {
    pub class_capsules: CapsuleTensor,
    pub feature_capsules: CapsuleTensor,
}

impl SliceOutput {
    /// Argmax of the class-capsule norms (index 1 = infection evident).
    pub fn predicts_infection(&self) -> bool {
        let n = self.class_capsules.norms();
        n[1] > n[0]
    }
}

impl Graph {
    /// Regroups a B×(T·D)×H×W map into B×(T·H·W)×D capsules, type-major:
    /// capsule `t·H·W + y·W + x` takes channels `t·D .. t·D + D` at (y, x).
    pub fn primary_capsules(&mut self, input: Var, types: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let [b, c, h, w] = match *shape.as_slice() {
            [b, c, h, w] if types > 0 && c % types == 0 => [b, c, h, w],
            _ => return Err(Error::dim(format!("cannot split {shape:?} into {types} capsule types"))),
        };
        let d = c / types;
        let hw = h * w;
        // destination index for each source element
        let mut map = vec![0usize; b * c * hw];
        for bb in 0..b {
            for t in 0..types {
                for k in 0..d {
                    for p in 0..hw {
                        let src = (bb * c + t * d + k) * hw + p;
                        map[src] = (bb * types * hw + t * hw + p) * d + k;
                    }
                }
            }
        }
        let x = self.value(input).data();
        let mut out = vec![0.0f32; x.len()];
        for (src, &dst) in map.iter().enumerate() {
            out[dst] = x[src];
        }
        let value = Tensor::new(&[b, types * hw, d], out)?;
        Ok(self.push(
            value,
            vec![input],
            Box::new(move |ctx| vec![Some(map.iter().map(|&dst| ctx.grad[dst]).collect())]),
        ))
    }
}

impl SliceModel {
    /// Default architecture with Xavier-uniform weights drawn from `seed`.
    pub fn build(input_size: usize, seed: u64) -> Result<Self> {
        Self::with_architecture(SliceArchitecture::new(input_size)?, seed)
    }

    pub fn with_architecture(arch: SliceArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = arch.kernel;
        let mut in_ch = 1;
        let convs = arch.conv_channels.map(|out_ch| {
            let kernels = xavier_uniform(&mut rng, &[out_ch, in_ch, k, k], in_ch * k * k, out_ch * k * k, 1.0);
            in_ch = out_ch;
            ConvParams { kernels, bias: Tensor::zeros(&[out_ch]) }
        });
        let c2 = arch.conv_channels[1];
        let fs = arch.feature_spec();
        let cs = arch.class_spec();
        let feature_weights = xavier_uniform(&mut rng, &fs.weight_shape(), fs.in_dim, fs.out_dim, CAPSULE_GAIN);
        let class_weights = xavier_uniform(&mut rng, &cs.weight_shape(), cs.in_dim, cs.out_dim, CAPSULE_GAIN);
        Ok(SliceModel {
            convs,
            bn_gamma: Tensor::ones(&[c2]),
            bn_beta: Tensor::zeros(&[c2]),
            bn_stats: RunningStats::identity(c2),
            feature_weights,
            class_weights,
            arch,
        })
    }

    /// Trainable tensors in a fixed order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(12);
        for (i, c) in self.convs.iter().enumerate() {
            out.push(&c.kernels);
            out.push(&c.bias);
            if i == 1 {
                out.push(&self.bn_gamma);
                out.push(&self.bn_beta);
            }
        }
        out.push(&self.feature_weights);
        out.push(&self.class_weights);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let [c1, c2, c3, c4] = &mut self.convs;
        vec![
            &mut c1.kernels,
            &mut c1.bias,
            &mut c2.kernels,
            &mut c2.bias,
            &mut self.bn_gamma,
            &mut self.bn_beta,
            &mut c3.kernels,
            &mut c3.bias,
            &mut c4.kernels,
            &mut c4.bias,
            &mut self.feature_weights,
            &mut self.class_weights,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Records a forward pass over a B×1×S×S batch.
    ///
    /// With `trainable`, parameters enter the graph as gradient leaves.
    pub fn record(&self, g: &mut Graph, input: Var, mode: Mode, trainable: bool) -> Result<SliceGraph> {
        let s = self.arch.input_size;
        let shape = g.shape(input);
        if shape.len() != 4 || shape[1..] != [1, s, s] {
            return Err(Error::dim(format!("slice model expects B×1×{s}×{s}, got {shape:?}")));
        }
        let params: Vec<Var> = self.parameters().into_iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        let [k1, b1, k2, b2, gamma, beta, k3, b3, k4, b4, wf, wc] = params[..] else {
            unreachable!("twelve parameter tensors")
        };
        let pad = self.arch.kernel / 2;
        let mut bn_stats = self.bn_stats.clone();

        let x = g.conv2d(input, k1, b1, 2, pad)?;
        let x = g.relu(x)?;
        let x = g.conv2d(x, k2, b2, 2, pad)?;
        let x = g.batchnorm(x, gamma, beta, &mut bn_stats, mode)?;
        let x = g.relu(x)?;
        let x = g.maxpool2d(x, 2, 2)?.out;
        let x = g.conv2d(x, k3, b3, 2, pad)?;
        let x = g.relu(x)?;
        let x = g.conv2d(x, k4, b4, 2, pad)?;
        let last_conv = g.relu(x)?;

        let primary = g.primary_capsules(last_conv, self.arch.capsule_types)?;
        let primary = g.squash(primary)?;
        let features = capsule_layer_forward(g, primary, &self.arch.feature_spec(), wf)?.output;
        let classes = capsule_layer_forward(g, features, &self.arch.class_spec(), wc)?.output;
        let class_norms = g.capsule_norm(classes)?;
        Ok(SliceGraph { params, last_conv, features, classes, class_norms, bn_stats })
    }

    /// Both capsule outputs for one S×S (or 1×S×S) slice.
    pub fn slice_forward(&self, slice: &Tensor, mode: Mode) -> Result<SliceOutput> {
        let s = self.arch.input_size;
        if slice.len() != s * s || !(slice.shape() == [s, s] || slice.shape() == [1, s, s]) {
            return Err(Error::dim(format!("expected a {s}×{s} slice, got {:?}", slice.shape())));
        }
        let mut g = Graph::new();
        let input = g.constant(slice.reshape(&[1, 1, s, s])?);
        let out = self.record(&mut g, input, mode, false)?;
        Ok(SliceOutput {
            class_capsules: to_caps(g.value(out.classes), 0)?,
            feature_capsules: to_caps(g.value(out.features), 0)?,
        })
    }

    /// Eval-mode forward over many slices, in batches of `batch`.
    pub fn forward_many(&self, slices: &[&Tensor], batch: usize) -> Result<Vec<SliceOutput>> {
        let s = self.arch.input_size;
        let mut out = Vec::with_capacity(slices.len());
        for chunk in slices.chunks(batch.max(1)) {
            let input = stack_slices(chunk, s)?;
            let mut g = Graph::new();
            let input = g.constant(input);
            let rec = self.record(&mut g, input, Mode::Eval, false)?;
            for i in 0..chunk.len() {
                out.push(SliceOutput {
                    class_capsules: to_caps(g.value(rec.classes), i)?,
                    feature_capsules: to_caps(g.value(rec.features), i)?,
                });
            }
        }
        Ok(out)
    }
}

/// Initial scale of the capsule transforms relative to Xavier.
const CAPSULE_GAIN: f32 = 1.0;

/// Stacks S×S (or 1×S×S) slices into a B×1×S×S batch.
pub fn stack_slices(slices: &[&Tensor], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(slices.len() * size * size);
    for t in slices {
        if t.len() != size * size {
            return Err(Error::dim(format!("expected a {size}×{size} slice, got {:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[slices.len(), 1, size, size], data)
}

fn to_caps(batch: &Tensor, index: usize) -> Result<CapsuleTensor> {
    let (n, d) = (batch.shape()[1], batch.shape()[2]);
    let data = batch.data()[index * n * d..][..n * d].to_vec();
    CapsuleTensor::new(Tensor::new(&[n, d], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic() {
        let arch = SliceArchitecture::new(256).unwrap();
        assert_eq!(arch.grid(), 8);
        assert_eq!(arch.primary_capsules(), 512);
        assert_eq!(SliceArchitecture::new(64).unwrap().primary_capsules(), 32);
    }

    #[test]
    fn unsupported_size() {
        assert!(matches!(SliceModel::build(100, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn primary_capsule_layout() {
        let mut g = Graph::new();
        // 2 types × 2 dims, 1×2 spatial
        let x = g.constant(Tensor::from_fn(&[1, 4, 1, 2], |i| i as f32).unwrap());
        let caps = g.primary_capsules(x, 2).unwrap();
        assert_eq!(g.shape(caps), &[1, 4, 2]);
        // channel c at position p holds value c*2 + p
        assert_eq!(g.value(caps).data(), &[0.0, 2.0, 1.0, 3.0, 4.0, 6.0, 5.0, 7.0]);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = SliceModel::build(64, 7).unwrap();
        let b = SliceModel::build(64, 7).unwrap();
        let c = SliceModel::build(64, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
