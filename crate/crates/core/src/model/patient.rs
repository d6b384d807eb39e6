use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{softmax_kernel, Graph, Tensor, Var};

use super::init::xavier_uniform;

pub const FEATURE_CAPSULES: usize = 32;
pub const FEATURE_DIM: usize = 16;

/// Fully connected widths of the patient head, input first.
pub const HEAD_SIZES: [usize; 5] = [FEATURE_CAPSULES * FEATURE_DIM, 256, 128, 32, 2];

/// One patient's pooled 32×16 feature-capsule matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientFeatureMap {
    matrix: Tensor,
}

impl PatientFeatureMap {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.shape() != [FEATURE_CAPSULES, FEATURE_DIM] {
            return Err(Error::dim(format!(
                "patient feature map must be {FEATURE_CAPSULES}×{FEATURE_DIM}, got {:?}",
                matrix.shape()
            )));
        }
        Ok(PatientFeatureMap { matrix })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

/// Element-wise maximum over a patient's slice feature maps.
///
/// Works for any common shape; the pipeline uses 32×16.
pub fn aggregate_max(maps: &[&Tensor]) -> Result<Tensor> {
    let (first, rest) = maps.split_first().ok_or_else(|| Error::usage("cannot aggregate zero slices"))?;
    let mut out = first.data().to_vec();
    for m in rest {
        if m.shape() != first.shape() {
            return Err(Error::dim(format!(
                "feature maps {:?} and {:?} differ in shape",
                first.shape(),
                m.shape()
            )));
        }
        out.iter_mut().zip(m.data()).for_each(|(o, &v)| *o = o.max(v));
    }
    Tensor::new(first.shape(), out)
}

pub fn aggregate_patient(maps: &[&Tensor]) -> Result<PatientFeatureMap> {
    PatientFeatureMap::new(aggregate_max(maps)?)
}

/// Weights of the 512→256→128→32→2 head.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientClassifier {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl PatientClassifier {
    pub fn build(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (weights, biases) = HEAD_SIZES
            .windows(2)
            .map(|w| (xavier_uniform(&mut rng, &[w[0], w[1]], w[0], w[1], 1.0), Tensor::zeros(&[w[1]])))
            .unzip();
        PatientClassifier { weights, biases }
    }

    /// All-zero weights and biases.
    pub fn zeros() -> Self {
        let (weights, biases) = HEAD_SIZES
            .windows(2)
            .map(|w| (Tensor::zeros(&[w[0], w[1]]), Tensor::zeros(&[w[1]])))
            .unzip();
        PatientClassifier { weights, biases }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.weights.len() == 4
            && self.biases.len() == 4
            && HEAD_SIZES.windows(2).enumerate().all(|(i, w)| {
                self.weights[i].shape() == [w[0], w[1]] && self.biases[i].shape() == [w[1]]
            });
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!("patient head does not have layer sizes {HEAD_SIZES:?}")))
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Records the head over an N×512 input and returns (parameter leaves, N×2 logits).
    pub fn record(&self, g: &mut Graph, input: Var, trainable: bool) -> Result<(Vec<Var>, Var)> {
        let params: Vec<Var> = self.parameters().into_iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        let mut x = input;
        for (layer, pair) in params.chunks(2).enumerate() {
            x = g.dense(x, pair[0], pair[1])?;
            if layer < 3 {
                x = g.relu(x)?;
            }
        }
        Ok((params, x))
    }

    /// `(p_noncovid, p_covid)` for one patient.
    pub fn patient_forward(&self, fm: &PatientFeatureMap) -> Result<(f32, f32)> {
        let mut g = Graph::new();
        let input = g.constant(fm.matrix().reshape(&[1, HEAD_SIZES[0]])?);
        let (_, logits) = self.record(&mut g, input, false)?;
        let p = softmax_kernel(g.value(logits).data(), 1, 2, 1);
        Ok((p[0], p[1]))
    }
}

/// Stacks feature maps into an N×512 batch.
pub(crate) fn stack_features(maps: &[&PatientFeatureMap]) -> Result<Tensor> {
    let data = maps.iter().flat_map(|m| m.matrix().data().iter().copied()).collect();
    Tensor::new(&[maps.len(), HEAD_SIZES[0]], data)
}
