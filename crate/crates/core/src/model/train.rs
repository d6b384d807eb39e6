use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsnet::{margin_loss_value, ClassWeights};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Graph, Mode, Tensor};

use super::patient::{stack_features, PatientClassifier, PatientFeatureMap};
use super::slice::{stack_slices, SliceModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Slice,
    Patient,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Slice => "slice",
            Stage::Patient => "patient",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub stage: Stage,
}

impl TrainConfig {
    /// Adam at 1e-4, batch 16, 100 epochs.
    pub fn slice_stage() -> Self {
        TrainConfig { lr: 1e-4, batch_size: 16, epochs: 100, seed: 0, stage: Stage::Slice }
    }

    /// Adam at 1e-3, batch 16, 500 epochs.
    pub fn patient_stage() -> Self {
        TrainConfig { lr: 1e-3, batch_size: 16, epochs: 500, seed: 0, stage: Stage::Patient }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::usage(format!("learning rate and batch size must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// Epoch with the lowest validation loss; the earliest wins ties.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.val_loss <= r.val_loss => Some(b),
            _ => Some(r),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{:.9},{:.9}\n", r.epoch, r.train_loss, r.val_loss));
        }
        out
    }
}

/// One preprocessed slice with its slice-level label.
#[derive(Clone, Copy, Debug)]
pub struct LabeledSlice<'a> {
    pub pixels: &'a Tensor,
    pub infected: bool,
}

fn one_hot(labels: impl Iterator<Item = bool>) -> Vec<f32> {
    labels.flat_map(|l| if l { [0.0, 1.0] } else { [1.0, 0.0] }).collect()
}

fn require_both_classes(labels: impl Iterator<Item = bool>, what: &str) -> Result<()> {
    let (mut pos, mut neg) = (0, 0);
    for l in labels {
        if l {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::usage(format!(
            "{what} training partition needs both classes (got {pos} positive, {neg} negative)"
        )));
    }
    Ok(())
}

const EVAL_BATCH: usize = 32;

/// Class-weighted margin loss of the whole set, eval mode.
pub fn slice_loss(model: &SliceModel, examples: &[LabeledSlice<'_>], cw: &ClassWeights) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::usage("loss over an empty slice set"));
    }
    let pixels: Vec<&Tensor> = examples.iter().map(|e| e.pixels).collect();
    let outputs = model.forward_many(&pixels, EVAL_BATCH)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (out, ex) in outputs.iter().zip(examples) {
        let l = margin_loss_value(&out.class_capsules.norms(), &one_hot(std::iter::once(ex.infected)))? as f64;
        if ex.infected {
            pos.push(l);
        } else {
            neg.push(l);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(cw.combine(mean(&pos), mean(&neg)))
}

/// Trains the slice network on the class-weighted margin loss and returns
/// the snapshot with the lowest validation loss.
pub fn train_slice_model(
    model: SliceModel,
    train: &[LabeledSlice<'_>],
    val: &[LabeledSlice<'_>],
    cfg: &TrainConfig,
    cw: &ClassWeights,
) -> Result<(SliceModel, History)> {
    cfg.validate()?;
    require_both_classes(train.iter().map(|e| e.infected), "slice")?;
    if val.is_empty() {
        return Err(Error::usage("slice training needs a validation partition"));
    }
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }

    let size = model.arch.input_size;
    let mut model = model;
    let mut adam = AdamState::new(cfg.lr, model.parameters());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, SliceModel)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let pixels: Vec<&Tensor> = batch.iter().map(|&i| train[i].pixels).collect();
            let labels: Vec<bool> = batch.iter().map(|&i| train[i].infected).collect();
            let mut g = Graph::new();
            let input = g.constant(stack_slices(&pixels, size)?);
            let rec = model.record(&mut g, input, Mode::Train, true)?;
            let losses = g.margin_loss(rec.class_norms, &one_hot(labels.iter().copied()))?;
            let loss = g.weighted_class_loss(losses, &labels, cw)?;
            g.backward(loss)?;
            total += g.value(loss).item()? as f64 * batch.len() as f64;

            let grads: Vec<Tensor> = rec
                .params
                .iter()
                .map(|&p| g.grad(p).unwrap_or_else(|| Tensor::zeros(g.shape(p))))
                .collect();
            let grad_refs: Vec<&[f32]> = grads.iter().map(|t| t.data()).collect();
            adam.step(&mut model.parameters_mut(), &grad_refs)?;
            model.bn_stats = rec.bn_stats;
        }
        let val_loss = slice_loss(&model, val, cw)?;
        history.epochs.push(EpochRecord { epoch, train_loss: total / train.len() as f64, val_loss });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
        }
    }
    Ok((best.expect("at least one epoch").1, history))
}

/// Mean cross-entropy of the head over labeled patients.
pub fn patient_loss(head: &PatientClassifier, examples: &[(&PatientFeatureMap, bool)]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::usage("loss over an empty patient set"));
    }
    let maps: Vec<&PatientFeatureMap> = examples.iter().map(|e| e.0).collect();
    let targets: Vec<usize> = examples.iter().map(|e| e.1 as usize).collect();
    let mut g = Graph::new();
    let input = g.constant(stack_features(&maps)?);
    let (_, logits) = head.record(&mut g, input, false)?;
    let loss = g.softmax_cross_entropy(logits, &targets)?;
    Ok(g.value(loss).item()? as f64)
}

/// Trains the patient head on unweighted cross-entropy and returns the
/// snapshot with the lowest validation loss.
pub fn train_patient_classifier(
    head: PatientClassifier,
    train: &[(&PatientFeatureMap, bool)],
    val: &[(&PatientFeatureMap, bool)],
    cfg: &TrainConfig,
) -> Result<(PatientClassifier, History)> {
    cfg.validate()?;
    head.validate()?;
    require_both_classes(train.iter().map(|e| e.1), "patient")?;
    if val.is_empty() {
        return Err(Error::usage("patient training needs a validation partition"));
    }
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok((head, history));
    }

    let mut head = head;
    let mut adam = AdamState::new(cfg.lr, head.parameters());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, PatientClassifier)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let maps: Vec<&PatientFeatureMap> = batch.iter().map(|&i| train[i].0).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| train[i].1 as usize).collect();
            let mut g = Graph::new();
            let input = g.constant(stack_features(&maps)?);
            let (params, logits) = head.record(&mut g, input, true)?;
            let loss = g.softmax_cross_entropy(logits, &targets)?;
            g.backward(loss)?;
            total += g.value(loss).item()? as f64 * batch.len() as f64;
            let grads: Vec<Tensor> = params
                .iter()
                .map(|&p| g.grad(p).unwrap_or_else(|| Tensor::zeros(g.shape(p))))
                .collect();
            let grad_refs: Vec<&[f32]> = grads.iter().map(|t| t.data()).collect();
            adam.step(&mut head.parameters_mut(), &grad_refs)?;
        }
        let val_loss = patient_loss(&head, val)?;
        history.epochs.push(EpochRecord { epoch, train_loss: total / train.len() as f64, val_loss });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, head.clone()));
        }
    }
    Ok((best.expect("at least one epoch").1, history))
}
