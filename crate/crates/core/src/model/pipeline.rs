use crate::data::{PatientLabel, SliceVolume};
use crate::error::{Error, Result};

use super::patient::{aggregate_patient, PatientClassifier, PatientFeatureMap};
use super::slice::SliceModel;

/// Slices per forward batch during feature extraction.
pub const EXTRACT_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub label: PatientLabel,
    pub p_covid: f32,
    pub feature_map: PatientFeatureMap,
}

/// Max-pooled 32×16 feature map of a volume.
pub fn extract_features(model: &SliceModel, volume: &SliceVolume) -> Result<PatientFeatureMap> {
    volume.validate()?;
    let pixels: Vec<_> = volume.slices.iter().map(|s| &s.pixels).collect();
    let outputs = model.forward_many(&pixels, EXTRACT_BATCH)?;
    let maps: Vec<_> = outputs.iter().map(|o| o.feature_capsules.values()).collect();
    aggregate_patient(&maps)
}

/// COVID iff `p_covid >= cutoff`.
pub fn label_at(p_covid: f32, cutoff: f32) -> PatientLabel {
    PatientLabel::from_covid(p_covid >= cutoff)
}

fn check_cutoff(cutoff: f32) -> Result<()> {
    if cutoff > 0.0 && cutoff < 1.0 {
        Ok(())
    } else {
        Err(Error::usage(format!("cutoff must lie in (0, 1), got {cutoff}")))
    }
}

pub fn classify_features(head: &PatientClassifier, feature_map: PatientFeatureMap, cutoff: f32) -> Result<Classification> {
    check_cutoff(cutoff)?;
    let (_, p_covid) = head.patient_forward(&feature_map)?;
    Ok(Classification { label: label_at(p_covid, cutoff), p_covid, feature_map })
}

pub fn classify_patient(
    slice_model: &SliceModel,
    head: &PatientClassifier,
    volume: &SliceVolume,
    cutoff: f32,
) -> Result<Classification> {
    check_cutoff(cutoff)?;
    classify_features(head, extract_features(slice_model, volume)?, cutoff)
}
