//! Slice volumes, preprocessing, dataset splitting, a synthetic cohort
//! generator and the on-disk volume layout.

mod preprocess;
mod split;
mod store;
mod synth;
mod volume;

pub use preprocess::{
    filter_empty_slices, lung_fraction, normalize_min_max, preprocess_slice, preprocess_slice_to,
    DEFAULT_MIN_LUNG_FRACTION, PREPROCESSED_SIZE,
};
pub use split::{split_dataset, DatasetSplit, Partition, MIN_COHORT, MIN_PER_CLASS};
pub use store::{
    load_cohort, load_volume, read_cohort, read_split, save_cohort, save_volume, write_cohort, write_split,
    CohortEntry, COHORT_FILE, SPLIT_FILE,
};
pub use synth::{generate_synthetic_cohort, SynthConfig, MAX_BLOB_FRACTION, MIN_BLOB_FRACTION};
pub use volume::{PatientLabel, SliceLabel, SliceRecord, SliceVolume};

use crate::model::LabeledSlice;

/// Slice-level training examples from the given patients only; unlabeled slices are skipped.
pub fn labeled_slices<'a>(volumes: &'a [SliceVolume], ids: &[String]) -> Vec<LabeledSlice<'a>> {
    volumes
        .iter()
        .filter(|v| ids.contains(&v.patient_id))
        .flat_map(|v| v.slices.iter())
        .filter_map(|s| s.label.infected().map(|infected| LabeledSlice { pixels: &s.pixels, infected }))
        .collect()
}
