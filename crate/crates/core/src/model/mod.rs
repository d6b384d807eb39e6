//! The two-stage pipeline: a slice-level capsule network that doubles as a
//! feature extractor, max-pool aggregation per patient, a fully connected
//! patient head, their training loops and on-disk bundles.

mod init;
mod patient;
mod persist;
mod pipeline;
mod slice;
mod train;

pub use patient::{
    aggregate_max, aggregate_patient, PatientClassifier, PatientFeatureMap, FEATURE_CAPSULES, FEATURE_DIM, HEAD_SIZES,
};
pub use persist::{FORMAT_TAG, FORMAT_VERSION};
pub use pipeline::{classify_features, classify_patient, extract_features, label_at, Classification, EXTRACT_BATCH};
pub use slice::{stack_slices, ConvParams, SliceArchitecture, SliceGraph, SliceModel, SliceOutput, SUPPORTED_INPUT_SIZES};
pub use train::{
    patient_loss, slice_loss, train_patient_classifier, train_slice_model, EpochRecord, History, LabeledSlice, Stage,
    TrainConfig,
};
