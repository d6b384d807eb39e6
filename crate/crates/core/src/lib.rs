//! Capsule-network engine and two-stage classifier for volumetric chest CT.
//!
//! A capsule network reads each 2-D slice and emits a 32×16 feature-capsule
//! map; the maps of one patient are max-pooled and a small fully connected
//! head turns the pooled map into a COVID probability. Around that core sit
//! preprocessing and a synthetic cohort generator ([`data`]), evaluation with
//! confidence intervals ([`metrics`]) and Grad-CAM saliency ([`explain`]).

pub mod capsnet;
pub mod data;
pub mod error;
pub mod explain;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
