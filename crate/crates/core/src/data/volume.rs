use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PatientLabel {
    Covid,
    NonCovid,
}

impl PatientLabel {
    pub fn is_covid(self) -> bool {
        self == PatientLabel::Covid
    }

    pub fn from_covid(covid: bool) -> Self {
        if covid {
            PatientLabel::Covid
        } else {
            PatientLabel::NonCovid
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PatientLabel::Covid => "covid",
            PatientLabel::NonCovid => "non-covid",
        }
    }
}

impl fmt::Display for PatientLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatientLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "covid" => Ok(PatientLabel::Covid),
            "non-covid" => Ok(PatientLabel::NonCovid),
            other => Err(Error::usage(format!("patient label {other:?} is not covid or non-covid"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SliceLabel {
    InfectionEvident,
    NoEvidence,
    Unlabeled,
}

impl SliceLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SliceLabel::InfectionEvident => "infection-evident",
            SliceLabel::NoEvidence => "no-evidence",
            SliceLabel::Unlabeled => "unlabeled",
        }
    }

    /// `Some(true)` for infection, `Some(false)` for no evidence, `None` when unlabeled.
    pub fn infected(self) -> Option<bool> {
        match self {
            SliceLabel::InfectionEvident => Some(true),
            SliceLabel::NoEvidence => Some(false),
            SliceLabel::Unlabeled => None,
        }
    }
}

impl FromStr for SliceLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infection-evident" => Ok(SliceLabel::InfectionEvident),
            "no-evidence" => Ok(SliceLabel::NoEvidence),
            "unlabeled" => Ok(SliceLabel::Unlabeled),
            other => Err(Error::usage(format!("unknown slice label {other:?}"))),
        }
    }
}

/// One preprocessed S×S slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub pixels: Tensor,
    pub lung_mask: Option<Tensor>,
    /// Ground-truth lesion mask, known only for synthetic data.
    pub infection_mask: Option<Tensor>,
    pub label: SliceLabel,
}

impl SliceRecord {
    pub fn new(pixels: Tensor, label: SliceLabel) -> Result<Self> {
        let record = SliceRecord { pixels, lung_mask: None, infection_mask: None, label };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.pixels.shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::dim(format!("slice must be square S×S, got {shape:?}")));
        }
        if self.pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::usage("slice pixels must lie in [0, 1]"));
        }
        for mask in [&self.lung_mask, &self.infection_mask].into_iter().flatten() {
            if mask.shape() != shape {
                return Err(Error::dim(format!("mask {:?} does not match slice {shape:?}", mask.shape())));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[0]
    }
}

/// The ordered slices of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceVolume {
    pub patient_id: String,
    pub slices: Vec<SliceRecord>,
    pub label: PatientLabel,
}

impl SliceVolume {
    pub fn new(patient_id: impl Into<String>, slices: Vec<SliceRecord>, label: PatientLabel) -> Result<Self> {
        let volume = SliceVolume { patient_id: patient_id.into(), slices, label };
        volume.validate()?;
        Ok(volume)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .slices
            .first()
            .ok_or_else(|| Error::EmptyVolume(format!("patient {} has no slices", self.patient_id)))?;
        for s in &self.slices {
            s.validate()?;
            if s.size() != first.size() {
                return Err(Error::dim(format!(
                    "patient {} mixes slice sizes {} and {}",
                    self.patient_id,
                    first.size(),
                    s.size()
                )));
            }
        }
        Ok(())
    }

    pub fn slice_size(&self) -> usize {
        self.slices.first().map_or(0, SliceRecord::size)
    }

    pub fn pixels(&self) -> Vec<&Tensor> {
        self.slices.iter().map(|s| &s.pixels).collect()
    }
}
