use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::volume::PatientLabel;

pub const TRAIN_FRACTION: f64 = 0.6;
pub const VALIDATION_FRACTION: f64 = 0.1;
pub const MIN_COHORT: usize = 10;
pub const MIN_PER_CLASS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Partition::Train),
            "validation" => Some(Partition::Validation),
            "test" => Some(Partition::Test),
            _ => None,
        }
    }
}

/// Patient-level 60/10/30 partition. Ids keep cohort order within each part.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn partition_of(&self, id: &str) -> Option<Partition> {
        let has = |v: &Vec<String>| v.iter().any(|x| x == id);
        if has(&self.train) {
            Some(Partition::Train)
        } else if has(&self.validation) {
            Some(Partition::Validation)
        } else if has(&self.test) {
            Some(Partition::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, part: Partition) -> &[String] {
        match part {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }
}

/// Stratified, seeded split at patient granularity.
///
/// Each class is shuffled, then every patient gets the key
/// `(rank within class + ½) / class size`; walking all patients in key order
/// spreads each class evenly, so cutting that sequence at 60% and 70%
/// gives exact overall sizes and per-class shares within one patient.
pub fn split_dataset(cohort: &[(String, PatientLabel)], seed: u64) -> Result<DatasetSplit> {
    if cohort.len() < MIN_COHORT {
        return Err(Error::usage(format!(
            "splitting needs at least {MIN_COHORT} patients, got {}",
            cohort.len()
        )));
    }
    let mut seen = HashSet::new();
    if let Some((dup, _)) = cohort.iter().find(|(id, _)| !seen.insert(id.as_str())) {
        return Err(Error::usage(format!("patient id {dup} appears twice")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(cohort.len());
    for (class_rank, label) in [PatientLabel::Covid, PatientLabel::NonCovid].into_iter().enumerate() {
        let mut members: Vec<usize> = (0..cohort.len()).filter(|&i| cohort[i].1 == label).collect();
        if members.len() < MIN_PER_CLASS {
            return Err(Error::Stratification(format!(
                "class {label} has {} patients, need at least {MIN_PER_CLASS}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        keyed.extend(members.iter().enumerate().map(|(r, &i)| ((r as f64 + 0.5) / n, class_rank, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let n = cohort.len();
    let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let n_val = (VALIDATION_FRACTION * n as f64).round() as usize;
    let mut assignment = vec![Partition::Test; n];
    for (pos, &(_, _, i)) in keyed.iter().enumerate() {
        assignment[i] = if pos < n_train {
            Partition::Train
        } else if pos < n_train + n_val {
            Partition::Validation
        } else {
            Partition::Test
        };
    }
    let pick = |p: Partition| -> Vec<String> {
        cohort.iter().zip(&assignment).filter(|(_, &a)| a == p).map(|((id, _), _)| id.clone()).collect()
    };
    Ok(DatasetSplit {
        train: pick(Partition::Train),
        validation: pick(Partition::Validation),
        test: pick(Partition::Test),
        seed,
    })
}
