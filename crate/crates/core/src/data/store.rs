//! On-disk layout.
//!
//! A volume directory holds `meta.txt` plus CTT files for the slices and
//! any masks. A cohort directory holds `cohort.txt` (one `volume.<dir>=<label>`
//! line per patient) and, optionally, `split.txt` (`<id>=train|validation|test`).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{parse_key_values, read_text, write_text};
use crate::numerics::ctt;

use super::split::{DatasetSplit, Partition};
use super::volume::{PatientLabel, SliceLabel, SliceRecord, SliceVolume};

const META: &str = "meta.txt";
pub const COHORT_FILE: &str = "cohort.txt";
pub const SPLIT_FILE: &str = "split.txt";

pub fn save_volume(volume: &SliceVolume, dir: &Path) -> Result<()> {
    volume.validate()?;
    let mut meta = format!(
        "patient_id={}\nlabel={}\nslices={}\n",
        volume.patient_id,
        volume.label,
        volume.slices.len()
    );
    for (i, s) in volume.slices.iter().enumerate() {
        let file = format!("slice_{i:04}.ctt");
        ctt::write(&dir.join(&file), &s.pixels)?;
        writeln!(meta, "slice.{i}={file}").unwrap();
        writeln!(meta, "slice_label.{i}={}", s.label.as_str()).unwrap();
        if let Some(m) = &s.lung_mask {
            let file = format!("lung_{i:04}.ctt");
            ctt::write(&dir.join(&file), m)?;
            writeln!(meta, "lung_mask.{i}={file}").unwrap();
        }
        if let Some(m) = &s.infection_mask {
            let file = format!("infection_{i:04}.ctt");
            ctt::write(&dir.join(&file), m)?;
            writeln!(meta, "infection_mask.{i}={file}").unwrap();
        }
    }
    write_text(&dir.join(META), &meta)
}

pub fn load_volume(dir: &Path) -> Result<SliceVolume> {
    let meta_path = dir.join(META);
    let fields: HashMap<String, String> = parse_key_values(&read_text(&meta_path)?, &meta_path)?.into_iter().collect();
    let bad = |reason: String| Error::format(&meta_path, reason);
    let field = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing {k}")));

    let patient_id = field("patient_id")?.clone();
    let label: PatientLabel = field("label")?.parse().map_err(|e: Error| bad(e.to_string()))?;
    let count: usize = field("slices")?.parse().map_err(|_| bad("slices is not a count".into()))?;
    let mut slices = Vec::with_capacity(count);
    for i in 0..count {
        let pixels = ctt::read(&dir.join(field(&format!("slice.{i}"))?))?;
        let slice_label = match fields.get(&format!("slice_label.{i}")) {
            Some(l) => l.parse().map_err(|e: Error| bad(e.to_string()))?,
            None => SliceLabel::Unlabeled,
        };
        let optional = |key: String| -> Result<_> {
            fields.get(&key).map(|f| ctt::read(&dir.join(f))).transpose()
        };
        slices.push(SliceRecord {
            pixels,
            lung_mask: optional(format!("lung_mask.{i}"))?,
            infection_mask: optional(format!("infection_mask.{i}"))?,
            label: slice_label,
        });
    }
    SliceVolume::new(patient_id, slices, label).map_err(|e| bad(e.to_string()))
}

/// One cohort entry: the volume directory (relative to the cohort root) and its label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CohortEntry {
    pub dir: String,
    pub label: PatientLabel,
}

pub fn write_cohort(root: &Path, entries: &[CohortEntry]) -> Result<()> {
    let mut text = String::from("format=ctcaps-cohort\nversion=1\n");
    for e in entries {
        writeln!(text, "volume.{}={}", e.dir, e.label).unwrap();
    }
    write_text(&root.join(COHORT_FILE), &text)
}

pub fn read_cohort(root: &Path) -> Result<Vec<CohortEntry>> {
    let path = root.join(COHORT_FILE);
    let mut out = Vec::new();
    for (k, v) in parse_key_values(&read_text(&path)?, &path)? {
        if let Some(dir) = k.strip_prefix("volume.") {
            let label = v.parse().map_err(|e: Error| Error::format(&path, e.to_string()))?;
            out.push(CohortEntry { dir: dir.to_string(), label });
        }
    }
    if out.is_empty() {
        return Err(Error::format(&path, "cohort lists no volumes"));
    }
    Ok(out)
}

/// Writes every volume under `root/<patient_id>` plus the cohort manifest.
pub fn save_cohort(root: &Path, volumes: &[SliceVolume]) -> Result<()> {
    let mut entries = Vec::with_capacity(volumes.len());
    for v in volumes {
        save_volume(v, &root.join(&v.patient_id))?;
        entries.push(CohortEntry { dir: v.patient_id.clone(), label: v.label });
    }
    write_cohort(root, &entries)
}

pub fn load_cohort(root: &Path) -> Result<Vec<SliceVolume>> {
    read_cohort(root)?
        .iter()
        .map(|e| {
            let v = load_volume(&root.join(&e.dir))?;
            if v.label != e.label {
                return Err(Error::format(
                    root.join(COHORT_FILE),
                    format!("{} is {} in the cohort but {} in its meta", e.dir, e.label, v.label),
                ));
            }
            Ok(v)
        })
        .collect()
}

pub fn write_split(root: &Path, split: &DatasetSplit) -> Result<()> {
    let mut text = format!("seed={}\n", split.seed);
    for part in [Partition::Train, Partition::Validation, Partition::Test] {
        for id in split.ids(part) {
            writeln!(text, "{id}={}", part.as_str()).unwrap();
        }
    }
    write_text(&root.join(SPLIT_FILE), &text)
}

pub fn read_split(root: &Path) -> Result<DatasetSplit> {
    let path: PathBuf = root.join(SPLIT_FILE);
    let mut split = DatasetSplit { train: vec![], validation: vec![], test: vec![], seed: 0 };
    for (k, v) in parse_key_values(&read_text(&path)?, &path)? {
        if k == "seed" {
            split.seed = v.parse().map_err(|_| Error::format(&path, "seed is not an integer"))?;
            continue;
        }
        match Partition::parse(&v) {
            Some(Partition::Train) => split.train.push(k),
            Some(Partition::Validation) => split.validation.push(k),
            Some(Partition::Test) => split.test.push(k),
            None => return Err(Error::format(&path, format!("unknown partition {v:?} for {k}"))),
        }
    }
    Ok(split)
}
