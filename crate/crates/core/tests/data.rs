use std::collections::HashSet;
use std::fs;

use ctcaps::data::*;
use ctcaps::model::{classify_patient, PatientClassifier, SliceModel};
use ctcaps::numerics::Tensor;
use ctcaps::Error;

fn cohort(n_covid: usize, n_noncovid: usize, slices: usize, size: usize, seed: u64) -> Vec<SliceVolume> {
    generate_synthetic_cohort(&SynthConfig { n_covid, n_noncovid, slices_per_volume: slices, size, seed }).unwrap()
}

fn ids(volumes: &[SliceVolume]) -> Vec<(String, PatientLabel)> {
    volumes.iter().map(|v| (v.patient_id.clone(), v.label)).collect()
}

fn labels(n_covid: usize, n_noncovid: usize) -> Vec<(String, PatientLabel)> {
    (0..n_covid + n_noncovid).map(|i| (format!("P{i:03}"), PatientLabel::from_covid(i < n_covid))).collect()
}

// ---- synthetic cohort ----

#[test]
fn no_covid_means_no_blobs() {
    for v in cohort(0, 4, 6, 32, 1) {
        assert_eq!(v.label, PatientLabel::NonCovid);
        for s in &v.slices {
            assert_eq!(s.label, SliceLabel::NoEvidence);
            assert!(s.infection_mask.is_none());
        }
    }
}

#[test]
fn same_seed_same_cohort() {
    assert_eq!(cohort(3, 3, 5, 32, 11), cohort(3, 3, 5, 32, 11));
    assert_ne!(cohort(3, 3, 5, 32, 11), cohort(3, 3, 5, 32, 12));
}

#[test]
fn volumes_do_not_depend_on_cohort_size() {
    // volume i draws from its own stream
    let small = cohort(2, 2, 5, 32, 4);
    let large = cohort(2, 5, 5, 32, 4);
    assert_eq!(&small[..3], &large[..3]);
}

#[test]
fn blob_fraction_per_covid_volume_in_bounds() {
    for v in cohort(12, 3, 10, 64, 2) {
        let blobs = v.slices.iter().filter(|s| s.label == SliceLabel::InfectionEvident).count();
        if v.label == PatientLabel::Covid {
            let f = blobs as f64 / v.slices.len() as f64;
            assert!((MIN_BLOB_FRACTION..=MAX_BLOB_FRACTION).contains(&f), "{}: {f}", v.patient_id);
        } else {
            assert_eq!(blobs, 0);
        }
    }
}

#[test]
fn blob_masks_sit_inside_the_lungs_and_brighten_them() {
    for v in cohort(4, 0, 8, 64, 3) {
        for s in v.slices.iter().filter(|s| s.label == SliceLabel::InfectionEvident) {
            let mask = s.infection_mask.as_ref().unwrap();
            let lung = s.lung_mask.as_ref().unwrap();
            let inside: Vec<usize> = (0..mask.len()).filter(|&i| mask.data()[i] > 0.5).collect();
            assert!(!inside.is_empty());
            assert!(inside.iter().all(|&i| lung.data()[i] > 0.5));
            let mean = |idx: &mut dyn Iterator<Item = usize>| {
                let v: Vec<f32> = idx.map(|i| s.pixels.data()[i]).collect();
                v.iter().sum::<f32>() / v.len() as f32
            };
            let blob = mean(&mut inside.iter().copied());
            let rest = mean(&mut (0..mask.len()).filter(|&i| lung.data()[i] > 0.5 && mask.data()[i] < 0.5));
            assert!(blob > rest + 0.2, "blob {blob} vs lung {rest}");
        }
        for s in &v.slices {
            assert!(s.pixels.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn unsupported_synthetic_size_is_rejected() {
    let cfg = SynthConfig { n_covid: 1, n_noncovid: 1, slices_per_volume: 3, size: 48, seed: 0 };
    assert!(generate_synthetic_cohort(&cfg).is_err());
}

// ---- on-disk volumes ----

#[test]
fn volume_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    for v in cohort(1, 1, 4, 32, 5) {
        let path = dir.path().join(&v.patient_id);
        save_volume(&v, &path).unwrap();
        assert_eq!(load_volume(&path).unwrap(), v);
    }
}

#[test]
fn missing_slice_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let v = &cohort(1, 0, 3, 32, 6)[0];
    save_volume(v, dir.path()).unwrap();
    fs::remove_file(dir.path().join("slice_0001.ctt")).unwrap();
    let err = load_volume(dir.path()).unwrap_err();
    assert!(err.to_string().contains("slice_0001.ctt"), "{err}");
}

#[test]
fn malformed_meta_and_bad_labels_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let v = &cohort(1, 0, 2, 32, 7)[0];
    save_volume(v, dir.path()).unwrap();
    let meta = dir.path().join("meta.txt");
    let good = fs::read_to_string(&meta).unwrap();

    fs::write(&meta, good.replace("label=covid", "label=pneumonia")).unwrap();
    assert!(matches!(load_volume(dir.path()), Err(Error::Format { .. })));

    fs::write(&meta, good.replace("slices=2", "slices=two")).unwrap();
    assert!(matches!(load_volume(dir.path()), Err(Error::Format { .. })));

    fs::write(&meta, format!("{good}this line has no separator\n")).unwrap();
    assert!(matches!(load_volume(dir.path()), Err(Error::Format { .. })));

    fs::write(&meta, good.replace("slice_label.0=infection-evident", "slice_label.0=maybe")
        .replace("slice_label.0=no-evidence", "slice_label.0=maybe")).unwrap();
    assert!(matches!(load_volume(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn cohort_round_trip_keeps_classification_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let volumes = cohort(3, 3, 4, 32, 8);
    save_cohort(dir.path(), &volumes).unwrap();
    let loaded = load_cohort(dir.path()).unwrap();
    assert_eq!(loaded, volumes);
    let model = SliceModel::build(32, 1).unwrap();
    let head = PatientClassifier::build(1);
    for (a, b) in volumes.iter().zip(&loaded) {
        let before = classify_patient(&model, &head, a, 0.5).unwrap();
        let after = classify_patient(&model, &head, b, 0.5).unwrap();
        assert_eq!(before.p_covid.to_bits(), after.p_covid.to_bits());
        assert_eq!(before, after);
    }
}

#[test]
fn split_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let split = split_dataset(&labels(20, 20), 3).unwrap();
    write_split(dir.path(), &split).unwrap();
    assert_eq!(read_split(dir.path()).unwrap(), split);
}

// ---- splitting ----

#[test]
fn split_sizes_within_one_patient_of_60_10_30() {
    for (p, n) in [(5, 5), (20, 20), (13, 29), (50, 50), (3, 40), (70, 31)] {
        let s = split_dataset(&labels(p, n), 0).unwrap();
        let total = (p + n) as f64;
        for (part, frac) in [(&s.train, 0.6), (&s.validation, 0.1), (&s.test, 0.3)] {
            assert!((part.len() as f64 - frac * total).abs() <= 1.0, "{} of {total}", part.len());
        }
    }
    let s = split_dataset(&labels(50, 50), 0).unwrap();
    assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (60, 10, 30));
}

#[test]
fn split_is_a_partition() {
    let cohort = labels(23, 17);
    let s = split_dataset(&cohort, 9).unwrap();
    let mut seen = HashSet::new();
    for id in s.train.iter().chain(&s.validation).chain(&s.test) {
        assert!(seen.insert(id.clone()), "{id} twice");
    }
    assert_eq!(seen.len(), cohort.len());
    for (id, _) in &cohort {
        let parts = [Partition::Train, Partition::Validation, Partition::Test];
        assert_eq!(parts.iter().filter(|&&p| s.ids(p).contains(id)).count(), 1);
        assert!(s.partition_of(id).is_some());
    }
}

#[test]
fn split_is_deterministic_under_seed() {
    let c = labels(20, 20);
    assert_eq!(split_dataset(&c, 4).unwrap(), split_dataset(&c, 4).unwrap());
    assert_ne!(split_dataset(&c, 4).unwrap().train, split_dataset(&c, 5).unwrap().train);
}

#[test]
fn split_is_stratified() {
    for (p, n) in [(15, 15), (20, 20), (10, 25), (40, 60), (33, 67), (120, 80)] {
        for seed in 0..5 {
            let s = split_dataset(&labels(p, n), seed).unwrap();
            let ratio = p as f64 / (p + n) as f64;
            let share = |part: &[String]| {
                part.iter().filter(|id| id[1..].parse::<usize>().unwrap() < p).count()
            };
            for part in [&s.train, &s.validation, &s.test] {
                let k = share(part);
                // per-class count within one patient of proportional
                assert!((k as f64 - ratio * part.len() as f64).abs() <= 1.0);
                // ±10 points wherever one patient is worth less than that
                if part.len() >= 10 {
                    assert!((k as f64 / part.len() as f64 - ratio).abs() <= 0.10, "{p}/{n} seed {seed}");
                }
            }
        }
    }
}

#[test]
fn split_errors() {
    assert!(matches!(split_dataset(&labels(4, 5), 0), Err(Error::Usage(_))));
    assert!(matches!(split_dataset(&labels(2, 20), 0), Err(Error::Stratification(_))));
}

#[test]
fn training_examples_come_only_from_train_patients() {
    let volumes = cohort(6, 6, 5, 32, 10);
    let split = split_dataset(&ids(&volumes), 0).unwrap();
    let examples = labeled_slices(&volumes, &split.train);
    let train_pixels: Vec<*const Tensor> = volumes
        .iter()
        .filter(|v| split.train.contains(&v.patient_id))
        .flat_map(|v| v.slices.iter().map(|s| &s.pixels as *const Tensor))
        .collect();
    assert_eq!(examples.len(), train_pixels.len());
    assert!(examples.iter().all(|e| train_pixels.contains(&(e.pixels as *const Tensor))));
}

// ---- preprocessing ----

#[test]
fn preprocessing_is_idempotent_at_256() {
    let v = &cohort(1, 0, 1, 256, 12)[0];
    let once = preprocess_slice(&v.slices[0].pixels).unwrap();
    let twice = preprocess_slice(&once.pixels).unwrap();
    assert_eq!(once.pixels, twice.pixels);
}

#[test]
fn preprocessing_a_512_slice() {
    let raw = Tensor::from_fn(&[512, 512], |i| (i % 1400) as f32 - 1000.0).unwrap();
    let rec = preprocess_slice(&raw).unwrap();
    assert_eq!(rec.pixels.shape(), &[256, 256]);
    assert!(rec.pixels.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    assert!(preprocess_slice(&Tensor::zeros(&[512, 300])).is_err());
}

#[test]
fn filtering_ten_slices_with_three_empty() {
    let slices: Vec<SliceRecord> = (0..10)
        .map(|i| {
            let value = if [2, 5, 9].contains(&i) { 0.0 } else { 0.1 * (i + 1) as f32 };
            SliceRecord::new(Tensor::full(&[8, 8], value.min(1.0)), SliceLabel::Unlabeled).unwrap()
        })
        .collect();
    let v = SliceVolume::new("P000", slices.clone(), PatientLabel::NonCovid).unwrap();
    let kept = filter_empty_slices(v.clone(), DEFAULT_MIN_LUNG_FRACTION).unwrap();
    let expected: Vec<SliceRecord> =
        slices.iter().enumerate().filter(|(i, _)| ![2, 5, 9].contains(i)).map(|(_, s)| s.clone()).collect();
    assert_eq!(kept.slices, expected);
    assert_eq!(filter_empty_slices(v.clone(), 0.0).unwrap(), v);
}
