use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ctcaps::data::{generate_synthetic_cohort, save_volume, SynthConfig};
use ctcaps::model::{PatientClassifier, SliceModel};
use ctcaps::numerics::Tensor;

fn ctcaps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctcaps"))
        .args(args)
        .env("CTCAPS_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ctcaps(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ctcaps(args).status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model, features) = (tmp.path().join("data"), tmp.path().join("model"), tmp.path().join("features"));
    ok(&["synth", "--out", s(&data), "--slices", "5", "--input-size", "32"]);
    assert_eq!(fs::read_dir(&data).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count(), 40);

    let train = ["train", "--data", s(&data), "--out", s(&model), "--lr", "1e-3"];
    ok(&[&train[..], &["--stage", "slice", "--epochs", "3"]].concat());
    for f in ["slice/manifest.txt", "slice_history.csv", "split.txt", "run.txt"] {
        assert!(model.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(model.join("slice_history.csv")).unwrap().lines().count(), 4);

    ok(&["extract", "--data", s(&data), "--model", s(&model), "--out", s(&features)]);
    assert!(features.join("P000.ctt").exists());
    ok(&["train", "--data", s(&features), "--out", s(&model), "--stage", "patient", "--epochs", "30"]);
    assert!(model.join("patient/manifest.txt").exists());

    let line = ok(&["classify", "--data", s(&data.join("P000")), "--model", s(&model)]);
    let fields: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(fields[0], "P000");
    assert!(["covid", "non-covid"].contains(&fields[1]));
    let p: f64 = fields[2].parse().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let (e1, e2) = (tmp.path().join("eval1"), tmp.path().join("eval2"));
    ok(&["evaluate", "--data", s(&data), "--model", s(&model), "--out", s(&e1)]);
    ok(&["evaluate", "--data", s(&data), "--model", s(&model), "--out", s(&e2)]);
    for f in ["report.csv", "auc.txt", "roc.csv", "scores.csv"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f}");
    }
    let report = fs::read_to_string(e1.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 6);
    assert_eq!(fs::read_to_string(e1.join("scores.csv")).unwrap().lines().count(), 13);
    assert!(fs::read_to_string(e1.join("run.txt")).unwrap().contains("command=evaluate"));

    let heat = tmp.path().join("heat");
    ok(&["gradcam", "--data", s(&data.join("P000")), "--model", s(&model), "--out", s(&heat)]);
    for i in 0..5 {
        assert!(heat.join(format!("slice_{i:04}.pgm")).exists());
        assert!(heat.join(format!("slice_{i:04}_overlay.pgm")).exists());
    }
    assert!(fs::read(heat.join("slice_0000.pgm")).unwrap().starts_with(b"P5\n32 32\n255\n"));
}

#[test]
fn full_training_in_one_command() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = (tmp.path().join("data"), tmp.path().join("model"));
    ok(&["synth", "--out", s(&data), "--covid", "6", "--non-covid", "6", "--slices", "3", "--input-size", "32"]);
    ok(&["train", "--data", s(&data), "--out", s(&model), "--full", "--epochs", "1"]);
    for f in ["slice/manifest.txt", "patient/manifest.txt", "features/features.txt", "patient_history.csv"] {
        assert!(model.join(f).exists(), "{f}");
    }
    let run = fs::read_to_string(model.join("run.txt")).unwrap();
    assert!(run.contains("command=train") && run.contains("seed=0"), "{run}");
}

#[test]
fn cutoff_moves_a_borderline_patient() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("model");
    SliceModel::build(32, 0).unwrap().save(&model.join("slice")).unwrap();
    let mut head = PatientClassifier::zeros();
    head.biases[3] = Tensor::new(&[2], vec![0.0, (0.55f64 / 0.45).ln() as f32]).unwrap();
    head.save(&model.join("patient")).unwrap();
    let cfg = SynthConfig { n_covid: 1, n_noncovid: 0, slices_per_volume: 2, size: 32, seed: 0 };
    let volume = generate_synthetic_cohort(&cfg).unwrap().remove(0);
    let dir = tmp.path().join("volume");
    save_volume(&volume, &dir).unwrap();

    let at = |cutoff: &str| ok(&["classify", "--data", s(&dir), "--model", s(&model), "--cutoff", cutoff]);
    assert_eq!(at("0.5").trim(), "P000 covid 0.550000");
    assert_eq!(at("0.6").trim(), "P000 non-covid 0.550000");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    // configuration errors
    assert_eq!(code(&["train", "--data", s(&missing)]), 2);
    assert_eq!(code(&["bogus"]), 2);
    assert_eq!(code(&["classify", "--data", s(&missing), "--model", s(&missing), "--cutoff", "1.5"]), 2);
    assert_eq!(code(&["synth", "--out", s(&missing), "--input-size", "48"]), 2);
    assert_eq!(code(&["--help"]), 0);
    // data errors
    assert_eq!(code(&["classify", "--data", s(&missing), "--model", s(&missing)]), 3);
    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--covid", "5", "--non-covid", "5", "--slices", "2", "--input-size", "32"]);
    fs::remove_file(data.join("P003/slice_0001.ctt")).unwrap();
    let out = ctcaps(&["train", "--data", s(&data), "--out", s(&tmp.path().join("m")), "--stage", "slice"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("slice_0001.ctt"));
}
