use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ctcaps::capsnet::ClassWeights;
use ctcaps::data::{
    labeled_slices, load_cohort, load_volume, save_cohort, split_dataset, write_split, DatasetSplit, PatientLabel,
    SliceRecord, SliceVolume, SynthConfig,
};
use ctcaps::explain::{gradcam, overlay, write_pgm, COVID_CLASS, NON_COVID_CLASS};
use ctcaps::io::{parse_key_values, read_text, write_text};
use ctcaps::metrics::cutoff_sweep;
use ctcaps::model::{
    classify_features, extract_features, train_patient_classifier, train_slice_model, PatientClassifier,
    PatientFeatureMap, SliceModel, Stage, SUPPORTED_INPUT_SIZES,
};
use ctcaps::numerics::{bilinear_resize, ctt, Tensor};

use crate::config::*;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(ctcaps::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl From<ctcaps::Error> for CliError {
    fn from(e: ctcaps::Error) -> Self {
        CliError::Data(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

const SLICE_BUNDLE: &str = "slice";
const PATIENT_BUNDLE: &str = "patient";
const FEATURES_FILE: &str = "features.txt";
const RUN_FILE: &str = "run.txt";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Extract(a) => extract(a),
        Command::Classify(a) => classify(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcam(a) => gradcam_cmd(a),
    }
}

/// Worker count from `CTCAPS_THREADS`, else the available parallelism.
fn thread_budget() -> Result<usize> {
    match std::env::var("CTCAPS_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(config_error(format!("CTCAPS_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Maps `f` over `items` on up to `threads` scoped workers; results keep input order.
fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> ctcaps::Result<R> + Sync,
{
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let chunk = items.len().div_ceil(threads.max(1));
    let parts: Vec<ctcaps::Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<ctcaps::Result<Vec<R>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Resamples a volume's slices (and masks) to `size` when they differ.
fn fit_volume(volume: &SliceVolume, size: usize) -> ctcaps::Result<SliceVolume> {
    if volume.slice_size() == size {
        return Ok(volume.clone());
    }
    let resize = |t: &Tensor, binary: bool| -> ctcaps::Result<Tensor> {
        let r = bilinear_resize(&t.reshape(&[t.len() / t.shape()[t.rank() - 1], t.shape()[t.rank() - 1]])?, size, size)?;
        let data = r.data().iter().map(|&v| if binary { (v >= 0.5) as u8 as f32 } else { v.clamp(0.0, 1.0) }).collect();
        Tensor::new(&[size, size], data)
    };
    let slices = volume
        .slices
        .iter()
        .map(|s| {
            Ok(SliceRecord {
                pixels: resize(&s.pixels, false)?,
                lung_mask: s.lung_mask.as_ref().map(|m| resize(m, true)).transpose()?,
                infection_mask: s.infection_mask.as_ref().map(|m| resize(m, true)).transpose()?,
                label: s.label,
            })
        })
        .collect::<ctcaps::Result<Vec<_>>>()?;
    SliceVolume::new(volume.patient_id.clone(), slices, volume.label)
}

fn cohort_split(ids: &[(String, PatientLabel)], seed: u64) -> Result<DatasetSplit> {
    Ok(split_dataset(ids, seed)?)
}

fn write_run(out: &Path, record: &RunRecord) -> Result<()> {
    Ok(write_text(&out.join(RUN_FILE), record.text())?)
}

fn synth(a: SynthArgs) -> Result<()> {
    check_input_size(a.input_size)?;
    if a.slices == 0 || a.covid + a.non_covid == 0 {
        return Err(config_error("--slices and the patient counts must allow at least one slice"));
    }
    let cfg = SynthConfig {
        n_covid: a.covid,
        n_noncovid: a.non_covid,
        slices_per_volume: a.slices,
        size: a.input_size,
        seed: a.seed,
    };
    let cohort = ctcaps::data::generate_synthetic_cohort(&cfg)?;
    save_cohort(&a.out, &cohort)?;
    let mut rec = RunRecord::new("synth");
    rec.set("out", a.out.display())
        .set("seed", a.seed)
        .set("covid", a.covid)
        .set("non_covid", a.non_covid)
        .set("slices", a.slices)
        .set("input_size", a.input_size);
    write_run(&a.out, &rec)?;
    println!("wrote {} volumes to {}", cohort.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let stages: &[Stage] = match (a.full, a.stage) {
        (true, _) => &[Stage::Slice, Stage::Patient],
        (false, Some(StageArg::Slice)) => &[Stage::Slice],
        (false, Some(StageArg::Patient)) => &[Stage::Patient],
        (false, None) => return Err(config_error("train needs --stage slice|patient or --full")),
    };
    let configs = stages.iter().map(|&s| a.stage_config(s)).collect::<Result<Vec<_>>>()?;
    let mut rec = RunRecord::new("train");
    rec.set("data", a.data.display()).set("out", a.out.display()).set("seed", a.seed);
    for cfg in &configs {
        rec.train(cfg);
    }

    let mut features_dir = a.data.clone();
    for cfg in &configs {
        match cfg.stage {
            Stage::Slice => {
                let cohort = load_cohort(&a.data)?;
                let size = a.input_size.unwrap_or_else(|| cohort[0].slice_size());
                if !SUPPORTED_INPUT_SIZES.contains(&size) {
                    return Err(config_error(format!(
                        "cohort slices are {size}×{size}; pass --input-size with one of {SUPPORTED_INPUT_SIZES:?}"
                    )));
                }
                rec.set("input_size", size);
                let cohort = cohort.iter().map(|v| fit_volume(v, size)).collect::<ctcaps::Result<Vec<_>>>()?;
                let ids: Vec<_> = cohort.iter().map(|v| (v.patient_id.clone(), v.label)).collect();
                let split = cohort_split(&ids, a.seed)?;
                let train = labeled_slices(&cohort, &split.train);
                let val = labeled_slices(&cohort, &split.validation);
                let labels: Vec<bool> = train.iter().map(|e| e.infected).collect();
                let cw = ClassWeights::from_labels(&labels)?;
                let model = SliceModel::build(size, a.seed)?;
                let (model, history) = train_slice_model(model, &train, &val, cfg, &cw)?;
                model.save(&a.out.join(SLICE_BUNDLE))?;
                write_text(&a.out.join("slice_history.csv"), &history.to_csv())?;
                write_split(&a.out, &split)?;
                report_best("slice", &history);
                if a.full {
                    features_dir = a.out.join("features");
                    write_features(&cohort, &model, &features_dir)?;
                }
            }
            Stage::Patient => {
                let features = read_features(&features_dir)?;
                let ids: Vec<_> = features.iter().map(|(id, label, _)| (id.clone(), *label)).collect();
                let split = cohort_split(&ids, a.seed)?;
                let pick = |part: &[String]| -> Vec<(&PatientFeatureMap, bool)> {
                    features.iter().filter(|f| part.contains(&f.0)).map(|f| (&f.2, f.1.is_covid())).collect()
                };
                let head = PatientClassifier::build(a.seed);
                let (head, history) =
                    train_patient_classifier(head, &pick(&split.train), &pick(&split.validation), cfg)?;
                head.save(&a.out.join(PATIENT_BUNDLE))?;
                write_text(&a.out.join("patient_history.csv"), &history.to_csv())?;
                report_best("patient", &history);
            }
        }
    }
    write_run(&a.out, &rec)
}

fn report_best(stage: &str, history: &ctcaps::model::History) {
    if let Some(b) = history.best() {
        println!("{stage}: best validation loss {:.6} at epoch {}", b.val_loss, b.epoch);
    }
}

fn write_features(cohort: &[SliceVolume], model: &SliceModel, out: &Path) -> Result<()> {
    let maps = parallel_map(cohort, thread_budget()?, |v| extract_features(model, v))?;
    let mut manifest = String::from("format=ctcaps-features\nversion=1\n");
    for (v, fm) in cohort.iter().zip(&maps) {
        ctt::write(&out.join(format!("{}.ctt", v.patient_id)), fm.matrix())?;
        writeln!(manifest, "patient.{}={}", v.patient_id, v.label).unwrap();
    }
    Ok(write_text(&out.join(FEATURES_FILE), &manifest)?)
}

fn read_features(dir: &Path) -> Result<Vec<(String, PatientLabel, PatientFeatureMap)>> {
    let path = dir.join(FEATURES_FILE);
    let mut out = Vec::new();
    for (k, v) in parse_key_values(&read_text(&path)?, &path)? {
        let Some(id) = k.strip_prefix("patient.") else { continue };
        let label: PatientLabel = v.parse()?;
        let fm = PatientFeatureMap::new(ctt::read(&dir.join(format!("{id}.ctt")))?)?;
        out.push((id.to_string(), label, fm));
    }
    if out.is_empty() {
        return Err(CliError::Data(ctcaps::Error::Format { path, reason: "lists no patients".into() }));
    }
    Ok(out)
}

fn load_slice_model(model_dir: &Path) -> Result<SliceModel> {
    Ok(SliceModel::load(&model_dir.join(SLICE_BUNDLE))?)
}

fn load_head(model_dir: &Path) -> Result<PatientClassifier> {
    Ok(PatientClassifier::load(&model_dir.join(PATIENT_BUNDLE))?)
}

fn extract(a: ExtractArgs) -> Result<()> {
    let model = load_slice_model(&a.model)?;
    let size = model.arch.input_size;
    let cohort = load_cohort(&a.data)?;
    let cohort = cohort.iter().map(|v| fit_volume(v, size)).collect::<ctcaps::Result<Vec<_>>>()?;
    write_features(&cohort, &model, &a.out)?;
    let mut rec = RunRecord::new("extract");
    rec.set("data", a.data.display()).set("model", a.model.display()).set("out", a.out.display());
    write_run(&a.out, &rec)?;
    println!("wrote {} feature maps to {}", cohort.len(), a.out.display());
    Ok(())
}

fn check_cutoff(cutoff: f64) -> Result<()> {
    if cutoff > 0.0 && cutoff < 1.0 {
        Ok(())
    } else {
        Err(config_error(format!("--cutoff must lie in (0, 1), got {cutoff}")))
    }
}

fn classify(a: ClassifyArgs) -> Result<()> {
    check_cutoff(a.cutoff as f64)?;
    let model = load_slice_model(&a.model)?;
    let head = load_head(&a.model)?;
    let volume = fit_volume(&load_volume(&a.data)?, model.arch.input_size)?;
    let fm = extract_features(&model, &volume)?;
    let c = classify_features(&head, fm, a.cutoff)?;
    let line = format!("{} {} {:.6}", volume.patient_id, c.label, c.p_covid);
    println!("{line}");
    if let Some(out) = &a.out {
        write_text(&out.join("classification.txt"), &format!("{line}\n"))?;
        let mut rec = RunRecord::new("classify");
        rec.set("data", a.data.display()).set("model", a.model.display()).set("cutoff", a.cutoff);
        write_run(out, &rec)?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    for &c in &a.cutoffs {
        if !(0.0..=1.0).contains(&c) {
            return Err(config_error(format!("--cutoffs entries must lie in [0, 1], got {c}")));
        }
    }
    let threads = thread_budget()?;
    let model = load_slice_model(&a.model)?;
    let head = load_head(&a.model)?;
    let cohort = load_cohort(&a.data)?;
    let ids: Vec<_> = cohort.iter().map(|v| (v.patient_id.clone(), v.label)).collect();
    let split = cohort_split(&ids, a.seed)?;
    let test: Vec<&SliceVolume> = cohort.iter().filter(|v| split.test.contains(&v.patient_id)).collect();
    let size = model.arch.input_size;
    let scores = parallel_map(&test, threads, |v| {
        let v = fit_volume(v, size)?;
        Ok(head.patient_forward(&extract_features(&model, &v)?)?.1 as f64)
    })?;
    let truths: Vec<bool> = test.iter().map(|v| v.label.is_covid()).collect();
    let report = cutoff_sweep(&scores, &truths, &a.cutoffs)?;

    let mut scores_csv = String::from("patient_id,label,p_covid\n");
    for (v, s) in test.iter().zip(&scores) {
        writeln!(scores_csv, "{},{},{s}", v.patient_id, v.label).unwrap();
    }
    write_text(&a.out.join("report.csv"), &report.report_csv())?;
    write_text(&a.out.join("auc.txt"), &report.auc_txt())?;
    write_text(&a.out.join("roc.csv"), &report.roc_csv())?;
    write_text(&a.out.join("scores.csv"), &scores_csv)?;
    let cutoffs: Vec<String> = a.cutoffs.iter().map(|c| c.to_string()).collect();
    let mut rec = RunRecord::new("evaluate");
    rec.set("data", a.data.display())
        .set("model", a.model.display())
        .set("out", a.out.display())
        .set("seed", a.seed)
        .set("cutoffs", cutoffs.join(","))
        .set("test_patients", test.len());
    write_run(&a.out, &rec)?;
    print!("{}", report.auc_txt());
    Ok(())
}

fn gradcam_cmd(a: GradcamArgs) -> Result<()> {
    let model = load_slice_model(&a.model)?;
    let volume = fit_volume(&load_volume(&a.data)?, model.arch.input_size)?;
    let target = match a.target {
        TargetArg::Covid => COVID_CLASS,
        TargetArg::NonCovid => NON_COVID_CLASS,
    };
    let threads = thread_budget()?;
    let indexed: Vec<(usize, &SliceRecord)> = volume.slices.iter().enumerate().collect();
    let maps = parallel_map(&indexed, threads, |(i, s)| {
        let mut h = gradcam(&model, &s.pixels, target)?;
        h.source_slice_id = format!("{}/{i}", volume.patient_id);
        Ok(h)
    })?;
    for ((i, s), h) in indexed.iter().zip(&maps) {
        let stem: PathBuf = a.out.join(format!("slice_{i:04}"));
        write_pgm(&stem.with_extension("pgm"), &h.values)?;
        ctt::write(&stem.with_extension("ctt"), &h.values)?;
        let side = overlay(&s.pixels, h)?;
        write_pgm(&a.out.join(format!("slice_{i:04}_overlay.pgm")), &side)?;
    }
    let mut rec = RunRecord::new("gradcam");
    rec.set("data", a.data.display())
        .set("model", a.model.display())
        .set("out", a.out.display())
        .set("target", if target == COVID_CLASS { "covid" } else { "non-covid" });
    write_run(&a.out, &rec)?;
    println!("wrote {} heat maps to {}", maps.len(), a.out.display());
    Ok(())
}
