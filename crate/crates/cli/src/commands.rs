//! Subcommand implementations. Each writes into a staging directory next to
//! its destination and renames it into place only after succeeding.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use planet_core::dataio::{
    self, generate_synthetic, load_dataset_dir, prepare, save_mask_png, save_prob_png,
    DatasetSplit, PreparedSample, MANIFEST_FILE,
};
use planet_core::inference::{predict_dataset, save_prediction, EnsemblePrediction, TtaConfig};
use planet_core::models::{Architecture, EvalModel};
use planet_core::objectives::MetricsRecord;
use planet_core::training::{cross_validate, load_definitive};

use crate::manifest::RunRecorder;
use crate::report::{self, MetricsRow, BASELINE, ENSEMBLE};
use crate::settings::{parse_assignment, Settings};
use crate::{DatagenArgs, EvaluateArgs, InferArgs, PreprocessArgs, ReportArgs, SettingsArgs, Subset, TrainArgs};

pub const SPLIT_FILE: &str = "split.json";
pub const SETTINGS_FILE: &str = "settings.json";

fn resolve(args: &SettingsArgs, flags: &[(&str, Option<String>)]) -> Result<Settings> {
    let mut overrides = args
        .set
        .iter()
        .map(|s| parse_assignment(s))
        .collect::<Result<Vec<_>>>()?;
    overrides.extend(
        flags
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))),
    );
    Settings::resolve(args.config.as_deref(), &overrides)
}

fn staging_path(out: &Path) -> Result<PathBuf> {
    let name = out
        .file_name()
        .with_context(|| format!("output path {} has no final component", out.display()))?;
    let mut staged = std::ffi::OsString::from(".");
    staged.push(name);
    staged.push(format!(".partial-{}", std::process::id()));
    Ok(out.with_file_name(staged))
}

/// Runs `body` against a fresh staging directory, then replaces `out` with it.
/// On failure the staging directory is removed and `out` is left untouched.
fn atomic_output(out: &Path, replace_existing: bool, body: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
    if out.exists() && !replace_existing {
        bail!("output directory {} already exists", out.display());
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let staged = staging_path(out)?;
    if staged.exists() {
        std::fs::remove_dir_all(&staged)?;
    }
    std::fs::create_dir_all(&staged).with_context(|| format!("creating {}", staged.display()))?;
    if let Err(e) = body(&staged) {
        let _ = std::fs::remove_dir_all(&staged);
        return Err(e);
    }
    if out.exists() {
        std::fs::remove_dir_all(out).with_context(|| format!("replacing {}", out.display()))?;
    }
    std::fs::rename(&staged, out).with_context(|| format!("moving output into {}", out.display()))?;
    Ok(out.to_path_buf())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_prepared(data: &Path) -> Result<Vec<PreparedSample>> {
    ensure!(
        data.join(MANIFEST_FILE).is_file(),
        "{} has no {MANIFEST_FILE}",
        data.display()
    );
    let samples = load_dataset_dir(data).with_context(|| format!("loading dataset {}", data.display()))?;
    ensure!(!samples.is_empty(), "dataset {} is empty", data.display());
    Ok(prepare(&samples)?)
}

pub fn cmd_datagen(args: &DatagenArgs) -> Result<PathBuf> {
    let settings = resolve(&args.settings, &[("seed", args.seed.map(|s| s.to_string()))])?;
    let seed = settings.seed()?;
    ensure!(args.patients >= 2, "datagen needs at least 2 patients, got {}", args.patients);
    let mut config = settings.snapshot();
    config.insert("patients".into(), args.patients.to_string());
    let recorder = RunRecorder::start("datagen", config, vec![], seed);
    atomic_output(&args.out, true, |dir| {
        let rows = generate_synthetic(args.patients, seed, dir)?;
        log::info!("wrote {} slices for {} patients", rows.len(), args.patients);
        recorder.finish(dir)?;
        Ok(())
    })
}

pub fn cmd_preprocess(args: &PreprocessArgs) -> Result<PathBuf> {
    let settings = resolve(
        &args.settings,
        &[
            ("seed", args.seed.map(|s| s.to_string())),
            ("test_fraction", args.test_fraction.map(|f| f.to_string())),
        ],
    )?;
    let seed = settings.seed()?;
    let prepared = load_prepared(&args.data)?;
    let split = split_prepared(&prepared, settings.test_fraction()?, seed)?;
    let recorder = RunRecorder::start("preprocess", settings.snapshot(), vec![args.data.clone()], seed);
    atomic_output(&args.out, true, |dir| {
        for s in &prepared {
            let base = dir.join(&s.id);
            std::fs::create_dir_all(base.parent().expect("ids have a patient component"))?;
            let with = |suffix: &str| PathBuf::from(format!("{}{suffix}", base.display()));
            save_prob_png(&s.canvas.image, &with("_image.png"))?;
            save_mask_png(&s.canvas.mask, &with("_mask.png"))?;
            write_json(&with(".json"), &s.canvas.geometry(s.source_size))?;
        }
        write_json(&dir.join(SPLIT_FILE), &split)?;
        log::info!(
            "standardized {} slices; {} train / {} test patients",
            prepared.len(),
            split.train_patients.len(),
            split.test_patients.len()
        );
        recorder.finish(dir)?;
        Ok(())
    })
}

fn default_run_id(arch: Architecture) -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("run-{secs}-{}", arch.tag())
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let arch: Architecture = args.arch.parse()?;
    let settings = resolve(
        &args.settings,
        &[
            ("seed", args.seed.map(|s| s.to_string())),
            ("folds", args.folds.map(|k| k.to_string())),
            ("epochs", args.epochs.map(|e| e.to_string())),
        ],
    )?;
    let seed = settings.seed()?;
    let config = settings.train_config(arch)?;
    let k = settings.folds()?;
    let prepared = load_prepared(&args.data)?;
    let split = split_prepared(&prepared, settings.test_fraction()?, seed)?;
    let (train, _) = split.partition(&prepared, |s| &s.patient_id);
    let train: Vec<PreparedSample> = train.into_iter().cloned().collect();
    ensure!(
        split.train_patients.len() >= k,
        "{} training patients cannot fill {k} folds",
        split.train_patients.len()
    );

    let run_id = args.run_id.clone().unwrap_or_else(|| default_run_id(arch));
    let run_dir = args.runs_root.join(run_id);
    let mut snapshot = settings.snapshot();
    snapshot.insert("arch".into(), arch.tag().into());
    let recorder = RunRecorder::start("train", snapshot, vec![args.data.clone()], seed);
    atomic_output(&run_dir, false, |dir| {
        write_json(&dir.join(SPLIT_FILE), &split)?;
        write_json(&dir.join(SETTINGS_FILE), &settings.snapshot())?;
        log::info!(
            "training {arch} on {} slices from {} patients, {k} folds",
            train.len(),
            split.train_patients.len()
        );
        let outcome = cross_validate(&config, &train, k, Some(dir))?;
        log::info!(
            "definitive fold {} (validation IoU {:.4})",
            outcome.definitive_fold,
            outcome.folds[outcome.definitive_fold].val_iou
        );
        recorder.finish(dir)?;
        Ok(())
    })
}

fn split_prepared(prepared: &[PreparedSample], test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    let patients: BTreeSet<String> = prepared.iter().map(|s| s.patient_id.clone()).collect();
    Ok(dataio::split_patients(patients, test_fraction, seed)?)
}

/// Loads the definitive checkpoint of a run and checks its architecture.
fn load_run_model(run_dir: &Path, expected: Architecture) -> Result<EvalModel> {
    let (_, model) = load_definitive(run_dir).with_context(|| format!("loading run {}", run_dir.display()))?;
    ensure!(
        model.card.architecture == expected,
        "run {} holds a {} checkpoint, expected {expected}",
        run_dir.display(),
        model.card.architecture
    );
    Ok(model)
}

/// The split shared by both training runs.
fn shared_split(unet_run: &Path, segnext_run: &Path) -> Result<DatasetSplit> {
    let a: DatasetSplit = read_json(&unet_run.join(SPLIT_FILE))?;
    let b: DatasetSplit = read_json(&segnext_run.join(SPLIT_FILE))?;
    ensure!(
        a == b,
        "the two runs were trained on different patient splits; evaluating them together would leak test patients"
    );
    ensure!(
        a.train_patients.is_disjoint(&a.test_patients),
        "split file lists patients on both sides"
    );
    Ok(a)
}

fn ensemble_inputs(
    unet_run: &Path,
    segnext_run: &Path,
    data: &Path,
) -> Result<(EvalModel, EvalModel, DatasetSplit, Vec<PreparedSample>)> {
    let unet = load_run_model(unet_run, Architecture::Unet)?;
    let segnext = load_run_model(segnext_run, Architecture::SegnextS)?;
    let split = shared_split(unet_run, segnext_run)?;
    let prepared = load_prepared(data)?;
    Ok((unet, segnext, split, prepared))
}

fn tta_settings(
    settings: &SettingsArgs,
    seed: Option<u64>,
    n_variants: Option<usize>,
    threshold: Option<f64>,
) -> Result<Settings> {
    resolve(
        settings,
        &[
            ("seed", seed.map(|s| s.to_string())),
            ("n_variants", n_variants.map(|n| n.to_string())),
            ("threshold", threshold.map(|t| t.to_string())),
        ],
    )
}

fn predict_all(
    unet: &EvalModel,
    segnext: &EvalModel,
    samples: &[PreparedSample],
    tta: &TtaConfig,
) -> Result<Vec<(String, EnsemblePrediction)>> {
    log::info!(
        "predicting {} images with {} variants per model",
        samples.len(),
        tta.n_variants
    );
    Ok(predict_dataset(unet, segnext, samples, tta)?)
}

pub fn cmd_infer(args: &InferArgs) -> Result<PathBuf> {
    let settings = tta_settings(&args.settings, args.seed, args.n_variants, args.threshold)?;
    let tta = settings.tta_config()?;
    let (unet, segnext, split, prepared) = ensemble_inputs(&args.unet, &args.segnext, &args.data)?;
    let samples: Vec<PreparedSample> = match args.subset {
        Subset::All => prepared,
        Subset::Test => prepared.into_iter().filter(|s| split.is_test(&s.patient_id)).collect(),
    };
    ensure!(!samples.is_empty(), "no images selected for inference");
    let recorder = RunRecorder::start(
        "infer",
        settings.snapshot(),
        vec![args.unet.clone(), args.segnext.clone(), args.data.clone()],
        tta.seed,
    );
    let preds = predict_all(&unet, &segnext, &samples, &tta)?;
    atomic_output(&args.out, true, |dir| {
        for (id, pred) in &preds {
            save_prediction(dir, id, pred, &tta.with_seed(pred.seed))?;
        }
        recorder.finish(dir)?;
        Ok(())
    })
}

/// Per-image rows for both systems. The U-Net arm of the ensemble is exactly
/// single-model U-Net TTA under the same per-image seed, so its mask is the
/// baseline prediction.
pub fn metrics_rows(
    samples: &[PreparedSample],
    preds: &[(String, EnsemblePrediction)],
    settings: &Settings,
) -> Result<Vec<MetricsRow>> {
    let conn = settings.connectivity()?;
    let mut ensemble = Vec::with_capacity(samples.len());
    let mut baseline = Vec::with_capacity(samples.len());
    for (s, (id, pred)) in samples.iter().zip(preds) {
        ensure!(*id == s.id, "prediction order does not match the inputs");
        let truth = &s.canvas.mask;
        ensemble.push(MetricsRow::new(ENSEMBLE, MetricsRecord::compute(id, &pred.final_mask, truth, conn)?));
        baseline.push(MetricsRow::new(BASELINE, MetricsRecord::compute(id, &pred.masks[0], truth, conn)?));
    }
    ensemble.extend(baseline);
    Ok(ensemble)
}

fn write_report(dir: &Path, rows: &[MetricsRow]) -> Result<report::Summary> {
    let summary = report::summarize(rows)?;
    write_json(&dir.join(report::SUMMARY_FILE), &summary)?;
    report::iou_boxplot(&dir.join(report::BOXPLOT_FILE), rows)?;
    report::ccc_histogram(&dir.join(report::HISTOGRAM_FILE), rows)?;
    Ok(summary)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<PathBuf> {
    let settings = tta_settings(&args.settings, args.seed, args.n_variants, args.threshold)?;
    let tta = settings.tta_config()?;
    let (unet, segnext, split, prepared) = ensemble_inputs(&args.unet, &args.segnext, &args.data)?;
    let test: Vec<PreparedSample> = prepared.into_iter().filter(|s| split.is_test(&s.patient_id)).collect();
    let found: BTreeSet<&str> = test.iter().map(|s| s.patient_id.as_str()).collect();
    ensure!(
        found.len() == split.test_patients.len(),
        "dataset {} lacks {} of the {} held-out patients",
        args.data.display(),
        split.test_patients.len() - found.len(),
        split.test_patients.len()
    );
    let recorder = RunRecorder::start(
        "evaluate",
        settings.snapshot(),
        vec![args.unet.clone(), args.segnext.clone(), args.data.clone()],
        tta.seed,
    );
    let preds = predict_all(&unet, &segnext, &test, &tta)?;
    let rows = metrics_rows(&test, &preds, &settings)?;
    atomic_output(&args.out, true, |dir| {
        let pred_dir = dir.join("predictions");
        let base_dir = dir.join("baseline");
        for (id, pred) in &preds {
            save_prediction(&pred_dir, id, pred, &tta.with_seed(pred.seed))?;
            let path = base_dir.join(format!("{id}_mask.png"));
            std::fs::create_dir_all(path.parent().expect("has parent"))?;
            save_mask_png(&pred.masks[0], &path)?;
        }
        report::write_metrics(&dir.join(report::METRICS_FILE), &rows)?;
        let summary = write_report(dir, &rows)?;
        for (name, s) in &summary.systems {
            log::info!(
                "{name}: mean IoU {:.4} (sd {:.4}), CC match {}/{}",
                s.mean_iou,
                s.sd_iou,
                s.ccc_match_count,
                s.n
            );
        }
        recorder.finish(dir)?;
        Ok(())
    })
}

pub fn cmd_report(args: &ReportArgs) -> Result<PathBuf> {
    let metrics = std::fs::canonicalize(&args.metrics)
        .with_context(|| format!("resolving {}", args.metrics.display()))?;
    if let Ok(out) = std::fs::canonicalize(&args.out) {
        ensure!(
            !metrics.starts_with(out),
            "report output {} would replace the directory holding its input",
            args.out.display()
        );
    }
    let rows = report::read_metrics(&metrics)?;
    let recorder = RunRecorder::start("report", Default::default(), vec![args.metrics.clone()], 0);
    atomic_output(&args.out, true, |dir| {
        write_report(dir, &rows)?;
        recorder.finish(dir)?;
        Ok(())
    })
}
