//! End-to-end study orchestration.
//!
//! Stages: generate data -> pretrain -> sweep -> select -> build synthetic
//! sets -> per-config detection -> three-regime study -> correlate -> report.
//! Every stage writes a manifest under `manifests/`; reruns with `resume`
//! skip stages whose manifest exists. All stage seeds fan out from the
//! config's top-level seed via the documented hash in [`crate::seed`].

mod config;

pub use config::{
    DetectorStageConfig, PipelineConfig, PretrainConfig, RegimesConfig, SweepStageConfig,
    WorldConfig, CONFIG_VERSION,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_synthetic_detection_set, load_split, make_splits, merge_sets, prefix_ids,
    read_split_manifest, sha256_file, toy_world_generate, verify_dataset_disjoint, write_split,
    Regime, SynthOptions, TrainingSetEntry,
};
use crate::detect::{repeat_eval, train_and_eval, DetectionMetrics, LabeledImage, MeanStd};
use crate::error::{Error, Result};
use crate::flow::{eval_loss, pretrain_base, save_loss_curve, FlowModel, PretrainOptions};
use crate::img::Image;
use crate::lora::LoraSet;
use crate::seed::derive_seed;
use crate::stats::CorrelationReport;
use crate::sweep::{
    grid, run_sweep, select_best, LoraConfig, RecordStatus, SweepOptions, SweepResult,
};

/// Instruction embedding roles: index 0 is the pre-training reconstruction
/// instruction, index 1 the cross-spectral translation instruction.
pub const PRETRAIN_INSTRUCTION: usize = 0;
pub const TRANSLATE_INSTRUCTION: usize = 1;

pub const STAGES: [&str; 8] = [
    "gen-data",
    "pretrain",
    "sweep",
    "select",
    "build-synth",
    "detect-configs",
    "regimes",
    "correlate",
];

/// Provenance record written by every pipeline stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub timestamp_unix: u64,
    pub tool_version: String,
}

pub fn manifest_path(out_dir: &Path, stage: &str) -> PathBuf {
    out_dir.join("manifests").join(format!("{stage}.json"))
}

pub fn write_manifest(
    out_dir: &Path,
    stage: &str,
    config: &PipelineConfig,
    seed: u64,
    input_hashes: BTreeMap<String, String>,
    outputs: Vec<String>,
) -> Result<RunManifest> {
    let manifest = RunManifest {
        command: stage.to_string(),
        config: serde_json::to_value(config)?,
        input_hashes,
        outputs,
        seed,
        timestamp_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = manifest_path(out_dir, stage);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(out_dir: &Path, stage: &str) -> Result<RunManifest> {
    let path = manifest_path(out_dir, stage);
    let bytes = std::fs::read(&path)
        .map_err(|_| Error::Validation(format!("missing manifest for stage {stage}")))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn stage_done(out_dir: &Path, stage: &str) -> bool {
    manifest_path(out_dir, stage).exists()
}

// ---------------------------------------------------------------------------
// data plumbing

fn data_root(out_dir: &Path) -> PathBuf {
    out_dir.join("data")
}

/// (source, target) image pairs of a split, for flow training.
fn load_pairs(out_dir: &Path, split: &str) -> Result<Vec<(Image, Image)>> {
    let samples = load_split(&data_root(out_dir), split)?;
    samples
        .into_iter()
        .map(|s| {
            let target = s.target.ok_or_else(|| {
                Error::Validation(format!("sample {} in {split} has no target image", s.id))
            })?;
            Ok((s.source, target))
        })
        .collect()
}

/// (id, source, target) triples for validation scoring.
fn load_val_triples(out_dir: &Path, split: &str) -> Result<Vec<(String, Image, Image)>> {
    let samples = load_split(&data_root(out_dir), split)?;
    samples
        .into_iter()
        .map(|s| {
            let target = s.target.ok_or_else(|| {
                Error::Validation(format!("sample {} in {split} has no target image", s.id))
            })?;
            Ok((s.id, s.source, target))
        })
        .collect()
}

fn labeled_image_from_paths(id: &str, image_path: &Path, labels_path: &Path) -> Result<LabeledImage> {
    let image = Image::load_png(image_path)?;
    let text = std::fs::read_to_string(labels_path)?;
    let boxes = crate::detect::parse_labels(&text, image.width as f64, image.height as f64)?;
    Ok(LabeledImage { id: id.to_string(), image, boxes })
}

/// Target-modality detector set of a dataset split.
fn load_target_labeled(out_dir: &Path, split: &str) -> Result<Vec<LabeledImage>> {
    let root = data_root(out_dir);
    let manifest = read_split_manifest(&root, split)?;
    manifest
        .ids
        .iter()
        .map(|id| {
            labeled_image_from_paths(
                id,
                &root.join(split).join("target").join(format!("{id}.png")),
                &root.join(split).join("labels").join(format!("{id}.txt")),
            )
        })
        .collect()
}

fn load_entries(entries: &[TrainingSetEntry]) -> Result<Vec<LabeledImage>> {
    entries.iter().map(|e| labeled_image_from_paths(&e.id, &e.image, &e.labels)).collect()
}

fn entries_for_split(out_dir: &Path, split: &str, take: Option<usize>) -> Result<Vec<TrainingSetEntry>> {
    let root = data_root(out_dir);
    let manifest = read_split_manifest(&root, split)?;
    let ids: Vec<&String> = match take {
        Some(n) => manifest.ids.iter().take(n).collect(),
        None => manifest.ids.iter().collect(),
    };
    Ok(ids
        .into_iter()
        .map(|id| TrainingSetEntry {
            id: id.clone(),
            image: root.join(split).join("target").join(format!("{id}.png")),
            labels: root.join(split).join("labels").join(format!("{id}.txt")),
        })
        .collect())
}

fn entries_for_synth(out_dir: &Path, config_id: &str) -> Result<Vec<TrainingSetEntry>> {
    let dir = out_dir.join("synth").join(config_id);
    let manifest: crate::data::SynthManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    Ok(manifest
        .entries
        .iter()
        .map(|e| TrainingSetEntry {
            id: e.source_id.clone(),
            image: dir.join("target").join(format!("{}.png", e.source_id)),
            labels: dir.join("labels").join(format!("{}.txt", e.source_id)),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// stages

/// Generate the toy world and write the five dataset splits.
pub fn stage_gen_data(config: &PipelineConfig, out_dir: &Path, resume: bool) -> Result<()> {
    if resume && stage_done(out_dir, "gen-data") {
        return Ok(());
    }
    let world_seed = derive_seed(config.seed, "world");
    let spec = config.world.to_spec(world_seed);
    let n = config.splits.total();
    let samples = toy_world_generate(&spec, n);
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let splits = make_splits(&ids, &config.splits, derive_seed(config.seed, "splits"))?;
    let by_id: BTreeMap<&String, &crate::data::PairedSample> =
        samples.iter().map(|s| (&s.id, s)).collect();
    let root = data_root(out_dir);
    let mut outputs = Vec::new();
    for split in crate::data::SPLIT_NAMES {
        let split_samples: Vec<crate::data::PairedSample> = splits
            .get(split)
            .expect("known split")
            .iter()
            .map(|id| (*by_id.get(id).expect("generated id")).clone())
            .collect();
        let manifest = write_split(&root, split, &split_samples)?;
        outputs.push(format!("data/{split}"));
        drop(manifest);
    }
    verify_dataset_disjoint(&root)?;
    write_manifest(out_dir, "gen-data", config, world_seed, BTreeMap::new(), outputs)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub holdout_loss_before: f32,
    pub holdout_loss_after: f32,
    pub steps: u64,
}

pub fn base_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("pretrain").join("base.ckpt")
}

/// Pre-train the base generator on a separate source-style corpus with the
/// identity-editing pretext; holds out a slice for before/after loss.
pub fn stage_pretrain(config: &PipelineConfig, out_dir: &Path, resume: bool) -> Result<FlowModel> {
    let ckpt_path = base_checkpoint_path(out_dir);
    if resume && stage_done(out_dir, "pretrain") && ckpt_path.exists() {
        return FlowModel::load_file(&ckpt_path);
    }
    let seed = derive_seed(config.seed, "pretrain");
    let spec = config.world.to_spec(derive_seed(config.seed, "pretrain_world"));
    let corpus: Vec<Image> =
        toy_world_generate(&spec, config.pretrain.images).into_iter().map(|s| s.source).collect();
    let holdout_n = (corpus.len() / 10).max(4).min(corpus.len() / 2);
    let (train_corpus, holdout) = corpus.split_at(corpus.len() - holdout_n);
    let holdout_pairs: Vec<(Image, Image)> =
        holdout.iter().map(|im| (im.clone(), im.clone())).collect();

    let opts = PretrainOptions {
        steps: config.pretrain.steps,
        learning_rate: config.pretrain.learning_rate,
        seed,
        instruction: PRETRAIN_INSTRUCTION,
    };
    let fresh = FlowModel::init(&config.model, seed)?;
    let loss_before =
        eval_loss(&fresh, None, &holdout_pairs, PRETRAIN_INSTRUCTION, derive_seed(seed, "eval"))?;
    let (model, curve) = pretrain_base(train_corpus, &config.model, &opts)?;
    let loss_after =
        eval_loss(&model, None, &holdout_pairs, PRETRAIN_INSTRUCTION, derive_seed(seed, "eval"))?;

    model.save_file(&ckpt_path)?;
    save_loss_curve(&out_dir.join("pretrain").join("loss.csv"), &curve)?;
    let summary =
        PretrainSummary { holdout_loss_before: loss_before, holdout_loss_after: loss_after, steps: opts.steps };
    std::fs::write(
        out_dir.join("pretrain").join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    let mut hashes = BTreeMap::new();
    hashes.insert("base.ckpt".to_string(), sha256_file(&ckpt_path)?);
    write_manifest(
        out_dir,
        "pretrain",
        config,
        seed,
        hashes,
        vec!["pretrain/base.ckpt".into(), "pretrain/loss.csv".into(), "pretrain/summary.json".into()],
    )?;
    Ok(model)
}

/// The sweep's configuration list after the optional id filter.
pub fn sweep_configs(config: &PipelineConfig) -> Result<Vec<LoraConfig>> {
    let full = grid(config.sweep.profile);
    match &config.sweep.config_ids {
        None => Ok(full),
        Some(ids) => {
            let filtered: Vec<LoraConfig> =
                full.into_iter().filter(|c| ids.contains(&c.id)).collect();
            if filtered.len() != ids.len() {
                return Err(Error::Config(format!(
                    "sweep.config_ids contains unknown ids (matched {}/{})",
                    filtered.len(),
                    ids.len()
                )));
            }
            Ok(filtered)
        }
    }
}

pub fn sweep_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("sweep")
}

pub fn stage_sweep(
    config: &PipelineConfig,
    out_dir: &Path,
    base: &FlowModel,
    resume: bool,
) -> Result<SweepResult> {
    let opts = SweepOptions {
        out_dir: sweep_dir(out_dir),
        seed: derive_seed(config.seed, "sweep"),
        translate_steps: config.sweep.translate_steps,
        instruction: TRANSLATE_INSTRUCTION,
        workers: config.sweep.workers,
        lpips_extractor_seed: config.lpips_extractor_seed,
        limit: None,
    };
    if resume && stage_done(out_dir, "sweep") {
        let records = crate::sweep::read_results(&opts.results_path())?;
        return Ok(SweepResult { records });
    }
    let sensor_sample = load_pairs(out_dir, "sensor_sample")?;
    let sensor_val = load_val_triples(out_dir, "sensor_val")?;
    let configs = sweep_configs(config)?;
    let result = run_sweep(base, &sensor_sample, &sensor_val, &configs, &opts)?;
    let mut hashes = BTreeMap::new();
    let base_path = base_checkpoint_path(out_dir);
    if base_path.exists() {
        hashes.insert("base.ckpt".to_string(), sha256_file(&base_path)?);
    }
    write_manifest(
        out_dir,
        "sweep",
        config,
        opts.seed,
        hashes,
        vec!["sweep".into()],
    )?;
    Ok(result)
}

pub fn selected_path(out_dir: &Path) -> PathBuf {
    out_dir.join("select").join("selected.json")
}

pub fn stage_select(
    config: &PipelineConfig,
    out_dir: &Path,
    result: &SweepResult,
    resume: bool,
) -> Result<LoraConfig> {
    let path = selected_path(out_dir);
    if resume && stage_done(out_dir, "select") && path.exists() {
        return Ok(serde_json::from_slice(&std::fs::read(&path)?)?);
    }
    let selected = select_best(result)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, serde_json::to_string_pretty(&selected)?)?;
    write_manifest(
        out_dir,
        "select",
        config,
        config.seed,
        BTreeMap::new(),
        vec!["select/selected.json".into()],
    )?;
    Ok(selected)
}

/// Translate the train split once per successful configuration.
pub fn stage_build_synth(
    config: &PipelineConfig,
    out_dir: &Path,
    base: &FlowModel,
    result: &SweepResult,
    resume: bool,
) -> Result<()> {
    if resume && stage_done(out_dir, "build-synth") {
        return Ok(());
    }
    let train_dir = data_root(out_dir).join("train");
    let mut outputs = Vec::new();
    for record in result.records.iter().filter(|r| r.status == RecordStatus::Ok) {
        let adapter_path = record
            .adapter_path
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("record {} has no adapter", record.config.id)))?;
        let lora = LoraSet::load_file(Path::new(adapter_path))?;
        let synth_out = out_dir.join("synth").join(&record.config.id);
        let opts = SynthOptions {
            adapter_id: record.config.id.clone(),
            steps: config.sweep.translate_steps,
            base_seed: derive_seed(config.seed, &format!("synth/{}", record.config.id)),
            instruction: TRANSLATE_INSTRUCTION,
        };
        build_synthetic_detection_set(base, &lora, &train_dir, &synth_out, &opts)?;
        outputs.push(format!("synth/{}", record.config.id));
    }
    write_manifest(out_dir, "build-synth", config, config.seed, BTreeMap::new(), outputs)?;
    Ok(())
}

fn eval_seeds(config: &PipelineConfig) -> Vec<u64> {
    (0..config.detector.eval_seeds)
        .map(|i| derive_seed(config.seed, &format!("detect/run{i}")))
        .collect()
}

pub fn detect_configs_path(out_dir: &Path) -> PathBuf {
    out_dir.join("detect").join("configs.json")
}

/// Train detectors on each configuration's synthetic train set (five seeds)
/// and evaluate on the real test split.
pub fn stage_detect_configs(
    config: &PipelineConfig,
    out_dir: &Path,
    result: &SweepResult,
    resume: bool,
) -> Result<BTreeMap<String, DetectionMetrics>> {
    let path = detect_configs_path(out_dir);
    if resume && stage_done(out_dir, "detect-configs") && path.exists() {
        return Ok(serde_json::from_slice(&std::fs::read(&path)?)?);
    }
    let test_set = load_target_labeled(out_dir, "test")?;
    let det_config = config.detector_config();
    let seeds = eval_seeds(config);
    let ok_ids: Vec<String> = result
        .records
        .iter()
        .filter(|r| r.status == RecordStatus::Ok)
        .map(|r| r.config.id.clone())
        .collect();

    let metrics: Vec<(String, DetectionMetrics)> = ok_ids
        .par_iter()
        .map(|id| -> Result<(String, DetectionMetrics)> {
            let entries = entries_for_synth(out_dir, id)?;
            let train_set = load_entries(&entries)?;
            let m = repeat_eval(&seeds, |seed| {
                train_and_eval(&train_set, &test_set, &det_config, config.detector.epochs, seed)
            })?;
            Ok((id.clone(), m))
        })
        .collect::<Result<_>>()?;

    let map: BTreeMap<String, DetectionMetrics> = metrics.into_iter().collect();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, serde_json::to_string_pretty(&map)?)?;
    write_manifest(
        out_dir,
        "detect-configs",
        config,
        config.seed,
        BTreeMap::new(),
        vec!["detect/configs.json".into()],
    )?;
    Ok(map)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeReport {
    pub regime: String,
    pub n_real: usize,
    pub n_synth: usize,
    pub map50: MeanStd,
    pub map5095: MeanStd,
    pub runs: usize,
}

pub fn regimes_path(out_dir: &Path) -> PathBuf {
    out_dir.join("regimes").join("regimes.json")
}

/// Real-only / synthetic-only / real+synthetic study using the selected
/// adapter's synthetic train set.
pub fn stage_regimes(
    config: &PipelineConfig,
    out_dir: &Path,
    selected: &LoraConfig,
    resume: bool,
) -> Result<Vec<RegimeReport>> {
    let path = regimes_path(out_dir);
    if resume && stage_done(out_dir, "regimes") && path.exists() {
        return Ok(serde_json::from_slice(&std::fs::read(&path)?)?);
    }
    let real = entries_for_split(out_dir, "train", Some(config.regimes.real_count))?;
    let synth = prefix_ids(&entries_for_synth(out_dir, &selected.id)?, "synth_");
    let test_set = load_target_labeled(out_dir, "test")?;
    let det_config = config.detector_config();
    let seeds = eval_seeds(config);

    let regimes = [Regime::RealOnly, Regime::SynthOnly, Regime::RealPlusSynth];
    let reports: Vec<RegimeReport> = regimes
        .par_iter()
        .map(|&regime| -> Result<RegimeReport> {
            let merged = merge_sets(&real, &synth, regime)?;
            let train_set = load_entries(&merged.entries)?;
            let m = repeat_eval(&seeds, |seed| {
                train_and_eval(&train_set, &test_set, &det_config, config.detector.epochs, seed)
            })?;
            Ok(RegimeReport {
                regime: merged.regime,
                n_real: merged.n_real,
                n_synth: merged.n_synth,
                map50: m.map50,
                map5095: m.map5095,
                runs: m.runs,
            })
        })
        .collect::<Result<_>>()?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, serde_json::to_string_pretty(&reports)?)?;
    write_manifest(
        out_dir,
        "regimes",
        config,
        config.seed,
        BTreeMap::new(),
        vec!["regimes/regimes.json".into()],
    )?;
    Ok(reports)
}

pub fn correlation_path(out_dir: &Path) -> PathBuf {
    out_dir.join("correlate").join("correlation.json")
}

/// Correlation CSV in the figure's encoding: one row per configuration.
pub fn correlation_csv(report: &CorrelationReport, configs: &[LoraConfig]) -> String {
    let mut csv = String::from("config_id,lpips,map_mean,map_std,steps,lr,rank\n");
    for point in &report.points {
        let cfg = configs.iter().find(|c| c.id == point.config_id);
        let (steps, lr, rank) = match cfg {
            Some(c) => (c.steps.to_string(), format!("{:e}", c.learning_rate), c.rank.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            point.config_id, point.lpips, point.map_mean, point.map_std, steps, lr, rank
        ));
    }
    csv
}

pub fn stage_correlate(
    config: &PipelineConfig,
    out_dir: &Path,
    result: &SweepResult,
    detection: &BTreeMap<String, DetectionMetrics>,
    resume: bool,
) -> Result<CorrelationReport> {
    let path = correlation_path(out_dir);
    if resume && stage_done(out_dir, "correlate") && path.exists() {
        return Ok(serde_json::from_slice(&std::fs::read(&path)?)?);
    }
    let detection_pairs: BTreeMap<String, (f64, f64)> = detection
        .iter()
        .map(|(id, m)| (id.clone(), (m.map50.mean, m.map50.std)))
        .collect();
    let report = crate::sweep::correlate_sweep(result, &detection_pairs)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    let configs: Vec<LoraConfig> = result.records.iter().map(|r| r.config.clone()).collect();
    std::fs::write(out_dir.join("correlate").join("correlation.csv"), correlation_csv(&report, &configs))?;
    write_manifest(
        out_dir,
        "correlate",
        config,
        config.seed,
        BTreeMap::new(),
        vec!["correlate/correlation.json".into(), "correlate/correlation.csv".into()],
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// report + driver

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub selected: LoraConfig,
    pub correlation: CorrelationReport,
    pub regimes: Vec<RegimeReport>,
    pub per_config_map50: BTreeMap<String, String>,
    pub pretrain: PretrainSummary,
}

/// Consolidate a finished run directory into `summary.json`,
/// `correlation.csv`, and `regimes.csv`. Fails listing missing stages, and
/// rejects artifact directories no manifest accounts for.
pub fn write_report(out_dir: &Path) -> Result<PipelineSummary> {
    let missing: Vec<&str> =
        STAGES.iter().filter(|s| !stage_done(out_dir, s)).copied().collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "run is incomplete; missing stages: {}",
            missing.join(", ")
        )));
    }

    // orphan check: every top-level artifact dir must be claimed by a manifest
    let mut claimed: Vec<String> = vec!["manifests".into(), "report".into()];
    for stage in STAGES {
        let manifest = read_manifest(out_dir, stage)?;
        for output in manifest.outputs {
            let top = output.split('/').next().unwrap_or(&output).to_string();
            claimed.push(top);
        }
    }
    for entry in std::fs::read_dir(out_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && !claimed.iter().any(|c| c == &name) {
            return Err(Error::Validation(format!(
                "orphaned artifact directory {name:?} has no owning stage manifest"
            )));
        }
    }

    let selected: LoraConfig = serde_json::from_slice(&std::fs::read(selected_path(out_dir))?)?;
    let correlation: CorrelationReport =
        serde_json::from_slice(&std::fs::read(correlation_path(out_dir))?)?;
    let regimes: Vec<RegimeReport> =
        serde_json::from_slice(&std::fs::read(regimes_path(out_dir))?)?;
    let detection: BTreeMap<String, DetectionMetrics> =
        serde_json::from_slice(&std::fs::read(detect_configs_path(out_dir))?)?;
    let pretrain: PretrainSummary =
        serde_json::from_slice(&std::fs::read(out_dir.join("pretrain").join("summary.json"))?)?;

    let report_dir = out_dir.join("report");
    std::fs::create_dir_all(&report_dir)?;

    let per_config_map50: BTreeMap<String, String> =
        detection.iter().map(|(id, m)| (id.clone(), m.map50.to_string())).collect();
    let summary = PipelineSummary {
        selected,
        correlation: correlation.clone(),
        regimes: regimes.clone(),
        per_config_map50,
        pretrain,
    };
    std::fs::write(report_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    // correlation.csv (copy of the correlate stage's plot data)
    std::fs::copy(
        out_dir.join("correlate").join("correlation.csv"),
        report_dir.join("correlation.csv"),
    )?;

    // regimes.csv with table-style formatted cells
    let mut csv = String::from("regime,n_real,n_synth,map50,map5095\n");
    for r in &regimes {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.regime, r.n_real, r.n_synth, r.map50, r.map5095
        ));
    }
    std::fs::write(report_dir.join("regimes.csv"), csv)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    pub resume: bool,
}

fn stage_context<T>(stage: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("stage {stage}: {m}")),
        other => Error::Sweep(format!("stage {stage} failed: {other}")),
    })
}

/// Run every stage in order and write the consolidated report.
pub fn run_pipeline(
    config: &PipelineConfig,
    out_dir: &Path,
    opts: &PipelineOptions,
) -> Result<PipelineSummary> {
    config.validate()?;
    if !opts.resume && out_dir.join("manifests").exists() {
        return Err(Error::Config(format!(
            "{} already holds a run; pass resume or choose a fresh output directory",
            out_dir.display()
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    stage_context("gen-data", stage_gen_data(config, out_dir, opts.resume))?;
    let base = stage_context("pretrain", stage_pretrain(config, out_dir, opts.resume))?;
    let sweep_result = stage_context("sweep", stage_sweep(config, out_dir, &base, opts.resume))?;
    let selected =
        stage_context("select", stage_select(config, out_dir, &sweep_result, opts.resume))?;
    stage_context(
        "build-synth",
        stage_build_synth(config, out_dir, &base, &sweep_result, opts.resume),
    )?;
    let detection = stage_context(
        "detect-configs",
        stage_detect_configs(config, out_dir, &sweep_result, opts.resume),
    )?;
    stage_context("regimes", stage_regimes(config, out_dir, &selected, opts.resume))?;
    stage_context(
        "correlate",
        stage_correlate(config, out_dir, &sweep_result, &detection, opts.resume),
    )?;
    write_report(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig::default();
        write_manifest(
            dir.path(),
            "gen-data",
            &config,
            7,
            BTreeMap::new(),
            vec!["data".into()],
        )
        .unwrap();
        let m = read_manifest(dir.path(), "gen-data").unwrap();
        assert_eq!(m.command, "gen-data");
        assert_eq!(m.seed, 7);
        assert_eq!(m.outputs, vec!["data".to_string()]);
        assert!(read_manifest(dir.path(), "pretrain").is_err());
    }

    #[test]
    fn report_requires_all_stages() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_report(dir.path()).unwrap_err();
        let msg = err.to_string();
        for stage in STAGES {
            assert!(msg.contains(stage), "missing {stage} in {msg}");
        }
    }

    #[test]
    fn sweep_config_filter() {
        let mut config = PipelineConfig::default();
        config.sweep.config_ids =
            Some(vec!["lr5e-4_r16_s100".to_string(), "lr1e-4_r16_s10".to_string()]);
        let configs = sweep_configs(&config).unwrap();
        assert_eq!(configs.len(), 2);
        config.sweep.config_ids = Some(vec!["nope".to_string()]);
        assert!(sweep_configs(&config).is_err());
    }

    #[test]
    fn gen_data_writes_disjoint_splits() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = PipelineConfig::default();
        config.splits =
            crate::data::SplitSizes { sensor_sample: 4, sensor_val: 2, train: 6, val: 2, test: 4 };
        config.world.image_size = 16;
        config.model.image_size = 16;
        config.regimes.real_count = 4;
        stage_gen_data(&config, dir.path(), false).unwrap();
        let m = read_split_manifest(&data_root(dir.path()), "train").unwrap();
        assert_eq!(m.ids.len(), 6);
        verify_dataset_disjoint(&data_root(dir.path())).unwrap();
        // resume skips silently
        stage_gen_data(&config, dir.path(), true).unwrap();
    }
}
