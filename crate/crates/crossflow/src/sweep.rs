//! LoRA hyperparameter grid, sweep execution, and selection.
//!
//! The grid crosses learning rate x rank for the three short step counts and
//! extends only (lr 5e-4, r 16) to the three long ones, 15 configurations in
//! total; the desk profile divides step counts by 100 but keeps the grid's
//! structure. Results append to a JSON-lines file strictly in grid order, so
//! an interrupted sweep leaves a clean prefix and `--resume` skips completed
//! configurations; per-config seeds derive from (sweep seed, grid index), so
//! resumed and uninterrupted runs produce identical records.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    save_loss_curve, train_lora, translate, FlowModel, LoraTrainOptions, TrainHyper,
    TranslateOptions,
};
use crate::img::Image;
use crate::perceptual::{mean_lpips, FeatureExtractor, LpipsReport};
use crate::seed::derive_seed;
use crate::stats::{correlation_report, CorrelationPoint, CorrelationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Step counts as published: 1k..40k.
    Paper,
    /// Same grid at 1/100 of the steps.
    Desk,
}

impl Profile {
    pub fn step_scale_divisor(&self) -> u64 {
        match self {
            Profile::Paper => 1,
            Profile::Desk => 100,
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Profile> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile {other:?} (paper|desk)"))),
        }
    }
}

/// One sweep point: the hyperparameters of a LoRA training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub id: String,
    pub learning_rate: f32,
    pub rank: usize,
    pub alpha: f32,
    pub steps: u64,
    pub seed: u64,
}

fn format_lr(lr: f32) -> String {
    format!("{:e}", lr)
}

fn make_config(lr: f32, rank: usize, steps: u64) -> LoraConfig {
    LoraConfig {
        id: format!("lr{}_r{}_s{}", format_lr(lr), rank, steps),
        learning_rate: lr,
        rank,
        alpha: rank as f32,
        steps,
        seed: 0,
    }
}

const LRS: [f32; 2] = [1e-4, 5e-4];
const RANKS: [usize; 2] = [16, 32];
const SHORT_STEPS: [u64; 3] = [1_000, 3_000, 6_000];
const LONG_STEPS: [u64; 3] = [10_000, 30_000, 40_000];
const LONG_LR: f32 = 5e-4;
const LONG_RANK: usize = 16;

/// The full 15-point grid: all lr x rank combinations at the short step
/// counts, plus (5e-4, r16) at the long ones. Order is fixed.
pub fn grid(profile: Profile) -> Vec<LoraConfig> {
    let div = profile.step_scale_divisor();
    let mut out = Vec::with_capacity(15);
    for &steps in &SHORT_STEPS {
        for &lr in &LRS {
            for &rank in &RANKS {
                out.push(make_config(lr, rank, steps / div));
            }
        }
    }
    for &steps in &LONG_STEPS {
        out.push(make_config(LONG_LR, LONG_RANK, steps / div));
    }
    out
}

/// Outcome of one configuration inside a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRecord {
    pub config: LoraConfig,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_curve_path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub translate_steps: u32,
    pub instruction: usize,
    pub workers: usize,
    pub lpips_extractor_seed: u64,
    /// Process at most this many pending configs, then stop. Models a sweep
    /// interrupted mid-run; `None` runs to completion.
    pub limit: Option<usize>,
}

impl SweepOptions {
    pub fn new(out_dir: &Path, seed: u64) -> SweepOptions {
        SweepOptions {
            out_dir: out_dir.to_path_buf(),
            seed,
            translate_steps: 20,
            instruction: 0,
            workers: 2,
            lpips_extractor_seed: 42,
            limit: None,
        }
    }

    pub fn results_path(&self) -> PathBuf {
        self.out_dir.join("sweep_results.jsonl")
    }
}

pub fn read_results(path: &Path) -> Result<Vec<SweepRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let content = std::fs::read_to_string(path)?;
    content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Translate the validation split with given adapters and score it against
/// the real targets.
pub fn score_adapters(
    base: &FlowModel,
    lora: &crate::lora::LoraSet,
    sensor_val: &[(String, Image, Image)],
    fe: &FeatureExtractor,
    config_seed: u64,
    translate_steps: u32,
    instruction: usize,
) -> Result<LpipsReport> {
    let mut pairs = Vec::with_capacity(sensor_val.len());
    for (id, source, real_target) in sensor_val {
        let topts = TranslateOptions {
            steps: translate_steps,
            seed: derive_seed(config_seed, &format!("val/{id}")),
            instruction,
        };
        let synth = translate(base, Some(lora), source, &topts)?;
        pairs.push((id.clone(), synth.to_gray(), real_target.clone()));
    }
    mean_lpips(&pairs, fe)
}

fn run_one_config(
    base: &FlowModel,
    sensor_sample: &[(Image, Image)],
    sensor_val: &[(String, Image, Image)],
    fe: &FeatureExtractor,
    config: &LoraConfig,
    opts: &SweepOptions,
) -> SweepRecord {
    let attempt = (|| -> Result<SweepRecord> {
        let train_opts = LoraTrainOptions {
            rank: config.rank,
            alpha: config.alpha,
            hyper: TrainHyper {
                learning_rate: config.learning_rate,
                steps: config.steps,
                seed: config.seed,
            },
            instruction: opts.instruction,
        };
        let (lora, curve) = train_lora(base, &base.attach_plan(), sensor_sample, &train_opts)?;
        let adapter_path = opts.out_dir.join("adapters").join(format!("{}.lora", config.id));
        lora.save_file(&adapter_path)?;
        let curve_path = opts.out_dir.join("curves").join(format!("{}.csv", config.id));
        save_loss_curve(&curve_path, &curve)?;
        let report = score_adapters(
            base,
            &lora,
            sensor_val,
            fe,
            config.seed,
            opts.translate_steps,
            opts.instruction,
        )?;
        Ok(SweepRecord {
            config: config.clone(),
            status: RecordStatus::Ok,
            error: None,
            lpips_mean: Some(report.mean),
            lpips_std: Some(report.std),
            adapter_path: Some(adapter_path.to_string_lossy().into_owned()),
            loss_curve_path: Some(curve_path.to_string_lossy().into_owned()),
        })
    })();
    match attempt {
        Ok(record) => record,
        Err(e) => SweepRecord {
            config: config.clone(),
            status: RecordStatus::Failed,
            error: Some(e.to_string()),
            lpips_mean: None,
            lpips_std: None,
            adapter_path: None,
            loss_curve_path: None,
        },
    }
}

/// Execute the sweep: per configuration, train adapters on the sample split,
/// translate the validation split, and persist the mean perceptual distance.
///
/// Records append to `sweep_results.jsonl` strictly in grid order as they
/// complete; rerunning with the same options resumes by skipping ids already
/// in the file.
pub fn run_sweep(
    base: &FlowModel,
    sensor_sample: &[(Image, Image)],
    sensor_val: &[(String, Image, Image)],
    configs: &[LoraConfig],
    opts: &SweepOptions,
) -> Result<SweepResult> {
    if sensor_sample.is_empty() || sensor_val.is_empty() {
        return Err(Error::Config("sweep needs non-empty sample and val splits".into()));
    }
    std::fs::create_dir_all(&opts.out_dir)?;
    let results_path = opts.results_path();
    let existing = read_results(&results_path)?;
    let done: BTreeSet<String> = existing.iter().map(|r| r.config.id.clone()).collect();

    // Seeds are a function of the grid index, stable across resume.
    let seeded: Vec<LoraConfig> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut c = c.clone();
            c.seed = derive_seed(opts.seed, &format!("config{i}"));
            c
        })
        .collect();
    let pending: Vec<(usize, LoraConfig)> = seeded
        .iter()
        .enumerate()
        .filter(|(_, c)| !done.contains(&c.id))
        .map(|(i, c)| (i, c.clone()))
        .collect();
    let budget = opts.limit.unwrap_or(pending.len()).min(pending.len());
    let pending = &pending[..budget];

    let base_bytes = base.to_bytes()?;

    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(&results_path)?;
    let mut completed: Vec<SweepRecord> = existing;

    if !pending.is_empty() {
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<(usize, SweepRecord)>();
        let workers = opts.workers.max(1).min(pending.len());
        std::thread::scope(|scope| -> Result<()> {
            for _ in 0..workers {
                let tx = tx.clone();
                let next = &next;
                let base_bytes = &base_bytes;
                scope.spawn(move || {
                    let local_base = match FlowModel::from_bytes(base_bytes) {
                        Ok(m) => m,
                        Err(_) => return,
                    };
                    let fe = FeatureExtractor::from_seed(opts.lpips_extractor_seed);
                    loop {
                        let slot = next.fetch_add(1, Ordering::SeqCst);
                        if slot >= pending.len() {
                            break;
                        }
                        let (queue_idx, config) = &pending[slot];
                        let record = run_one_config(
                            &local_base,
                            sensor_sample,
                            sensor_val,
                            &fe,
                            config,
                            opts,
                        );
                        if tx.send((*queue_idx, record)).is_err() {
                            break;
                        }
                    }
                });
            }
            drop(tx);

            // Write strictly in queue order so any interruption leaves a
            // resumable prefix.
            let mut buffer: std::collections::BTreeMap<usize, SweepRecord> =
                std::collections::BTreeMap::new();
            let mut expected: std::collections::VecDeque<usize> =
                pending.iter().map(|(i, _)| *i).collect();
            for (idx, record) in rx {
                buffer.insert(idx, record);
                while let Some(&front) = expected.front() {
                    let Some(record) = buffer.remove(&front) else { break };
                    let line = serde_json::to_string(&record)?;
                    writeln!(file, "{line}")?;
                    file.flush()?;
                    completed.push(record);
                    expected.pop_front();
                }
            }
            Ok(())
        })?;
    }

    if completed.iter().all(|r| r.status == RecordStatus::Failed) && !completed.is_empty() {
        return Err(Error::Sweep("every configuration failed".into()));
    }
    Ok(SweepResult { records: completed })
}

/// The argmin-LPIPS configuration; ties prefer fewer steps, then lower
/// learning rate, then lower rank.
pub fn select_best(result: &SweepResult) -> Result<LoraConfig> {
    let mut best: Option<(&SweepRecord, f64)> = None;
    for record in &result.records {
        let (RecordStatus::Ok, Some(lpips)) = (record.status, record.lpips_mean) else { continue };
        let better = match best {
            None => true,
            Some((cur, cur_lpips)) => {
                lpips < cur_lpips
                    || (lpips == cur_lpips
                        && (record.config.steps, record.config.learning_rate, record.config.rank)
                            < (cur.config.steps, cur.config.learning_rate, cur.config.rank))
            }
        };
        if better {
            best = Some((record, lpips));
        }
    }
    best.map(|(r, _)| r.config.clone())
        .ok_or_else(|| Error::Selection("no successful sweep configuration".into()))
}

/// Assemble (LPIPS, mAP) pairs across configurations and correlate them.
///
/// `detection` maps config id to the 5-seed mAP@0.50 (mean, std); every
/// successful config must have an entry.
pub fn correlate_sweep(
    result: &SweepResult,
    detection: &std::collections::BTreeMap<String, (f64, f64)>,
) -> Result<CorrelationReport> {
    let ok_records: Vec<&SweepRecord> =
        result.records.iter().filter(|r| r.status == RecordStatus::Ok).collect();
    if ok_records.len() != detection.len() {
        return Err(Error::Validation(format!(
            "{} successful configs but {} detection entries",
            ok_records.len(),
            detection.len()
        )));
    }
    let mut points = Vec::with_capacity(ok_records.len());
    for record in ok_records {
        let (map_mean, map_std) = detection.get(&record.config.id).ok_or_else(|| {
            Error::Validation(format!("no detection result for config {}", record.config.id))
        })?;
        points.push(CorrelationPoint {
            config_id: record.config.id.clone(),
            lpips: record.lpips_mean.expect("ok records have lpips"),
            map_mean: *map_mean,
            map_std: *map_std,
        });
    }
    correlation_report(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_grid_has_fifteen_configs() {
        let g = grid(Profile::Paper);
        assert_eq!(g.len(), 15);
    }

    #[test]
    fn paper_grid_multiset_matches_published_enumeration() {
        let g = grid(Profile::Paper);
        let mut multiset: Vec<(String, usize, u64)> =
            g.iter().map(|c| (format_lr(c.learning_rate), c.rank, c.steps)).collect();
        multiset.sort();
        let mut expected = Vec::new();
        for steps in [1_000u64, 3_000, 6_000] {
            for lr in ["1e-4", "5e-4"] {
                for rank in [16usize, 32] {
                    expected.push((lr.to_string(), rank, steps));
                }
            }
        }
        for steps in [10_000u64, 30_000, 40_000] {
            expected.push(("5e-4".to_string(), 16, steps));
        }
        expected.sort();
        assert_eq!(multiset, expected);
    }

    #[test]
    fn long_step_configs_fix_lr_and_rank() {
        for c in grid(Profile::Paper) {
            if c.steps >= 10_000 {
                assert_eq!(format_lr(c.learning_rate), "5e-4");
                assert_eq!(c.rank, 16);
                assert_eq!(c.alpha, 16.0);
            }
        }
    }

    #[test]
    fn alpha_equals_rank_everywhere() {
        for profile in [Profile::Paper, Profile::Desk] {
            for c in grid(profile) {
                assert_eq!(c.alpha, c.rank as f32, "config {}", c.id);
            }
        }
    }

    #[test]
    fn desk_grid_scales_steps_by_hundred() {
        let desk = grid(Profile::Desk);
        assert_eq!(desk.len(), 15);
        let mut steps: Vec<u64> = desk.iter().map(|c| c.steps).collect();
        steps.sort_unstable();
        steps.dedup();
        assert_eq!(steps, vec![10, 30, 60, 100, 300, 400]);
    }

    #[test]
    fn grid_order_is_stable() {
        let a = grid(Profile::Paper);
        let b = grid(Profile::Paper);
        assert_eq!(a, b);
        assert_eq!(a[0].id, "lr1e-4_r16_s1000");
    }

    fn record(id: &str, steps: u64, lr: f32, rank: usize, lpips: Option<f64>) -> SweepRecord {
        SweepRecord {
            config: LoraConfig {
                id: id.to_string(),
                learning_rate: lr,
                rank,
                alpha: rank as f32,
                steps,
                seed: 0,
            },
            status: if lpips.is_some() { RecordStatus::Ok } else { RecordStatus::Failed },
            error: None,
            lpips_mean: lpips,
            lpips_std: lpips.map(|_| 0.0),
            adapter_path: None,
            loss_curve_path: None,
        }
    }

    #[test]
    fn select_single_config() {
        let result = SweepResult { records: vec![record("only", 10, 1e-4, 16, Some(0.5))] };
        assert_eq!(select_best(&result).unwrap().id, "only");
    }

    #[test]
    fn select_argmin() {
        let result = SweepResult {
            records: vec![
                record("a", 10, 1e-4, 16, Some(0.3)),
                record("b", 30, 1e-4, 16, Some(0.1)),
                record("c", 60, 1e-4, 16, Some(0.2)),
            ],
        };
        assert_eq!(select_best(&result).unwrap().id, "b");
    }

    #[test]
    fn select_tie_prefers_fewer_steps() {
        let result = SweepResult {
            records: vec![
                record("s3k", 3_000, 1e-4, 16, Some(0.2)),
                record("s1k", 1_000, 1e-4, 16, Some(0.2)),
            ],
        };
        assert_eq!(select_best(&result).unwrap().id, "s1k");
    }

    #[test]
    fn select_skips_failures_and_errors_when_empty() {
        let result = SweepResult {
            records: vec![record("bad", 10, 1e-4, 16, None), record("ok", 30, 1e-4, 16, Some(0.4))],
        };
        assert_eq!(select_best(&result).unwrap().id, "ok");
        let none = SweepResult { records: vec![record("bad", 10, 1e-4, 16, None)] };
        assert!(select_best(&none).is_err());
    }

    #[test]
    fn correlate_requires_matching_counts() {
        let result = SweepResult {
            records: vec![
                record("a", 10, 1e-4, 16, Some(0.3)),
                record("b", 30, 1e-4, 16, Some(0.2)),
                record("c", 60, 1e-4, 16, Some(0.1)),
            ],
        };
        let mut detection = std::collections::BTreeMap::new();
        detection.insert("a".to_string(), (0.2, 0.01));
        assert!(correlate_sweep(&result, &detection).is_err());
        detection.insert("b".to_string(), (0.5, 0.01));
        detection.insert("c".to_string(), (0.7, 0.02));
        let report = correlate_sweep(&result, &detection).unwrap();
        assert_eq!(report.n, 3);
        assert!(report.pearson_r < 0.0);
    }

    #[test]
    fn results_roundtrip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let records =
            vec![record("a", 10, 1e-4, 16, Some(0.31)), record("b", 30, 5e-4, 32, None)];
        let mut content = String::new();
        for r in &records {
            content.push_str(&serde_json::to_string(r).unwrap());
            content.push('\n');
        }
        std::fs::write(&path, content).unwrap();
        let back = read_results(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].config.id, "a");
        assert_eq!(back[0].lpips_mean, Some(0.31));
        assert_eq!(back[1].status, RecordStatus::Failed);
    }
}
