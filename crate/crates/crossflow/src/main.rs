//! Batch command-line front end; all logic lives in the library.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crossflow::data::{build_synthetic_detection_set, SynthOptions};
use crossflow::detect::{
    eval_detector, eval_map_from_dirs, parse_labels, train_toy_detector, write_predictions,
    DetectorConfig, LabeledImage,
};
use crossflow::error::{Error, Result};
use crossflow::flow::{
    save_loss_curve, train_lora, translate, FlowModel, LoraTrainOptions, TrainHyper,
    TranslateOptions,
};
use crossflow::img::Image;
use crossflow::lora::LoraSet;
use crossflow::perceptual::{mean_lpips, FeatureExtractor};
use crossflow::pipeline::{
    self, run_pipeline, write_report, PipelineConfig, PipelineOptions, TRANSLATE_INSTRUCTION,
};
use crossflow::seed::derive_seed;
use crossflow::sweep::{grid, read_results, run_sweep, select_best, SweepOptions, SweepResult};

#[derive(Parser)]
#[command(
    name = "crossflow",
    version,
    about = "Cross-spectral translation lab: LoRA-adapted flow matching, perceptual selection, detection evaluation"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Pipeline configuration file (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Top-level seed override
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweep execution
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Step-count profile: paper or desk
    #[arg(long, global = true)]
    profile: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy cross-spectral dataset splits
    GenData,
    /// Pre-train the base flow model on a source-style corpus
    Pretrain,
    /// Train one LoRA adapter set on a dataset's sensor_sample split
    TrainLora {
        #[arg(long)]
        base: PathBuf,
        /// Dataset root containing the sensor_sample split
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 16)]
        rank: usize,
        /// Defaults to rank (alpha = r)
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long, default_value_t = 5e-4)]
        lr: f32,
        #[arg(long, default_value_t = 100)]
        steps: u64,
        /// Adapter output file
        #[arg(long)]
        adapters: PathBuf,
        /// Loss curve CSV
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Run the LoRA grid sweep with LPIPS scoring
    Sweep {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Continue an interrupted sweep by skipping completed configs
        #[arg(long)]
        resume: bool,
    },
    /// Pick the minimum-LPIPS configuration from sweep results
    Select {
        #[arg(long)]
        results: PathBuf,
    },
    /// Translate one source image into the target modality
    Translate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: u32,
        /// Keep the raw three-channel output instead of grayscale
        #[arg(long)]
        rgb: bool,
    },
    /// Translate a labeled source set, reusing its labels byte-identically
    BuildSynth {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapters: PathBuf,
        /// Set directory containing source/ and labels/
        #[arg(long)]
        set: PathBuf,
        #[arg(long, default_value = "adapter")]
        adapter_id: String,
        #[arg(long, default_value_t = 20)]
        steps: u32,
    },
    /// Train the reference grid detector on an image/label directory pair
    TrainDetector {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: u32,
        /// Detector checkpoint output
        #[arg(long)]
        model: PathBuf,
        /// Evaluate on this image directory after training
        #[arg(long)]
        test_images: Option<PathBuf>,
        #[arg(long)]
        test_labels: Option<PathBuf>,
        /// Write per-image prediction files here
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Evaluate mAP from directories of prediction and label files
    EvalMap {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Mean perceptual distance between paired image directories
    EvalLpips {
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long, default_value_t = 42)]
        extractor_seed: u64,
    },
    /// Correlate sweep LPIPS against per-config detection results
    Correlate {
        #[arg(long)]
        results: PathBuf,
        /// detect/configs.json from the detection stage
        #[arg(long)]
        detection: PathBuf,
    },
    /// Run the full study end to end
    Pipeline {
        /// Continue a partially completed run
        #[arg(long)]
        resume: bool,
    },
    /// Consolidate a finished run directory into summary files
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(global: &GlobalArgs) -> Result<PipelineConfig> {
    let mut config = match &global.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(workers) = global.workers {
        config.sweep.workers = workers;
    }
    if let Some(profile) = &global.profile {
        config.sweep.profile = profile.parse()?;
    }
    config.validate()?;
    Ok(config)
}

fn require_out(global: &GlobalArgs) -> Result<PathBuf> {
    global.out.clone().ok_or_else(|| Error::Config("--out is required".into()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_labeled_dir(images: &Path, labels: &Path) -> Result<Vec<LabeledImage>> {
    let mut ids: Vec<String> = std::fs::read_dir(images)
        .map_err(|e| Error::Validation(format!("{}: {e}", images.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().and_then(|x| x.to_str()) == Some("png"))
                .then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    ids.sort();
    ids.iter()
        .map(|id| {
            let image = Image::load_png(&images.join(format!("{id}.png")))?;
            let text = std::fs::read_to_string(labels.join(format!("{id}.txt")))
                .map_err(|e| Error::Validation(format!("missing labels for {id}: {e}")))?;
            let boxes = parse_labels(&text, image.width as f64, image.height as f64)?;
            Ok(LabeledImage { id: id.clone(), image, boxes })
        })
        .collect()
}

fn load_pairs_from_root(root: &Path, split: &str) -> Result<Vec<(String, Image, Image)>> {
    let samples = crossflow::data::load_split(root, split)?;
    samples
        .into_iter()
        .map(|s| {
            let target = s
                .target
                .ok_or_else(|| Error::Validation(format!("{split}/{} has no target", s.id)))?;
            Ok((s.id, s.source, target))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData => {
            let config = load_config(&cli.global)?;
            let out = require_out(&cli.global)?;
            pipeline::stage_gen_data(&config, &out, false)?;
            println!("dataset written under {}", out.join("data").display());
            Ok(())
        }
        Command::Pretrain => {
            let config = load_config(&cli.global)?;
            let out = require_out(&cli.global)?;
            let model = pipeline::stage_pretrain(&config, &out, false)?;
            let ckpt = pipeline::base_checkpoint_path(&out);
            println!(
                "checkpoint {} ({} parameters)",
                ckpt.display(),
                model.parameters().iter().map(|(_, t)| t.numel()).sum::<usize>()
            );
            Ok(())
        }
        Command::TrainLora { base, dataset, rank, alpha, lr, steps, adapters, curve } => {
            let config = load_config(&cli.global)?;
            let model = FlowModel::load_file(&base)?;
            let pairs: Vec<(Image, Image)> = load_pairs_from_root(&dataset, "sensor_sample")?
                .into_iter()
                .map(|(_, s, t)| (s, t))
                .collect();
            let opts = LoraTrainOptions {
                rank,
                alpha: alpha.unwrap_or(rank as f32),
                hyper: TrainHyper {
                    learning_rate: lr,
                    steps,
                    seed: config.seed,
                },
                instruction: TRANSLATE_INSTRUCTION,
            };
            let (lora, loss_curve) = train_lora(&model, &model.attach_plan(), &pairs, &opts)?;
            lora.save_file(&adapters)?;
            if let Some(curve_path) = curve {
                save_loss_curve(&curve_path, &loss_curve)?;
            }
            println!(
                "adapters {} (final loss {:.5})",
                adapters.display(),
                loss_curve.last().map(|(_, l)| *l).unwrap_or(f32::NAN)
            );
            Ok(())
        }
        Command::Sweep { base, dataset, resume } => {
            let config = load_config(&cli.global)?;
            let out = require_out(&cli.global)?;
            let opts = SweepOptions {
                out_dir: out.clone(),
                seed: derive_seed(config.seed, "sweep"),
                translate_steps: config.sweep.translate_steps,
                instruction: TRANSLATE_INSTRUCTION,
                workers: config.sweep.workers,
                lpips_extractor_seed: config.lpips_extractor_seed,
                limit: None,
            };
            if !resume && opts.results_path().exists() {
                return Err(Error::Config(format!(
                    "{} exists; pass --resume to continue it",
                    opts.results_path().display()
                )));
            }
            let model = FlowModel::load_file(&base)?;
            let sample: Vec<(Image, Image)> = load_pairs_from_root(&dataset, "sensor_sample")?
                .into_iter()
                .map(|(_, s, t)| (s, t))
                .collect();
            let val = load_pairs_from_root(&dataset, "sensor_val")?;
            let configs = grid(config.sweep.profile);
            let result = run_sweep(&model, &sample, &val, &configs, &opts)?;
            println!(
                "{} records at {}",
                result.records.len(),
                opts.results_path().display()
            );
            Ok(())
        }
        Command::Select { results } => {
            let records = read_results(&results)?;
            let selected = select_best(&SweepResult { records })?;
            print_json(&selected)
        }
        Command::Translate { base, adapters, input, output, steps, rgb } => {
            let config = load_config(&cli.global)?;
            let model = FlowModel::load_file(&base)?;
            let lora = adapters.map(|p| LoraSet::load_file(&p)).transpose()?;
            let source = Image::load_png(&input)?;
            let opts = TranslateOptions {
                steps,
                seed: config.seed,
                instruction: TRANSLATE_INSTRUCTION,
            };
            let result = translate(&model, lora.as_ref(), &source, &opts)?;
            if rgb {
                result.save_png(&output)?;
            } else {
                result.to_gray().save_png(&output)?;
            }
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::BuildSynth { base, adapters, set, adapter_id, steps } => {
            let config = load_config(&cli.global)?;
            let out = require_out(&cli.global)?;
            let model = FlowModel::load_file(&base)?;
            let lora = LoraSet::load_file(&adapters)?;
            let opts = SynthOptions {
                adapter_id,
                steps,
                base_seed: config.seed,
                instruction: TRANSLATE_INSTRUCTION,
            };
            let manifest = build_synthetic_detection_set(&model, &lora, &set, &out, &opts)?;
            println!("{} synthetic images under {}", manifest.count, out.display());
            Ok(())
        }
        Command::TrainDetector {
            images,
            labels,
            epochs,
            model,
            test_images,
            test_labels,
            predictions,
        } => {
            let config = load_config(&cli.global)?;
            let train_set = load_labeled_dir(&images, &labels)?;
            if train_set.is_empty() {
                return Err(Error::Validation(format!("no images under {}", images.display())));
            }
            let det_config = DetectorConfig {
                image_size: train_set[0].image.height,
                in_channels: train_set[0].image.channels,
                ..config.detector_config()
            };
            let trained = train_toy_detector(&train_set, &det_config, epochs, config.seed)?;
            trained.detector.save_file(&model)?;
            println!("detector checkpoint {}", model.display());
            if let (Some(ti), Some(tl)) = (test_images, test_labels) {
                let test_set = load_labeled_dir(&ti, &tl)?;
                if let Some(pred_dir) = predictions {
                    std::fs::create_dir_all(&pred_dir)?;
                    for li in &test_set {
                        let boxes = crossflow::detect::predict_boxes(&trained.detector, &li.image)?;
                        let text = write_predictions(
                            &boxes,
                            li.image.width as f64,
                            li.image.height as f64,
                        );
                        std::fs::write(pred_dir.join(format!("{}.txt", li.id)), text)?;
                    }
                }
                let result = eval_detector(&trained.detector, &test_set)?;
                print_json(&result)?;
            }
            Ok(())
        }
        Command::EvalMap { predictions, labels } => {
            let result = eval_map_from_dirs(&predictions, &labels)?;
            print_json(&result)
        }
        Command::EvalLpips { synthetic, real, extractor_seed } => {
            let fe = FeatureExtractor::from_seed(extractor_seed);
            let mut ids: Vec<String> = std::fs::read_dir(&synthetic)
                .map_err(|e| Error::Validation(format!("{}: {e}", synthetic.display())))?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let p = e.path();
                    (p.extension().and_then(|x| x.to_str()) == Some("png"))
                        .then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
                })
                .collect();
            ids.sort();
            let pairs: Vec<(String, Image, Image)> = ids
                .iter()
                .map(|id| {
                    let s = Image::load_png(&synthetic.join(format!("{id}.png")))?;
                    let r = Image::load_png(&real.join(format!("{id}.png")))?;
                    Ok((id.clone(), s, r))
                })
                .collect::<Result<_>>()?;
            let report = mean_lpips(&pairs, &fe)?;
            print_json(&report)
        }
        Command::Correlate { results, detection } => {
            let out = require_out(&cli.global)?;
            let records = read_results(&results)?;
            let metrics: BTreeMap<String, crossflow::detect::DetectionMetrics> =
                serde_json::from_slice(&std::fs::read(&detection)?)?;
            let pairs: BTreeMap<String, (f64, f64)> = metrics
                .iter()
                .map(|(id, m)| (id.clone(), (m.map50.mean, m.map50.std)))
                .collect();
            let result = SweepResult { records };
            let report = crossflow::sweep::correlate_sweep(&result, &pairs)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("correlation.json"), serde_json::to_string_pretty(&report)?)?;
            let configs: Vec<_> = result.records.iter().map(|r| r.config.clone()).collect();
            std::fs::write(
                out.join("correlation.csv"),
                pipeline::correlation_csv(&report, &configs),
            )?;
            print_json(&report)
        }
        Command::Pipeline { resume } => {
            let config = load_config(&cli.global)?;
            let out = require_out(&cli.global)?;
            let summary = run_pipeline(&config, &out, &PipelineOptions { resume })?;
            println!(
                "selected {} | pearson r {:.3} (p {:.2e}) | spearman rho {:.3} (p {:.2e})",
                summary.selected.id,
                summary.correlation.pearson_r,
                summary.correlation.pearson_p,
                summary.correlation.spearman_rho,
                summary.correlation.spearman_p,
            );
            for r in &summary.regimes {
                println!(
                    "{:<20} real {:>5} synth {:>5} mAP@0.50 {} mAP@[0.50:0.95] {}",
                    r.regime, r.n_real, r.n_synth, r.map50, r.map5095
                );
            }
            println!("report under {}", out.join("report").display());
            Ok(())
        }
        Command::Report { run } => {
            let summary = write_report(&run)?;
            println!(
                "summary.json, correlation.csv, regimes.csv under {}",
                run.join("report").display()
            );
            println!("selected: {}", summary.selected.id);
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
