//! Miniature end-to-end study: toy world -> pretrain -> LoRA sweep ->
//! LPIPS selection -> synthetic detection sets -> per-config detectors ->
//! three regimes -> LPIPS/mAP correlation. Uses a reduced configuration so
//! it finishes in a few minutes on two cores; the acceptance suite runs the
//! full-size desk profile.

use crossflow::data::SplitSizes;
use crossflow::pipeline::{run_pipeline, PipelineConfig, PipelineOptions};

fn main() -> crossflow::Result<()> {
    let mut config = PipelineConfig::default();
    config.seed = 17;
    config.splits = SplitSizes { sensor_sample: 16, sensor_val: 8, train: 32, val: 4, test: 24 };
    config.pretrain.images = 48;
    config.pretrain.steps = 400;
    config.sweep.config_ids = Some(vec![
        "lr5e-4_r16_s10".to_string(),
        "lr5e-4_r16_s100".to_string(),
        "lr5e-4_r16_s400".to_string(),
    ]);
    config.regimes.real_count = 8;

    let out = std::env::temp_dir().join("crossflow_full_pipeline_example");
    let _ = std::fs::remove_dir_all(&out);
    let summary = run_pipeline(&config, &out, &PipelineOptions { resume: false })?;

    println!("selected adapter: {}", summary.selected.id);
    println!(
        "LPIPS vs mAP: pearson r {:.3} (p {:.2e}), spearman rho {:.3} (p {:.2e})",
        summary.correlation.pearson_r,
        summary.correlation.pearson_p,
        summary.correlation.spearman_rho,
        summary.correlation.spearman_p
    );
    for point in &summary.correlation.points {
        println!(
            "  {:<18} lpips {:.4}  mAP@0.50 {:.3} +- {:.3}",
            point.config_id, point.lpips, point.map_mean, point.map_std
        );
    }
    for r in &summary.regimes {
        println!(
            "{:<20} real {:>4} synth {:>4}  mAP@0.50 {}",
            r.regime, r.n_real, r.n_synth, r.map50
        );
    }
    println!("artifacts under {}", out.display());
    Ok(())
}
