//! Small sweep with interruption and resume: the resumed results file is
//! byte-identical to an uninterrupted run's.

use crossflow::data::{toy_world_generate, ToyWorldSpec};
use crossflow::flow::{pretrain_base, FlowConfig, PretrainOptions};
use crossflow::sweep::{grid, run_sweep, select_best, Profile, SweepOptions};

fn main() -> crossflow::Result<()> {
    let world = ToyWorldSpec { seed: 5, ..Default::default() };
    let sample: Vec<_> = toy_world_generate(&world, 8)
        .into_iter()
        .map(|s| (s.source, s.target.unwrap()))
        .collect();
    let val: Vec<_> = toy_world_generate(&ToyWorldSpec { seed: 6, ..world }, 4)
        .into_iter()
        .map(|s| (s.id, s.source, s.target.unwrap()))
        .collect();

    let config = FlowConfig::default();
    let (base, _) = pretrain_base(
        &sample.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>(),
        &config,
        &PretrainOptions { steps: 60, learning_rate: 3e-3, seed: 1, instruction: 0 },
    )?;

    // four cheapest grid points only, to keep this example quick
    let configs: Vec<_> = grid(Profile::Desk).into_iter().filter(|c| c.steps <= 60).take(4).collect();
    let tmp = std::env::temp_dir().join("crossflow_sweep_example");
    let _ = std::fs::remove_dir_all(&tmp);

    let clean_dir = tmp.join("clean");
    let mut opts = SweepOptions::new(&clean_dir, 9);
    opts.translate_steps = 6;
    let result = run_sweep(&base, &sample, &val, &configs, &opts)?;
    for r in &result.records {
        println!(
            "{}: lpips {:.4} ({:?})",
            r.config.id,
            r.lpips_mean.unwrap_or(f64::NAN),
            r.status
        );
    }
    println!("selected: {}", select_best(&result)?.id);

    // interrupted run: stop after 2 configs, then resume
    let resumed_dir = tmp.join("resumed");
    let mut partial = SweepOptions::new(&resumed_dir, 9);
    partial.translate_steps = 6;
    partial.limit = Some(2);
    run_sweep(&base, &sample, &val, &configs, &partial)?;
    println!(
        "after interruption: {} records",
        crossflow::sweep::read_results(&partial.results_path())?.len()
    );
    let mut full = SweepOptions::new(&resumed_dir, 9);
    full.translate_steps = 6;
    run_sweep(&base, &sample, &val, &configs, &full)?;

    let clean_bytes = std::fs::read(opts.results_path())?;
    let resumed_bytes = std::fs::read(full.results_path())?;
    println!(
        "resumed file identical to clean run: {}",
        clean_bytes == resumed_bytes
    );
    Ok(())
}
