//! Perceptual distance against the seeded frozen extractor: metric
//! properties, monotonicity under growing noise, and split-level scoring.

use crossflow::data::{toy_world_generate, ToyWorldSpec};
use crossflow::img::Image;
use crossflow::perceptual::{lpips, mean_lpips, FeatureExtractor};

fn main() -> crossflow::Result<()> {
    let fe = FeatureExtractor::from_seed(42);
    let samples = toy_world_generate(&ToyWorldSpec { seed: 8, ..Default::default() }, 6);

    let x = &samples[0].source;
    let y = &samples[1].source;
    println!("d(x, x) = {}", lpips(x, x, &fe)?);
    println!("d(x, y) = {:.4}  d(y, x) = {:.4}", lpips(x, y, &fe)?, lpips(y, x, &fe)?);

    // distance grows with noise amplitude
    print!("d(x, x + eps*noise):");
    for eps in [0.0f32, 0.1, 0.2, 0.4] {
        let noisy: Vec<f32> = x
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + eps * (((i * 2654435761) % 1000) as f32 / 1000.0 - 0.5))
            .collect();
        let img = Image::from_data(x.channels, x.height, x.width, noisy)?;
        print!("  eps={eps}: {:.4}", lpips(x, &img, &fe)?);
    }
    println!();

    // split-level scoring: real target vs itself is 0, vs source luma is not
    let pairs_same: Vec<(String, Image, Image)> = samples
        .iter()
        .map(|s| {
            let t = s.target.clone().unwrap();
            (s.id.clone(), t.clone(), t)
        })
        .collect();
    let report = mean_lpips(&pairs_same, &fe)?;
    println!("identical pairs: mean {} over {} pairs", report.mean, report.count);

    let pairs_luma: Vec<(String, Image, Image)> = samples
        .iter()
        .map(|s| (s.id.clone(), s.source.to_gray(), s.target.clone().unwrap()))
        .collect();
    let report = mean_lpips(&pairs_luma, &fe)?;
    println!(
        "source-luma vs real target: mean {:.4} +- {:.4} (the gap a translator must close)",
        report.mean, report.std
    );
    Ok(())
}
