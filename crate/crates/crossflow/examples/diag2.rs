//! scratch diagnostic 2: pretrain quality vs steps/lr, loss-by-t profile,
//! identity reconstruction error.

use crossflow::data::{toy_world_generate, ToyWorldSpec};
use crossflow::flow::{
    fm_loss, pretrain_base, translate, FlowConfig, PretrainOptions, TranslateOptions,
};
use crossflow::img::Image;
use crossflow::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn recon_mse(model: &crossflow::flow::FlowModel, img: &Image, steps: u32) -> f32 {
    let topts = TranslateOptions { steps, seed: 3, instruction: 0 };
    let recon = translate(model, None, img, &topts).unwrap();
    img.to_rgb3()
        .data
        .iter()
        .zip(recon.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f32>()
        / recon.data.len() as f32
}

fn main() -> crossflow::Result<()> {
    let world = ToyWorldSpec { seed: 1234, ..Default::default() };
    let corpus: Vec<_> = toy_world_generate(&world, 128).into_iter().map(|s| s.source).collect();
    let held = toy_world_generate(&ToyWorldSpec { seed: 4321, ..world }, 4);
    let fc = FlowConfig::default();

    for (steps, lr) in [(1500u64, 3e-3f32), (1500, 1e-3), (4000, 1e-3), (4000, 3e-3)] {
        let t0 = std::time::Instant::now();
        let popts = PretrainOptions { steps, learning_rate: lr, seed: 10, instruction: 0 };
        let (model, curve) = pretrain_base(&corpus, &fc, &popts)?;
        let tail: f32 = curve.iter().rev().take(50).map(|(_, l)| l).sum::<f32>() / 50.0;

        // loss by t bucket on held-out identity pairs
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut buckets = [0.0f32; 5];
        let mut counts = [0usize; 5];
        for s in &held {
            let x1 = s.source.to_model_tensor();
            for k in 0..10 {
                let t = (k as f32 + 0.5) / 10.0;
                let noise: Vec<f32> = (0..3 * 32 * 32).map(|_| {
                    let u1: f32 = rng.gen_range(1e-6..1.0f32);
                    let u2: f32 = rng.gen_range(0.0..1.0f32);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
                }).collect();
                let x0 = Tensor::from_vec(&[3, 32, 32], noise)?;
                let l = fm_loss(&model, None, &x1, &x1, 0, &x0, t)?.item();
                let b = ((t * 5.0) as usize).min(4);
                buckets[b] += l;
                counts[b] += 1;
            }
        }
        let prof: Vec<String> = buckets
            .iter()
            .zip(counts.iter())
            .map(|(s, c)| format!("{:.3}", s / *c as f32))
            .collect();
        let mse: f32 = held.iter().map(|s| recon_mse(&model, &s.source, 20)).sum::<f32>() / 4.0;
        println!(
            "steps {steps:>5} lr {lr}: tail-loss {tail:.3}  loss-by-t {}  recon-MSE {mse:.4}  ({:.0}s)",
            prof.join("/"),
            t0.elapsed().as_secs_f32()
        );
    }
    Ok(())
}
