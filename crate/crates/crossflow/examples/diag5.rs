//! scratch diagnostic 5: does the adapted velocity field read the condition
//! at all? Probe x1_hat = z + v(z, 0, cond) on val images and compare the
//! object-region intensities with the real targets; also a larger
//! sensor-sample run to separate memorization from generalization.

use crossflow::data::{toy_world_generate, ToyWorldSpec};
use crossflow::flow::{
    pretrain_base, train_lora, FlowConfig, LoraTrainOptions, PretrainOptions, TrainHyper,
};
use crossflow::img::Image;
use crossflow::tensor::{self, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn region_stats(img_gray: &Image, samples: &crossflow::data::PairedSample) -> (f32, f32, f32) {
    let mut c0 = (0.0, 0usize);
    let mut c1 = (0.0, 0usize);
    let mut bg = (0.0, 0usize);
    let boxes = samples.boxes.as_ref().unwrap();
    for y in 0..img_gray.height {
        for x in 0..img_gray.width {
            let v = img_gray.get(0, y, x);
            let mut hit = None;
            for b in boxes {
                if (x as f64) >= b.x_min && (x as f64) < b.x_max && (y as f64) >= b.y_min && (y as f64) < b.y_max {
                    hit = Some(b.class_id);
                    break;
                }
            }
            match hit {
                Some(0) => { c0.0 += v; c0.1 += 1; }
                Some(_) => { c1.0 += v; c1.1 += 1; }
                None => { bg.0 += v; bg.1 += 1; }
            }
        }
    }
    (c0.0 / c0.1.max(1) as f32, c1.0 / c1.1.max(1) as f32, bg.0 / bg.1.max(1) as f32)
}

fn main() -> crossflow::Result<()> {
    let world = ToyWorldSpec { seed: 77, ..Default::default() };
    let corpus: Vec<_> = toy_world_generate(&ToyWorldSpec { seed: 1234, ..world }, 128)
        .into_iter()
        .map(|s| s.source)
        .collect();
    let fc = FlowConfig::default();
    let popts = PretrainOptions { steps: 4000, learning_rate: 1e-3, seed: 10, instruction: 0 };
    let (base, _) = pretrain_base(&corpus, &fc, &popts)?;
    println!("pretrained.");

    let val = toy_world_generate(&ToyWorldSpec { seed: 99, ..world }, 8);

    for n_pairs in [24usize, 100] {
        let pairs: Vec<_> = toy_world_generate(&world, n_pairs)
            .into_iter()
            .map(|s| (s.source, s.target.unwrap()))
            .collect();
        let opts = LoraTrainOptions {
            rank: 16,
            alpha: 16.0,
            hyper: TrainHyper { learning_rate: 5e-4, steps: 1500, seed: 3 },
            instruction: 0,
        };
        let (lora, curve) = train_lora(&base, &base.attach_plan(), &pairs, &opts)?;
        let tail: f32 = curve.iter().rev().take(30).map(|(_, l)| l).sum::<f32>() / 30.0;

        // velocity probe at t = 0 on VAL (generalization) and TRAIN pair 0
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut probe = |src: &Image, sample: &crossflow::data::PairedSample| -> (f32, f32, f32) {
            let cond = src.to_model_tensor();
            let noise: Vec<f32> = (0..3 * 32 * 32)
                .map(|_| {
                    let u1: f32 = rng.gen_range(1e-6..1.0f32);
                    let u2: f32 = rng.gen_range(0.0..1.0f32);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
                })
                .collect();
            let z0 = Tensor::from_vec(&[3, 32, 32], noise).unwrap();
            let v = base.forward(&z0, 0.0, &cond, 0, Some(&lora)).unwrap();
            let x1_hat = tensor::add(&z0, &v).unwrap();
            let img = crossflow::img::Image::from_model_tensor(&x1_hat).unwrap().to_gray();
            region_stats(&img, sample)
        };

        let mut val_stats = (0.0f32, 0.0f32, 0.0f32);
        for s in &val {
            let (a, b, c) = probe(&s.source, s);
            val_stats.0 += a / val.len() as f32;
            val_stats.1 += b / val.len() as f32;
            val_stats.2 += c / val.len() as f32;
        }
        // real target stats for reference
        let mut real_stats = (0.0f32, 0.0f32, 0.0f32);
        for s in &val {
            let (a, b, c) = region_stats(&s.target.clone().unwrap(), s);
            real_stats.0 += a / val.len() as f32;
            real_stats.1 += b / val.len() as f32;
            real_stats.2 += c / val.len() as f32;
        }
        println!(
            "n={n_pairs:<4} tail-loss {tail:.3}  x1hat@t=0 val: disc {:.2} rect {:.2} bg {:.2}   (real: {:.2} / {:.2} / {:.2})",
            val_stats.0, val_stats.1, val_stats.2, real_stats.0, real_stats.1, real_stats.2
        );
    }
    Ok(())
}
