//! scratch diagnostic 3: LoRA translation quality with shared instruction,
//! fair-sized synthetic detector transfer, per-class intensity stats.

use crossflow::data::{toy_world_generate, ToyWorldSpec};
use crossflow::detect::{train_and_eval, DetectorConfig, LabeledImage};
use crossflow::flow::{
    pretrain_base, train_lora, translate, FlowConfig, LoraTrainOptions, PretrainOptions,
    TrainHyper, TranslateOptions,
};
use crossflow::perceptual::{mean_lpips, FeatureExtractor};

fn main() -> crossflow::Result<()> {
    let world = ToyWorldSpec { seed: 77, ..Default::default() };
    let instr = 0usize; // shared instruction: same embedding for pretext and translation

    let pre_world = ToyWorldSpec { seed: 1234, ..world };
    let corpus: Vec<_> = toy_world_generate(&pre_world, 128).into_iter().map(|s| s.source).collect();
    let fc = FlowConfig::default();
    let popts = PretrainOptions { steps: 4000, learning_rate: 1e-3, seed: 10, instruction: instr };
    let t0 = std::time::Instant::now();
    let (base, curve) = pretrain_base(&corpus, &fc, &popts)?;
    println!(
        "pretrain 4000 steps in {:.0}s, tail loss {:.3}",
        t0.elapsed().as_secs_f32(),
        curve.iter().rev().take(50).map(|(_, l)| l).sum::<f32>() / 50.0
    );

    let pairs: Vec<_> = toy_world_generate(&world, 24)
        .into_iter()
        .map(|s| (s.source, s.target.unwrap()))
        .collect();
    let val = toy_world_generate(&ToyWorldSpec { seed: 99, ..world }, 12);
    let synth_src = toy_world_generate(&ToyWorldSpec { seed: 55, ..world }, 64);
    let test: Vec<LabeledImage> = toy_world_generate(&ToyWorldSpec { seed: 88, ..world }, 48)
        .into_iter()
        .map(|s| LabeledImage { id: s.id, image: s.target.unwrap(), boxes: s.boxes.unwrap() })
        .collect();
    let fe = FeatureExtractor::from_seed(42);

    let luma_pairs: Vec<_> = val
        .iter()
        .map(|s| (s.id.clone(), s.source.to_gray(), s.target.clone().unwrap()))
        .collect();
    println!("luma-copy LPIPS baseline: {:.4}", mean_lpips(&luma_pairs, &fe)?.mean);

    // real-data detector reference at n=64
    let real_train: Vec<LabeledImage> = synth_src
        .iter()
        .map(|s| LabeledImage {
            id: s.id.clone(),
            image: s.target.clone().unwrap(),
            boxes: s.boxes.clone().unwrap(),
        })
        .collect();
    let det_cfg = DetectorConfig { learning_rate: 3e-3, ..Default::default() };
    let r = train_and_eval(&real_train, &test, &det_cfg, 30, 1)?;
    println!("real n=64 reference: mAP@0.50 {:.3}", r.map50);

    for steps in [100u64, 400, 1500] {
        let t0 = std::time::Instant::now();
        let opts = LoraTrainOptions {
            rank: 16,
            alpha: 16.0,
            hyper: TrainHyper { learning_rate: 5e-4, steps, seed: 3 },
            instruction: instr,
        };
        let (lora, _) = train_lora(&base, &base.attach_plan(), &pairs, &opts)?;

        // LPIPS on val
        let mut vp = Vec::new();
        for (i, s) in val.iter().enumerate() {
            let topts = TranslateOptions { steps: 20, seed: 1000 + i as u64, instruction: instr };
            let out = translate(&base, Some(&lora), &s.source, &topts)?;
            vp.push((s.id.clone(), out.to_gray(), s.target.clone().unwrap()));
        }
        let lp = mean_lpips(&vp, &fe)?;

        // class-region intensity stats: synth vs real on val
        let (mut s0, mut s1, mut r0, mut r1) = (vec![], vec![], vec![], vec![]);
        for (i, s) in val.iter().enumerate() {
            let synth = &vp[i].1;
            let real = s.target.as_ref().unwrap();
            for b in s.boxes.as_ref().unwrap() {
                let cx = ((b.x_min + b.x_max) / 2.0) as usize;
                let cy = ((b.y_min + b.y_max) / 2.0) as usize;
                let (sv, rv) = (synth.get(0, cy, cx), real.get(0, cy, cx));
                if b.class_id == 0 {
                    s0.push(sv);
                    r0.push(rv);
                } else {
                    s1.push(sv);
                    r1.push(rv);
                }
            }
        }
        let m = |v: &[f32]| if v.is_empty() { f32::NAN } else { v.iter().sum::<f32>() / v.len() as f32 };

        // detector transfer: 64 synthetic train images
        let mut synth_train = Vec::new();
        for (i, s) in synth_src.iter().enumerate() {
            let topts = TranslateOptions { steps: 20, seed: 2000 + i as u64, instruction: instr };
            let out = translate(&base, Some(&lora), &s.source, &topts)?;
            synth_train.push(LabeledImage {
                id: s.id.clone(),
                image: out.to_gray(),
                boxes: s.boxes.clone().unwrap(),
            });
        }
        let r = train_and_eval(&synth_train, &test, &det_cfg, 30, 1)?;
        println!(
            "lora s{steps:>4}: LPIPS {:.4}  class0 synth {:.2} (real {:.2})  class1 synth {:.2} (real {:.2})  synth-n64 mAP {:.3}  ({:.0}s)",
            lp.mean, m(&s0), m(&r0), m(&s1), m(&r1), r.map50,
            t0.elapsed().as_secs_f32()
        );
    }
    Ok(())
}
