//! scratch diagnostic 4: where does LoRA translation start working on the
//! lr x steps plane?

use crossflow::data::{toy_world_generate, ToyWorldSpec};
use crossflow::detect::{train_and_eval, DetectorConfig, LabeledImage};
use crossflow::flow::{
    pretrain_base, train_lora, translate, FlowConfig, LoraTrainOptions, PretrainOptions,
    TrainHyper, TranslateOptions,
};
use crossflow::perceptual::{mean_lpips, FeatureExtractor};

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
    let det_cfg = DetectorConfig { learning_rate: 3e-3, ..Default::default() };

    for (lr, steps) in [
        (5e-4f32, 1000u64),
        (5e-4, 4000),
        (2e-3, 400),
        (2e-3, 1500),
        (5e-3, 400),
        (5e-3, 1500),
    ] {
        let t0 = std::time::Instant::now();
        let opts = LoraTrainOptions {
            rank: 16,
            alpha: 16.0,
            hyper: TrainHyper { learning_rate: lr, steps, seed: 3 },
            instruction: 0,
        };
        let (lora, curve) = train_lora(&base, &base.attach_plan(), &pairs, &opts)?;
        let tail: f32 = curve.iter().rev().take(30).map(|(_, l)| l).sum::<f32>() / 30.0;

        let mut vp = Vec::new();
        let mut c0 = (0.0f32, 0usize);
        for (i, s) in val.iter().enumerate() {
            let topts = TranslateOptions { steps: 20, seed: 1000 + i as u64, instruction: 0 };
            let out = translate(&base, Some(&lora), &s.source, &topts)?;
            for b in s.boxes.as_ref().unwrap() {
                if b.class_id == 0 {
                    let cx = ((b.x_min + b.x_max) / 2.0) as usize;
                    let cy = ((b.y_min + b.y_max) / 2.0) as usize;
                    c0.0 += out.to_gray().get(0, cy, cx);
                    c0.1 += 1;
                }
            }
            vp.push((s.id.clone(), out.to_gray(), s.target.clone().unwrap()));
        }
        let lp = mean_lpips(&vp, &fe)?;

        let mut synth_train = Vec::new();
        for (i, s) in synth_src.iter().enumerate() {
            let topts = TranslateOptions { steps: 20, seed: 2000 + i as u64, instruction: 0 };
            let out = translate(&base, Some(&lora), &s.source, &topts)?;
            synth_train.push(LabeledImage {
                id: s.id.clone(),
                image: out.to_gray(),
                boxes: s.boxes.clone().unwrap(),
            });
        }
        let r = train_and_eval(&synth_train, &test, &det_cfg, 30, 1)?;
        println!(
            "lr {lr:<6} steps {steps:>4}: train-loss {tail:.3}  LPIPS {:.4}  disc-intensity {:.2} (want 0.88)  synth mAP {:.3}  ({:.0}s)",
            lp.mean,
            c0.0 / c0.1.max(1) as f32,
            r.map50,
            t0.elapsed().as_secs_f32()
        );
    }
    Ok(())
}
