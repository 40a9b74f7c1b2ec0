//! scratch diagnostic: detector ceiling on real data + translation quality

use crossflow::data::{toy_world_generate, ToyWorldSpec};
use crossflow::detect::{train_and_eval, DetectorConfig, LabeledImage};
use crossflow::flow::{
    pretrain_base, train_lora, translate, FlowConfig, LoraTrainOptions, PretrainOptions,
    TrainHyper, TranslateOptions,
};
use crossflow::perceptual::{mean_lpips, FeatureExtractor};

fn labeled_real(spec: &ToyWorldSpec, n: usize) -> Vec<LabeledImage> {
    toy_world_generate(spec, n)
        .into_iter()
        .map(|s| LabeledImage { id: s.id, image: s.target.unwrap(), boxes: s.boxes.unwrap() })
        .collect()
}

fn main() -> crossflow::Result<()> {
    let world = ToyWorldSpec { seed: 77, ..Default::default() };
    let test = labeled_real(&ToyWorldSpec { seed: 88, ..world }, 48);

    // 1) detector ceiling on real data, varying epochs and train size
    for (n, epochs, lr) in [(48usize, 10u32, 2e-3f32), (48, 20, 2e-3), (96, 20, 2e-3), (96, 30, 3e-3), (48, 30, 3e-3)] {
        let train = labeled_real(&world, n);
        let config = DetectorConfig { learning_rate: lr, ..Default::default() };
        let r = train_and_eval(&train, &test, &config, epochs, 1)?;
        println!("real n={n:<3} epochs={epochs:<2} lr={lr}: mAP@0.50 {:.3} mAP@[..] {:.3}", r.map50, r.map5095);
    }

    // 2) flow translation quality vs LoRA steps
    let pre_world = ToyWorldSpec { seed: 1234, ..world };
    let corpus: Vec<_> = toy_world_generate(&pre_world, 128).into_iter().map(|s| s.source).collect();
    let fc = FlowConfig::default();
    let popts = PretrainOptions { steps: 1500, learning_rate: 3e-3, seed: 10, instruction: 0 };
    let t0 = std::time::Instant::now();
    let (base, curve) = pretrain_base(&corpus, &fc, &popts)?;
    println!(
        "pretrain {} steps in {:.1}s, loss {:.3} -> {:.3}",
        popts.steps,
        t0.elapsed().as_secs_f32(),
        curve[0].1,
        curve.iter().rev().take(20).map(|(_, l)| l).sum::<f32>() / 20.0
    );

    let pairs: Vec<_> = toy_world_generate(&world, 24)
        .into_iter()
        .map(|s| (s.source, s.target.unwrap()))
        .collect();
    let val = toy_world_generate(&ToyWorldSpec { seed: 99, ..world }, 12);
    let fe = FeatureExtractor::from_seed(42);

    // luma-copy baseline LPIPS
    let luma_pairs: Vec<_> = val
        .iter()
        .map(|s| (s.id.clone(), s.source.to_gray(), s.target.clone().unwrap()))
        .collect();
    println!("luma-copy LPIPS: {:.4}", mean_lpips(&luma_pairs, &fe)?.mean);

    for steps in [10u64, 100, 400, 1000] {
        let t0 = std::time::Instant::now();
        let opts = LoraTrainOptions {
            rank: 16,
            alpha: 16.0,
            hyper: TrainHyper { learning_rate: 5e-4, steps, seed: 3 },
            instruction: 1,
        };
        let (lora, _) = train_lora(&base, &base.attach_plan(), &pairs, &opts)?;
        // translate val, LPIPS + detector transfer
        let mut synth_pairs = Vec::new();
        let mut synth_train = Vec::new();
        for (i, s) in val.iter().enumerate() {
            let topts = TranslateOptions { steps: 20, seed: 1000 + i as u64, instruction: 1 };
            let out = translate(&base, Some(&lora), &s.source, &topts)?;
            synth_pairs.push((s.id.clone(), out.to_gray(), s.target.clone().unwrap()));
            synth_train.push(LabeledImage {
                id: s.id.clone(),
                image: out.to_gray(),
                boxes: s.boxes.clone().unwrap(),
            });
        }
        let lp = mean_lpips(&synth_pairs, &fe)?;
        // detector trained on the 12 synthetic images (tiny, but relative signal)
        let config = DetectorConfig { learning_rate: 3e-3, ..Default::default() };
        let r = train_and_eval(&synth_train, &test, &config, 30, 1)?;
        println!(
            "lora steps {steps:>4}: LPIPS {:.4}  synth-detector mAP@0.50 {:.3}  ({:.1}s)",
            lp.mean,
            r.map50,
            t0.elapsed().as_secs_f32()
        );
    }
    Ok(())
}
