//! LoRA adapter mechanics on a frozen generator: exact zero-init identity,
//! merged vs unmerged forward agreement, parameter counting, and the
//! adapter file round-trip.

use crossflow::flow::{translate, FlowConfig, FlowModel, TranslateOptions};
use crossflow::img::Image;
use crossflow::lora::{
    adapter_delta, init_adapters_for_plan, merge, trainable_parameter_count, LoraSet,
};
use crossflow::tensor;

fn main() -> crossflow::Result<()> {
    let config = FlowConfig::default();
    let model = FlowModel::init(&config, 42)?;
    let plan = model.attach_plan();
    println!("attach plan: {} targets (q/k/v/o + fc1/fc2 per block)", plan.targets.len());

    // fresh adapters are an exact no-op on the whole generator
    let lora = init_adapters_for_plan(&plan, |t| model.target_dims(t), 16, 16.0, 1)?;
    let mut src = Image::new(3, config.image_size, config.image_size);
    for (i, v) in src.data.iter_mut().enumerate() {
        *v = ((i * 37) % 255) as f32 / 255.0;
    }
    let opts = TranslateOptions { steps: 8, seed: 9, instruction: 0 };
    let plain = translate(&model, None, &src, &opts)?;
    let adapted = translate(&model, Some(&lora), &src, &opts)?;
    let max_diff = plain
        .data
        .iter()
        .zip(adapted.data.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("zero-init identity: max |plain - adapted| = {max_diff} (exact 0 expected)");

    // merged and unmerged paths agree
    let ad = &lora.adapters[0];
    let w = tensor::Tensor::from_vec(
        &[ad.d_out(), ad.d_in()],
        (0..ad.d_out() * ad.d_in()).map(|i| (i as f32 * 0.73).sin() * 0.1).collect(),
    )?;
    let mut tweaked = ad.detach_copy();
    tweaked.a = tensor::Tensor::from_vec(
        &[ad.d_out(), ad.rank],
        (0..ad.d_out() * ad.rank).map(|i| (i as f32 * 0.31).cos() * 0.05).collect(),
    )?;
    let merged = merge(&w, &tweaked)?;
    let x = tensor::Tensor::from_vec(
        &[ad.d_in()],
        (0..ad.d_in()).map(|i| (i as f32 * 1.7).sin()).collect(),
    )?;
    let via_adapter = crossflow::lora::adapted_forward(&x, &w, &tweaked)?;
    let via_merge = tensor::matmul(&merged, &tensor::reshape(&x, &[ad.d_in(), 1])?)?;
    let diff = via_adapter
        .to_vec()
        .iter()
        .zip(via_merge.to_vec().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("merge equivalence: max abs diff = {diff:.2e} (<= 1e-5 expected)");
    println!("delta norm after tweak: {:.4}", adapter_delta(&tweaked).to_vec().iter().map(|v| v * v).sum::<f32>().sqrt());

    // parameter budget
    let report = trainable_parameter_count(&model.parameters(), &plan, 2)?;
    println!(
        "rank-2 adapters: {} trainable vs {} frozen ({:.1}% of total)",
        report.trainable,
        report.frozen,
        100.0 * report.adapter_fraction()
    );

    // file round-trip
    let mut buf = Vec::new();
    lora.save(&mut buf)?;
    let back = LoraSet::load(&mut buf.as_slice())?;
    assert_eq!(back.adapters.len(), lora.adapters.len());
    println!("adapter file round-trip: {} adapters, {} bytes", back.adapters.len(), buf.len());
    Ok(())
}
