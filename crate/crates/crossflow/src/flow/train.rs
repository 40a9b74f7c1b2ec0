//! Flow-matching training: the pre-training pretext and LoRA fine-tuning.
//!
//! Both loops draw one sample per step (batch size 1), and a "step" is a
//! single optimizer update. The interpolation path is the straight line
//! z_t = (1-t) x0 + t x1 with target velocity u = x1 - x0; t is sampled
//! uniformly and x0 is standard normal, all from the job's seeded stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FlowModel, MODEL_CHANNELS};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::lora::{init_adapters_for_plan, AttachPlan, LoraSet};
use crate::tensor::{self, adam_update, AdamState, Tensor};

/// Training-loop hyperparameters; batch size is fixed at 1.
#[derive(Debug, Clone, Copy)]
pub struct TrainHyper {
    pub learning_rate: f32,
    pub steps: u64,
    pub seed: u64,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("training requires at least 1 step".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Straight-line interpolation state and its target velocity.
///
/// Returns `(z_t, u)` with `z_t = (1-t) x0 + t x1` and `u = x1 - x0`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f32) -> Result<(Tensor, Tensor)> {
    if x0.shape() != x1.shape() {
        return Err(Error::Dimension(format!(
            "interpolate: shapes {:?} and {:?} differ",
            x0.shape(),
            x1.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("interpolate: t = {t} outside [0,1]")));
    }
    let z = tensor::add(&tensor::scale(x0, 1.0 - t), &tensor::scale(x1, t))?;
    let u = tensor::sub(x1, x0)?;
    Ok((z, u))
}

/// Mean squared error between the predicted and target velocity fields.
pub fn fm_loss(
    model: &FlowModel,
    lora: Option<&LoraSet>,
    x1: &Tensor,
    cond: &Tensor,
    instruction: usize,
    x0: &Tensor,
    t: f32,
) -> Result<Tensor> {
    let (z, u) = interpolate(x0, x1, t)?;
    let v = model.forward(&z, t, cond, instruction, lora)?;
    tensor::mse(&v, &u)
}

fn sample_noise(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let data: Vec<f32> = (0..MODEL_CHANNELS * size * size)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::from_vec(&[MODEL_CHANNELS, size, size], data).expect("consistent shape")
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub steps: u64,
    pub learning_rate: f32,
    pub seed: u64,
    pub instruction: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions { steps: 1200, learning_rate: 3e-3, seed: 0, instruction: 0 }
    }
}

/// Identity-editing pretext: reconstruct each corpus image conditioned on
/// itself. Stands in for the large-scale RGB pre-training of the base model.
///
/// Returns the trained model and the per-step loss curve.
pub fn pretrain_base(
    corpus: &[Image],
    config: &super::FlowConfig,
    opts: &PretrainOptions,
) -> Result<(FlowModel, Vec<(u64, f32)>)> {
    if corpus.is_empty() {
        return Err(Error::Config("pretrain corpus is empty".into()));
    }
    let model = FlowModel::init(config, opts.seed)?;
    model.set_trainable(true);
    let params = model.parameters();
    let mut states: Vec<AdamState> = params.iter().map(|(_, p)| AdamState::for_param(p)).collect();

    let tensors: Vec<Tensor> = corpus.iter().map(|im| im.to_model_tensor()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut curve = Vec::with_capacity(opts.steps as usize);
    for step in 1..=opts.steps {
        let idx = rng.gen_range(0..tensors.len());
        let x1 = &tensors[idx];
        let t: f32 = rng.gen_range(0.0..=1.0);
        let x0 = sample_noise(&mut rng, config.image_size);
        let loss = fm_loss(&model, None, x1, x1, opts.instruction, &x0, t)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::Training { step, message: "loss is not finite".into() });
        }
        loss.backward()?;
        for ((_, p), st) in params.iter().zip(states.iter_mut()) {
            adam_update(p, st, opts.learning_rate)?;
        }
        curve.push((step, loss_val));
    }
    model.set_trainable(false);
    Ok((model, curve))
}

/// Mean flow-matching loss over a fixed evaluation set; the same seed gives
/// the same (t, noise) draws, so values are comparable across models.
pub fn eval_loss(
    model: &FlowModel,
    lora: Option<&LoraSet>,
    pairs: &[(Image, Image)],
    instruction: usize,
    seed: u64,
) -> Result<f32> {
    if pairs.is_empty() {
        return Err(Error::Contract("eval_loss: empty pair set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f64;
    for (src, tgt) in pairs {
        let cond = src.to_model_tensor();
        let x1 = tgt.to_model_tensor();
        let t: f32 = rng.gen_range(0.0..=1.0);
        let x0 = sample_noise(&mut rng, model.config.image_size);
        let loss = fm_loss(model, lora, &x1, &cond, instruction, &x0, t)?;
        total += loss.item() as f64;
    }
    Ok((total / pairs.len() as f64) as f32)
}

#[derive(Debug, Clone)]
pub struct LoraTrainOptions {
    pub rank: usize,
    pub alpha: f32,
    pub hyper: TrainHyper,
    pub instruction: usize,
}

/// Fine-tune adapters on pixel-aligned (source, target) pairs with the base
/// model frozen. Only adapter parameters are updated; per step the pair,
/// t ~ U[0,1] and x0 ~ N(0,I) come from the job's seeded stream.
///
/// Returns the adapters and the per-step loss curve.
pub fn train_lora(
    base: &FlowModel,
    plan: &AttachPlan,
    pairs: &[(Image, Image)],
    opts: &LoraTrainOptions,
) -> Result<(LoraSet, Vec<(u64, f32)>)> {
    if pairs.is_empty() {
        return Err(Error::Config("train_lora: empty pair set".into()));
    }
    opts.hyper.validate()?;
    base.set_trainable(false);
    let lora = init_adapters_for_plan(
        plan,
        |t| base.target_dims(t),
        opts.rank,
        opts.alpha,
        opts.hyper.seed,
    )?;
    lora.set_trainable(true);
    let params = lora.parameters();
    let mut states: Vec<AdamState> = params.iter().map(AdamState::for_param).collect();

    let sources: Vec<Tensor> = pairs.iter().map(|(s, _)| s.to_model_tensor()).collect();
    let targets: Vec<Tensor> = pairs.iter().map(|(_, t)| t.to_model_tensor()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.hyper.seed);
    let mut curve = Vec::with_capacity(opts.hyper.steps as usize);
    for step in 1..=opts.hyper.steps {
        let idx = rng.gen_range(0..pairs.len());
        let t: f32 = rng.gen_range(0.0..=1.0);
        let x0 = sample_noise(&mut rng, base.config.image_size);
        let loss = fm_loss(base, Some(&lora), &targets[idx], &sources[idx], opts.instruction, &x0, t)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::Training { step, message: "loss is not finite".into() });
        }
        loss.backward()?;
        for (p, st) in params.iter().zip(states.iter_mut()) {
            adam_update(p, st, opts.hyper.learning_rate)?;
        }
        curve.push((step, loss_val));
    }
    lora.set_trainable(false);
    Ok((lora, curve))
}

/// Write a loss curve as `step,loss` CSV.
pub fn save_loss_curve(path: &std::path::Path, curve: &[(u64, f32)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::from("step,loss\n");
    for (step, loss) in curve {
        out.push_str(&format!("{step},{loss}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}
