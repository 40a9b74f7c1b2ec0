//! Low-rank adapters for frozen projection weights.
//!
//! An adapter contributes `delta_w = (alpha/r) * A * B` on top of a frozen
//! weight `W[d_out, d_in]`. The up projection `A[d_out, r]` starts at zero and
//! the down projection `B[r, d_in]` is Kaiming-uniform, so a fresh adapter is
//! an exact no-op. During training only `A` and `B` receive gradients; the
//! merged form `W + delta_w` is produced on demand for export.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, read_tensor_record, write_tensor_record, Tensor};

pub const LORA_MAGIC: &[u8; 4] = b"LORA";
pub const LORA_VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// Zero-initialized up projection, `[d_out, r]`.
    pub a: Tensor,
    /// Kaiming-uniform down projection, `[r, d_in]`.
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f32,
    /// Identifier of the wrapped projection, e.g. `block0.attn.q`.
    pub target_name: String,
}

/// Projection identifiers inside a generator that adapters attach to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttachPlan {
    pub targets: Vec<String>,
}

impl AttachPlan {
    pub fn new(targets: Vec<String>) -> AttachPlan {
        AttachPlan { targets }
    }

    pub fn empty() -> AttachPlan {
        AttachPlan { targets: Vec::new() }
    }

    /// Query/key/value/output projections of every self-attention block plus
    /// both MLP linear projections, for a backbone of `blocks` depth.
    pub fn full_for_blocks(blocks: usize) -> AttachPlan {
        let mut targets = Vec::new();
        for i in 0..blocks {
            for p in ["q", "k", "v", "o"] {
                targets.push(format!("block{i}.attn.{p}"));
            }
            for p in ["fc1", "fc2"] {
                targets.push(format!("block{i}.mlp.{p}"));
            }
        }
        AttachPlan { targets }
    }
}

/// Kaiming-uniform bound with the a = sqrt(5) leaky-ReLU convention used by
/// standard linear layers: gain^2 = 2/(1+5) = 1/3, bound = sqrt(3/fan_in)*gain
/// = 1/sqrt(fan_in).
fn kaiming_uniform_bound(fan_in: usize) -> f32 {
    1.0 / (fan_in as f32).sqrt()
}

/// Fresh adapter: `A = 0`, `B ~ U(-1/sqrt(d_in), 1/sqrt(d_in))` from `seed`.
/// The adapted model output equals the base output exactly at creation.
pub fn init_adapter(
    d_out: usize,
    d_in: usize,
    rank: usize,
    alpha: f32,
    seed: u64,
    target_name: &str,
) -> Result<LoraAdapter> {
    if d_out == 0 || d_in == 0 {
        return Err(Error::Config("init_adapter: dimensions must be positive".into()));
    }
    if rank == 0 {
        return Err(Error::Config("init_adapter: rank must be at least 1".into()));
    }
    if rank > d_out.min(d_in) / 2 {
        return Err(Error::Config(format!(
            "init_adapter: rank {rank} exceeds min({d_out},{d_in})/2 = {}",
            d_out.min(d_in) / 2
        )));
    }
    if alpha <= 0.0 {
        return Err(Error::Config("init_adapter: alpha must be positive".into()));
    }
    let a = Tensor::zeros(&[d_out, rank]);
    let bound = kaiming_uniform_bound(d_in);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b_data: Vec<f32> = (0..rank * d_in).map(|_| rng.gen_range(-bound..bound)).collect();
    let b = Tensor::from_vec(&[rank, d_in], b_data)?;
    Ok(LoraAdapter { a, b, rank, alpha, target_name: target_name.to_string() })
}

impl LoraAdapter {
    pub fn d_out(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    /// Mark `A` and `B` trainable (or frozen).
    pub fn set_trainable(&self, trainable: bool) {
        self.a.set_requires_grad(trainable);
        self.b.set_requires_grad(trainable);
    }

    pub fn parameter_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// Detached copy sharing no storage with `self`.
    pub fn detach_copy(&self) -> LoraAdapter {
        LoraAdapter {
            a: self.a.detach_copy(),
            b: self.b.detach_copy(),
            rank: self.rank,
            alpha: self.alpha,
            target_name: self.target_name.clone(),
        }
    }
}

/// Materialized increment `(alpha/r) * A * B`, shape `[d_out, d_in]`.
pub fn adapter_delta(adapter: &LoraAdapter) -> Tensor {
    let ab = tensor::matmul(&adapter.a, &adapter.b).expect("adapter shapes are consistent");
    tensor::scale(&ab, adapter.scaling())
}

/// `W x + (alpha/r) A (B x)` for a column vector `x[d_in]`, never forming the
/// `d_out x d_in` increment.
pub fn adapted_forward(x: &Tensor, w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    if x.shape().len() != 1 {
        return Err(Error::Dimension(format!(
            "adapted_forward: expected vector input, got {:?}",
            x.shape()
        )));
    }
    let d_in = x.shape()[0];
    if w.shape() != [adapter.d_out(), d_in] || adapter.d_in() != d_in {
        return Err(Error::Dimension(format!(
            "adapted_forward: W {:?}, adapter ({}x{}), x {:?}",
            w.shape(),
            adapter.d_out(),
            adapter.d_in(),
            x.shape()
        )));
    }
    let col = tensor::reshape(x, &[d_in, 1])?;
    let base = tensor::matmul(w, &col)?;
    let bx = tensor::matmul(&adapter.b, &col)?;
    let abx = tensor::matmul(&adapter.a, &bx)?;
    let out = tensor::add(&base, &tensor::scale(&abx, adapter.scaling()))?;
    tensor::reshape(&out, &[adapter.d_out()])
}

/// Merged weight `W + delta_w`; `W` itself is untouched.
pub fn merge(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    if w.shape() != [adapter.d_out(), adapter.d_in()] {
        return Err(Error::Dimension(format!(
            "merge: W {:?} does not match adapter ({}x{})",
            w.shape(),
            adapter.d_out(),
            adapter.d_in()
        )));
    }
    tensor::add(w, &adapter_delta(adapter))
}

/// Trainable (adapter) and frozen (base) parameter counts for a plan applied
/// to a model's named weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCountReport {
    pub trainable: usize,
    pub frozen: usize,
}

impl ParameterCountReport {
    pub fn adapter_fraction(&self) -> f64 {
        self.trainable as f64 / (self.trainable + self.frozen) as f64
    }
}

/// Count adapter parameters a plan would train on top of a frozen model.
///
/// `model_params` is the full named parameter list; a plan target `t` wraps
/// the matrix named `t.w`. Unknown targets are configuration errors.
pub fn trainable_parameter_count(
    model_params: &[(String, Tensor)],
    plan: &AttachPlan,
    rank: usize,
) -> Result<ParameterCountReport> {
    let frozen: usize = model_params.iter().map(|(_, t)| t.numel()).sum();
    let mut trainable = 0usize;
    for target in &plan.targets {
        let weight_name = format!("{target}.w");
        let w = model_params
            .iter()
            .find(|(n, _)| *n == weight_name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("plan target {target} not found in model")))?;
        let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
        trainable += d_out * rank + rank * d_in;
    }
    Ok(ParameterCountReport { trainable, frozen })
}

/// Named set of adapters keyed by target, kept in plan order.
#[derive(Debug, Clone, Default)]
pub struct LoraSet {
    pub adapters: Vec<LoraAdapter>,
}

impl LoraSet {
    pub fn get(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target_name == target)
    }

    pub fn set_trainable(&self, trainable: bool) {
        for a in &self.adapters {
            a.set_trainable(trainable);
        }
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.adapters.iter().flat_map(|a| [a.a.clone(), a.b.clone()]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.adapters.iter().map(|a| a.parameter_count()).sum()
    }

    pub fn detach_copy(&self) -> LoraSet {
        LoraSet { adapters: self.adapters.iter().map(|a| a.detach_copy()).collect() }
    }

    /// Adapter file: magic `LORA`, version byte, adapter count (u64 LE), then
    /// per adapter: name (u64 LE length + UTF-8), rank u64 LE, alpha f32 LE,
    /// and the `A`/`B` matrices as core tensor records.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(LORA_MAGIC)?;
        w.write_all(&[LORA_VERSION])?;
        w.write_all(&(self.adapters.len() as u64).to_le_bytes())?;
        for a in &self.adapters {
            w.write_all(&(a.target_name.len() as u64).to_le_bytes())?;
            w.write_all(a.target_name.as_bytes())?;
            w.write_all(&(a.rank as u64).to_le_bytes())?;
            w.write_all(&a.alpha.to_le_bytes())?;
            write_tensor_record(w, "A", a.a.shape(), &a.a.data())?;
            write_tensor_record(w, "B", a.b.shape(), &a.b.data())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<LoraSet> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != LORA_MAGIC {
            return Err(Error::Format("bad adapter file magic".into()));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != LORA_VERSION {
            return Err(Error::Format(format!("unsupported adapter file version {}", version[0])));
        }
        let mut count_buf = [0u8; 8];
        r.read_exact(&mut count_buf)?;
        let count = u64::from_le_bytes(count_buf);
        let mut adapters = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut len_buf = [0u8; 8];
            r.read_exact(&mut len_buf)?;
            let name_len = u64::from_le_bytes(len_buf) as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let target_name = String::from_utf8(name_buf)
                .map_err(|_| Error::Format("adapter target name is not UTF-8".into()))?;
            let mut rank_buf = [0u8; 8];
            r.read_exact(&mut rank_buf)?;
            let rank = u64::from_le_bytes(rank_buf) as usize;
            let mut alpha_buf = [0u8; 4];
            r.read_exact(&mut alpha_buf)?;
            let alpha = f32::from_le_bytes(alpha_buf);
            let (na, sa, da) = read_tensor_record(r)?;
            let (nb, sb, db) = read_tensor_record(r)?;
            if na != "A" || nb != "B" {
                return Err(Error::Format("adapter record order must be A then B".into()));
            }
            adapters.push(LoraAdapter {
                a: Tensor::from_vec(&sa, da)?,
                b: Tensor::from_vec(&sb, db)?,
                rank,
                alpha,
                target_name,
            });
        }
        Ok(LoraSet { adapters })
    }

    pub fn save_file(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        self.save(&mut f)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_file(path: &std::path::Path) -> Result<LoraSet> {
        let mut f = std::fs::File::open(path)?;
        LoraSet::load(&mut f)
    }
}

/// One fresh adapter per plan target, each seeded independently from `seed`.
pub fn init_adapters_for_plan(
    plan: &AttachPlan,
    dims: impl Fn(&str) -> Option<(usize, usize)>,
    rank: usize,
    alpha: f32,
    seed: u64,
) -> Result<LoraSet> {
    let mut adapters = Vec::with_capacity(plan.targets.len());
    for (idx, target) in plan.targets.iter().enumerate() {
        let (d_out, d_in) = dims(target)
            .ok_or_else(|| Error::Config(format!("plan target {target} not found in model")))?;
        adapters.push(init_adapter(
            d_out,
            d_in,
            rank,
            alpha,
            seed.wrapping_add(idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            target,
        )?);
    }
    Ok(LoraSet { adapters })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_adapter_delta_is_zero() {
        let ad = init_adapter(8, 8, 2, 2.0, 42, "t").unwrap();
        assert!(adapter_delta(&ad).to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_gives_bit_identical_down_projection() {
        let a = init_adapter(8, 8, 2, 2.0, 7, "t").unwrap();
        let b = init_adapter(8, 8, 2, 2.0, 7, "t").unwrap();
        let ba: Vec<u32> = a.b.to_vec().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.b.to_vec().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ba, bb);
    }

    #[test]
    fn init_shapes_and_nonzero_down() {
        let ad = init_adapter(4, 4, 2, 2.0, 3, "t").unwrap();
        assert_eq!(ad.a.shape(), &[4, 2]);
        assert_eq!(ad.b.shape(), &[2, 4]);
        assert!(ad.a.to_vec().iter().all(|&v| v == 0.0));
        assert!(ad.b.to_vec().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn rank_limit_enforced() {
        assert!(init_adapter(8, 8, 5, 5.0, 0, "t").is_err());
        assert!(init_adapter(8, 8, 4, 4.0, 0, "t").is_ok());
    }

    #[test]
    fn delta_with_identity_up_matrix() {
        // r=2, alpha=2 -> scale 1; A=I2, B=[[1,2],[3,4]] -> delta = B
        let mut ad = init_adapter(2, 4, 1, 1.0, 0, "t").unwrap();
        ad.a = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        ad.b = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        ad.rank = 2;
        ad.alpha = 2.0;
        let d = adapter_delta(&ad);
        assert_eq!(d.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn paper_grid_scale_is_exactly_one() {
        // rank 16 with alpha = 16 -> alpha/r = 1 exactly
        let ad = init_adapter(64, 64, 16, 16.0, 5, "t").unwrap();
        assert_eq!(ad.scaling(), 1.0);
        let ad32 = init_adapter(64, 64, 32, 32.0, 5, "t").unwrap();
        assert_eq!(ad32.scaling(), 1.0);
    }

    #[test]
    fn fresh_adapter_forward_equals_base_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::from_vec(&[6, 6], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let ad = init_adapter(6, 6, 2, 2.0, 11, "t").unwrap();
        let x = Tensor::from_vec(&[6], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let adapted = adapted_forward(&x, &w, &ad).unwrap();
        let base = tensor::matmul(&w, &tensor::reshape(&x, &[6, 1]).unwrap()).unwrap();
        assert_eq!(adapted.to_vec(), base.to_vec());
    }

    #[test]
    fn pure_delta_identity_path() {
        // W = 0, alpha/r = 1, A = I, B = I -> returns x
        let mut ad = init_adapter(4, 4, 2, 2.0, 0, "t").unwrap();
        let mut a = vec![0.0f32; 16];
        let mut b = vec![0.0f32; 16];
        for i in 0..4 {
            a[i * 4 + i] = 1.0;
            b[i * 4 + i] = 1.0;
        }
        ad.a = Tensor::from_vec(&[4, 4], a).unwrap();
        ad.b = Tensor::from_vec(&[4, 4], b).unwrap();
        ad.rank = 4;
        ad.alpha = 4.0;
        let w = Tensor::zeros(&[4, 4]);
        let x = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        let y = adapted_forward(&x, &w, &ad).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn merge_is_elementwise_addition() {
        let mut ad = init_adapter(2, 2, 1, 1.0, 0, "t").unwrap();
        ad.a = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        ad.b = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        ad.rank = 2;
        ad.alpha = 2.0;
        let w = Tensor::from_vec(&[2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let merged = merge(&w, &ad).unwrap();
        assert_eq!(merged.to_vec(), vec![11.0, 22.0, 33.0, 44.0]);
        // base untouched
        assert_eq!(w.to_vec(), vec![10.0, 20.0, 30.0, 40.0]);
        // merging twice adds the delta twice
        let twice = merge(&merged, &ad).unwrap();
        assert_eq!(twice.to_vec(), vec![12.0, 24.0, 36.0, 48.0]);
    }

    #[test]
    fn fresh_merge_is_bitwise_identity() {
        let ad = init_adapter(3, 3, 1, 1.0, 2, "t").unwrap();
        let w = Tensor::from_vec(&[3, 3], (0..9).map(|v| v as f32 * 0.37).collect()).unwrap();
        let merged = merge(&w, &ad).unwrap();
        let wb: Vec<u32> = w.to_vec().iter().map(|v| v.to_bits()).collect();
        let mb: Vec<u32> = merged.to_vec().iter().map(|v| v.to_bits()).collect();
        assert_eq!(wb, mb);
    }

    #[test]
    fn parameter_count_single_projection() {
        // one 8x8 projection at r=2 -> 2*8*2 = 32 trainable
        let params = vec![("proj.w".to_string(), Tensor::zeros(&[8, 8]))];
        let plan = AttachPlan::new(vec!["proj".to_string()]);
        let report = trainable_parameter_count(&params, &plan, 2).unwrap();
        assert_eq!(report.trainable, 32);
        assert_eq!(report.frozen, 64);
    }

    #[test]
    fn parameter_count_empty_plan() {
        let params = vec![("proj.w".to_string(), Tensor::zeros(&[8, 8]))];
        let report = trainable_parameter_count(&params, &AttachPlan::empty(), 2).unwrap();
        assert_eq!(report.trainable, 0);
    }

    #[test]
    fn parameter_count_unknown_target() {
        let params = vec![("proj.w".to_string(), Tensor::zeros(&[8, 8]))];
        let plan = AttachPlan::new(vec!["missing".to_string()]);
        assert!(trainable_parameter_count(&params, &plan, 2).is_err());
    }

    #[test]
    fn adapter_file_roundtrip() {
        let set = LoraSet {
            adapters: vec![
                init_adapter(8, 8, 2, 2.0, 1, "block0.attn.q").unwrap(),
                init_adapter(16, 8, 4, 4.0, 2, "block0.mlp.fc1").unwrap(),
            ],
        };
        let mut buf = Vec::new();
        set.save(&mut buf).unwrap();
        let back = LoraSet::load(&mut buf.as_slice()).unwrap();
        assert_eq!(back.adapters.len(), 2);
        for (orig, rt) in set.adapters.iter().zip(back.adapters.iter()) {
            assert_eq!(orig.target_name, rt.target_name);
            assert_eq!(orig.rank, rt.rank);
            assert_eq!(orig.alpha, rt.alpha);
            assert_eq!(orig.a.to_vec(), rt.a.to_vec());
            assert_eq!(orig.b.to_vec(), rt.b.to_vec());
        }
    }
}
