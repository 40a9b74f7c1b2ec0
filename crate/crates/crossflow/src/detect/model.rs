//! Minimal single-stage grid detector for end-to-end runs.
//!
//! A short stack of stride-2 convs maps the image to an SxS grid; every cell
//! predicts objectness, class logits, and box offsets. Loss is objectness BCE
//! over all cells plus box regression and class cross-entropy on object
//! cells. Decoding applies a score threshold and greedy per-class NMS.

use std::collections::BTreeMap;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{evaluate_map, iou, Box, EvalResult};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::tensor::{self, adam_update, AdamState, Tensor};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub grid: usize,
    pub classes: usize,
    pub learning_rate: f32,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 32,
            in_channels: 1,
            grid: 4,
            classes: 2,
            learning_rate: 2e-3,
            score_threshold: 0.25,
            nms_iou: 0.5,
        }
    }
}

impl DetectorConfig {
    fn downsamples(&self) -> Result<usize> {
        let mut s = self.image_size;
        let mut n = 0;
        while s > self.grid {
            if s % 2 != 0 {
                return Err(Error::Config(format!(
                    "image size {} cannot reach grid {} by halving",
                    self.image_size, self.grid
                )));
            }
            s /= 2;
            n += 1;
        }
        if s != self.grid {
            return Err(Error::Config(format!(
                "grid {} does not divide image size {}",
                self.grid, self.image_size
            )));
        }
        Ok(n)
    }

    fn out_channels(&self) -> usize {
        1 + 4 + self.classes
    }
}

/// An image with its ground-truth boxes in pixel coordinates.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub image: Image,
    pub boxes: Vec<Box>,
}

#[derive(Debug, Clone)]
pub struct ToyDetector {
    pub config: DetectorConfig,
    pub seed: u64,
    convs: Vec<(Tensor, Tensor)>,
    head: (Tensor, Tensor),
}

const STAGE_WIDTHS: [usize; 4] = [16, 32, 64, 64];

impl ToyDetector {
    pub fn init(config: &DetectorConfig, seed: u64) -> Result<ToyDetector> {
        let n_down = config.downsamples()?;
        if n_down > STAGE_WIDTHS.len() {
            return Err(Error::Config("too many downsampling stages".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut c_in = config.in_channels;
        for stage in 0..n_down {
            let c_out = STAGE_WIDTHS[stage];
            let std = (2.0 / (c_in as f32 * 9.0)).sqrt();
            let normal = Normal::new(0.0f32, std).expect("valid std");
            let data: Vec<f32> = (0..c_out * c_in * 9).map(|_| normal.sample(&mut rng)).collect();
            convs.push((
                Tensor::from_vec(&[c_out, c_in, 3, 3], data)?,
                Tensor::zeros(&[c_out]),
            ));
            c_in = c_out;
        }
        let c_out = config.out_channels();
        let std = (2.0 / (c_in as f32 * 9.0)).sqrt();
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let data: Vec<f32> = (0..c_out * c_in * 9).map(|_| normal.sample(&mut rng)).collect();
        let head = (Tensor::from_vec(&[c_out, c_in, 3, 3], data)?, Tensor::zeros(&[c_out]));
        Ok(ToyDetector { config: config.clone(), seed, convs, head })
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (w, b) in &self.convs {
            out.push(w.clone());
            out.push(b.clone());
        }
        out.push(self.head.0.clone());
        out.push(self.head.1.clone());
        out
    }

    pub fn set_trainable(&self, trainable: bool) {
        for p in self.parameters() {
            p.set_requires_grad(trainable);
        }
    }

    /// Raw grid logits `[1+4+classes, S, S]`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut x = image.clone();
        for (w, b) in &self.convs {
            x = tensor::conv2d(&x, w, 2, 1)?;
            x = tensor::add_channel_bias(&x, b)?;
            x = tensor::relu(&x);
        }
        let x = tensor::conv2d(&x, &self.head.0, 1, 1)?;
        tensor::add_channel_bias(&x, &self.head.1)
    }

    fn image_tensor(&self, image: &Image) -> Result<Tensor> {
        if image.channels != self.config.in_channels
            || image.height != self.config.image_size
            || image.width != self.config.image_size
        {
            return Err(Error::Dimension(format!(
                "detector expects {}x{}x{}, got {}x{}x{}",
                self.config.in_channels,
                self.config.image_size,
                self.config.image_size,
                image.channels,
                image.height,
                image.width
            )));
        }
        Ok(image.to_tensor())
    }

    pub fn snapshot(&self) -> Vec<Vec<f32>> {
        self.parameters().iter().map(|p| p.to_vec()).collect()
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.w"), w.clone()));
            out.push((format!("conv{i}.b"), b.clone()));
        }
        out.push(("head.w".to_string(), self.head.0.clone()));
        out.push(("head.b".to_string(), self.head.1.clone()));
        out
    }

    /// Checkpoint: u64 LE header length, JSON header (config + seed), then a
    /// CFT1 tensor stream — same framing as the generator checkpoint.
    pub fn save_file(&self, path: &std::path::Path) -> Result<()> {
        #[derive(serde::Serialize)]
        struct Header<'a> {
            format_version: u32,
            config: &'a DetectorConfig,
            seed: u64,
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let header =
            serde_json::to_vec(&Header { format_version: 1, config: &self.config, seed: self.seed })
                .map_err(crate::error::Error::from)?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        use std::io::Write;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        crate::tensor::write_cft1(&mut f, &self.named_params())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_file(path: &std::path::Path) -> Result<ToyDetector> {
        #[derive(serde::Deserialize)]
        struct Header {
            format_version: u32,
            config: DetectorConfig,
            seed: u64,
        }
        let mut f = std::fs::File::open(path)?;
        use std::io::Read;
        let mut len_buf = [0u8; 8];
        f.read_exact(&mut len_buf)?;
        let len = u64::from_le_bytes(len_buf);
        if len > 1 << 20 {
            return Err(Error::Format("detector header too large".into()));
        }
        let mut header_buf = vec![0u8; len as usize];
        f.read_exact(&mut header_buf)?;
        let header: Header = serde_json::from_slice(&header_buf)?;
        if header.format_version != 1 {
            return Err(Error::Format(format!(
                "unsupported detector checkpoint version {}",
                header.format_version
            )));
        }
        let det = ToyDetector::init(&header.config, header.seed)?;
        let mut map: std::collections::BTreeMap<String, Tensor> =
            crate::tensor::read_cft1(&mut f)?.into_iter().collect();
        for (name, param) in det.named_params() {
            let loaded = map
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("detector checkpoint missing {name}")))?;
            if loaded.shape() != param.shape() {
                return Err(Error::Format(format!("detector tensor {name} has wrong shape")));
            }
            param.set_data_from(&loaded);
        }
        Ok(det)
    }
}

/// Per-cell regression targets for one image.
struct GridTargets {
    obj: Vec<f32>,
    boxes: Vec<f32>,  // [4, cells] sigmoid-space targets
    box_mask: Vec<f32>,
    class: Vec<usize>,
    class_weight: Vec<f32>,
    n_obj: usize,
}

fn build_targets(config: &DetectorConfig, boxes: &[Box]) -> GridTargets {
    let s = config.grid;
    let cells = s * s;
    let cell_px = config.image_size as f64 / s as f64;
    let mut t = GridTargets {
        obj: vec![0.0; cells],
        boxes: vec![0.0; 4 * cells],
        box_mask: vec![0.0; 4 * cells],
        class: vec![0; cells],
        class_weight: vec![0.0; cells],
        n_obj: 0,
    };
    for b in boxes {
        let cx = (b.x_min + b.x_max) / 2.0;
        let cy = (b.y_min + b.y_max) / 2.0;
        let gx = ((cx / cell_px) as usize).min(s - 1);
        let gy = ((cy / cell_px) as usize).min(s - 1);
        let cell = gy * s + gx;
        if t.obj[cell] == 1.0 {
            continue; // first box claims a contested cell
        }
        t.obj[cell] = 1.0;
        let fx = (cx / cell_px - gx as f64).clamp(0.0, 1.0) as f32;
        let fy = (cy / cell_px - gy as f64).clamp(0.0, 1.0) as f32;
        let bw = ((b.x_max - b.x_min) / config.image_size as f64).clamp(0.0, 1.0) as f32;
        let bh = ((b.y_max - b.y_min) / config.image_size as f64).clamp(0.0, 1.0) as f32;
        t.boxes[cell] = fx;
        t.boxes[cells + cell] = fy;
        t.boxes[2 * cells + cell] = bw;
        t.boxes[3 * cells + cell] = bh;
        for k in 0..4 {
            t.box_mask[k * cells + cell] = 1.0;
        }
        t.class[cell] = b.class_id as usize;
        t.class_weight[cell] = 1.0;
        t.n_obj += 1;
    }
    t
}

/// Objectness BCE + masked box regression + masked class cross-entropy.
fn detector_loss(det: &ToyDetector, image: &Tensor, boxes: &[Box]) -> Result<Tensor> {
    let config = &det.config;
    let s = config.grid;
    let cells = s * s;
    let k = config.classes;
    let out = det.forward(image)?; // [1+4+K, s, s]
    let flat = tensor::reshape(&out, &[config.out_channels(), cells])?;

    let targets = build_targets(config, boxes);

    let obj_logits = tensor::reshape(&tensor::slice_rows(&flat, 0, 1)?, &[1, cells])?;
    let obj_w = vec![1.0 / cells as f32; cells];
    let obj_loss = tensor::bce_with_logits_sum(&obj_logits, &targets.obj, &obj_w)?;

    let box_rows = tensor::slice_rows(&flat, 1, 4)?;
    let box_sig = tensor::sigmoid(&box_rows);
    let tgt = Tensor::from_vec(&[4, cells], targets.boxes.clone())?;
    let mask = Tensor::from_vec(&[4, cells], targets.box_mask.clone())?;
    let diff = tensor::mul(&tensor::sub(&box_sig, &tgt)?, &mask)?;
    let sq = tensor::mul(&diff, &diff)?;
    let denom = (4 * targets.n_obj.max(1)) as f32;
    let box_loss = tensor::scale(&tensor::sum(&sq), 1.0 / denom);

    let class_rows = tensor::slice_rows(&flat, 5, k)?;
    let class_cols = tensor::transpose(&class_rows)?; // [cells, K]
    let cw: Vec<f32> = targets
        .class_weight
        .iter()
        .map(|w| w / targets.n_obj.max(1) as f32)
        .collect();
    let class_loss = tensor::softmax_cross_entropy_sum(&class_cols, &targets.class, &cw)?;

    let total = tensor::add(&obj_loss, &tensor::scale(&box_loss, 5.0))?;
    tensor::add(&total, &class_loss)
}

/// Expose the loss for gradient checks.
pub fn toy_detector_loss(det: &ToyDetector, sample: &LabeledImage) -> Result<Tensor> {
    let img = det.image_tensor(&sample.image)?;
    detector_loss(det, &img, &sample.boxes)
}

#[derive(Debug, Clone)]
pub struct TrainedDetector {
    pub detector: ToyDetector,
    pub loss_curve: Vec<(u64, f32)>,
}

/// Train on a labeled set for `epochs` full passes (seeded shuffle, batch 1).
/// Zero epochs return the freshly initialized model unchanged.
pub fn train_toy_detector(
    train_set: &[LabeledImage],
    config: &DetectorConfig,
    epochs: u32,
    seed: u64,
) -> Result<TrainedDetector> {
    if train_set.is_empty() {
        return Err(Error::Config("train_toy_detector: empty training set".into()));
    }
    let det = ToyDetector::init(config, seed)?;
    det.set_trainable(true);
    let params = det.parameters();
    let mut states: Vec<AdamState> = params.iter().map(AdamState::for_param).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD07_CAFE);
    let mut curve = Vec::new();
    let tensors: Vec<Tensor> =
        train_set.iter().map(|li| det.image_tensor(&li.image)).collect::<Result<_>>()?;
    let mut step: u64 = 0;
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        for idx in order {
            step += 1;
            let loss = detector_loss(&det, &tensors[idx], &train_set[idx].boxes)?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(Error::Training { step, message: "detector loss is not finite".into() });
            }
            loss.backward()?;
            for (p, st) in params.iter().zip(states.iter_mut()) {
                adam_update(p, st, config.learning_rate)?;
            }
            curve.push((step, loss_val));
        }
    }
    det.set_trainable(false);
    Ok(TrainedDetector { detector: det, loss_curve: curve })
}

/// Decode grid predictions into scored boxes (score threshold + per-class
/// greedy NMS, both fixed by config).
pub fn predict_boxes(det: &ToyDetector, image: &Image) -> Result<Vec<Box>> {
    let config = &det.config;
    let s = config.grid;
    let cells = s * s;
    let k = config.classes;
    let img = det.image_tensor(image)?;
    let out = det.forward(&img)?;
    let data = out.to_vec();
    let cell_px = config.image_size as f64 / s as f64;
    let sigm = |x: f32| 1.0 / (1.0 + (-x as f64).exp());

    let mut candidates: Vec<Box> = Vec::new();
    for gy in 0..s {
        for gx in 0..s {
            let cell = gy * s + gx;
            let obj = sigm(data[cell]);
            if obj < config.score_threshold {
                continue;
            }
            let fx = sigm(data[cells + cell]);
            let fy = sigm(data[2 * cells + cell]);
            let bw = sigm(data[3 * cells + cell]).max(1.0 / config.image_size as f64);
            let bh = sigm(data[4 * cells + cell]).max(1.0 / config.image_size as f64);
            let cx = (gx as f64 + fx) * cell_px;
            let cy = (gy as f64 + fy) * cell_px;
            let w = bw * config.image_size as f64;
            let h = bh * config.image_size as f64;
            // class probabilities via softmax over the K logits
            let logits: Vec<f64> = (0..k).map(|c| data[(5 + c) * cells + cell] as f64).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let (best_class, best_p) = exps
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, p)| (i, p / denom))
                .expect("at least one class");
            let x_min = (cx - w / 2.0).clamp(0.0, config.image_size as f64 - 1.0);
            let y_min = (cy - h / 2.0).clamp(0.0, config.image_size as f64 - 1.0);
            let x_max = (cx + w / 2.0).clamp(x_min + 0.5, config.image_size as f64);
            let y_max = (cy + h / 2.0).clamp(y_min + 0.5, config.image_size as f64);
            candidates.push(
                Box::new(x_min, y_min, x_max, y_max, best_class as u32)?.with_score(obj * best_p),
            );
        }
    }

    // greedy NMS per class
    candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut kept: Vec<Box> = Vec::new();
    'cand: for c in candidates {
        for kept_box in &kept {
            if kept_box.class_id == c.class_id && iou(kept_box, &c)? > config.nms_iou {
                continue 'cand;
            }
        }
        kept.push(c);
    }
    Ok(kept)
}

/// Train with one seed and evaluate on a labeled test set.
pub fn train_and_eval(
    train_set: &[LabeledImage],
    test_set: &[LabeledImage],
    config: &DetectorConfig,
    epochs: u32,
    seed: u64,
) -> Result<EvalResult> {
    let trained = train_toy_detector(train_set, config, epochs, seed)?;
    eval_detector(&trained.detector, test_set)
}

/// Evaluate a trained detector on a labeled set.
pub fn eval_detector(det: &ToyDetector, test_set: &[LabeledImage]) -> Result<EvalResult> {
    let mut preds = BTreeMap::new();
    let mut gts = BTreeMap::new();
    for li in test_set {
        preds.insert(li.id.clone(), predict_boxes(det, &li.image)?);
        gts.insert(li.id.clone(), li.boxes.clone());
    }
    evaluate_map(&preds, &gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample_with_blob(seed: u64) -> LabeledImage {
        // bright square on dark background, class by quadrant parity
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut image = Image::new(1, 32, 32);
        for v in image.data.iter_mut() {
            *v = rng.gen_range(0.0..0.1);
        }
        let x0 = rng.gen_range(2..20) as f64;
        let y0 = rng.gen_range(2..20) as f64;
        let w = rng.gen_range(6..10) as f64;
        let h = rng.gen_range(6..10) as f64;
        let class = (seed % 2) as u32;
        let fill = if class == 0 { 0.9 } else { 0.4 };
        for y in y0 as usize..(y0 + h) as usize {
            for x in x0 as usize..(x0 + w) as usize {
                image.set(0, y, x, fill);
            }
        }
        LabeledImage {
            id: format!("s{seed}"),
            image,
            boxes: vec![Box::new(x0, y0, x0 + w, y0 + h, class).unwrap()],
        }
    }

    #[test]
    fn same_seed_identical_weights() {
        let config = DetectorConfig::default();
        let a = ToyDetector::init(&config, 5).unwrap();
        let b = ToyDetector::init(&config, 5).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let config = DetectorConfig::default();
        let init = ToyDetector::init(&config, 5).unwrap();
        let set = vec![sample_with_blob(1)];
        let trained = train_toy_detector(&set, &config, 0, 5).unwrap();
        assert_eq!(trained.detector.snapshot(), init.snapshot());
        assert!(trained.loss_curve.is_empty());
    }

    #[test]
    fn training_reduces_loss() {
        let config = DetectorConfig::default();
        let set: Vec<LabeledImage> = (0..8).map(sample_with_blob).collect();
        let trained = train_toy_detector(&set, &config, 12, 3).unwrap();
        let first = trained.loss_curve.first().unwrap().1;
        let last = trained.loss_curve.last().unwrap().1;
        assert!(
            last < first * 0.5,
            "loss did not drop enough: {first} -> {last}"
        );
    }

    #[test]
    fn trained_beats_untrained_on_map() {
        let config = DetectorConfig::default();
        let train: Vec<LabeledImage> = (0..16).map(sample_with_blob).collect();
        let test: Vec<LabeledImage> = (100..116).map(sample_with_blob).collect();
        let untrained = ToyDetector::init(&config, 9).unwrap();
        let base = eval_detector(&untrained, &test).unwrap();
        let trained = train_toy_detector(&train, &config, 15, 9).unwrap();
        let tuned = eval_detector(&trained.detector, &test).unwrap();
        assert!(
            tuned.map50 > base.map50,
            "training did not help: {} -> {}",
            base.map50,
            tuned.map50
        );
    }

    #[test]
    fn deterministic_training() {
        let config = DetectorConfig::default();
        let set: Vec<LabeledImage> = (0..4).map(sample_with_blob).collect();
        let a = train_toy_detector(&set, &config, 2, 11).unwrap();
        let b = train_toy_detector(&set, &config, 2, 11).unwrap();
        assert_eq!(a.detector.snapshot(), b.detector.snapshot());
        assert_eq!(a.loss_curve, b.loss_curve);
    }

    #[test]
    fn detector_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ckpt");
        let config = DetectorConfig::default();
        let set: Vec<LabeledImage> = (0..4).map(sample_with_blob).collect();
        let trained = train_toy_detector(&set, &config, 2, 13).unwrap();
        trained.detector.save_file(&path).unwrap();
        let back = ToyDetector::load_file(&path).unwrap();
        assert_eq!(back.snapshot(), trained.detector.snapshot());
        assert_eq!(back.config, config);
    }

    #[test]
    fn predictions_have_scores_in_range() {
        let config = DetectorConfig::default();
        let set: Vec<LabeledImage> = (0..6).map(sample_with_blob).collect();
        let trained = train_toy_detector(&set, &config, 8, 2).unwrap();
        for li in &set {
            for b in predict_boxes(&trained.detector, &li.image).unwrap() {
                let s = b.score.unwrap();
                assert!((0.0..=1.0).contains(&s));
                assert!(b.x_min < b.x_max && b.y_min < b.y_max);
            }
        }
    }
}
