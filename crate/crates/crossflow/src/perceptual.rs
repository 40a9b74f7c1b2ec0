//! Perceptual distance against a fixed, seeded feature extractor.
//!
//! The metric follows the deep-feature form: unit-normalize each stage's
//! activations along channels at every spatial site, take weighted squared
//! differences, average spatially and sum over stages. At desk scale the
//! backbone is a three-stage frozen random conv net rather than a pretrained
//! classifier; stage weights are fixed at 1. Inputs in `[0,1]` are shifted to
//! `[-1,1]`, grayscale images are replicated to three channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::tensor::{self, Tensor};

const NORM_EPS: f32 = 1e-10;

/// Frozen conv stages; parameters are a pure function of the seed and the
/// stage outputs strictly shrink spatially (conv then 2x2 average pool).
#[derive(Debug)]
pub struct FeatureExtractor {
    stages: Vec<Tensor>,
    pub seed: u64,
    /// Per-stage channel weights, all ones at desk scale.
    pub stage_weights: Vec<f32>,
}

const STAGE_CHANNELS: [usize; 4] = [3, 8, 16, 32];

impl FeatureExtractor {
    pub fn from_seed(seed: u64) -> FeatureExtractor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        for s in 0..3 {
            let (c_in, c_out) = (STAGE_CHANNELS[s], STAGE_CHANNELS[s + 1]);
            // He-scaled Gaussian kernels, 3x3
            let std = (2.0 / (c_in as f32 * 9.0)).sqrt();
            let normal = Normal::new(0.0f32, std).expect("valid std");
            let data: Vec<f32> = (0..c_out * c_in * 9).map(|_| normal.sample(&mut rng)).collect();
            stages.push(Tensor::from_vec(&[c_out, c_in, 3, 3], data).expect("consistent shape"));
        }
        FeatureExtractor { stages, seed, stage_weights: vec![1.0; 3] }
    }

    /// Per-stage feature maps for one image.
    fn features(&self, img: &Image) -> Result<Vec<Tensor>> {
        let rgb = img.to_rgb3();
        let data: Vec<f32> = rgb.data.iter().map(|v| v * 2.0 - 1.0).collect();
        let mut x = Tensor::from_vec(&[3, rgb.height, rgb.width], data)?;
        let mut maps = Vec::with_capacity(self.stages.len());
        for k in &self.stages {
            let y = tensor::conv2d(&x, k, 1, 1)?;
            let y = tensor::relu(&y);
            let y = tensor::avg_pool2(&y)?;
            maps.push(y.clone());
            x = y;
        }
        Ok(maps)
    }
}

/// Unit-normalize along channels at each spatial site:
/// `phi_c / (sqrt(sum_c phi_c^2) + eps)`.
fn channel_normalize(map: &Tensor) -> Vec<f32> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let data = map.data();
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut sq = 0.0f32;
            for ch in 0..c {
                let v = data[ch * h * w + y * w + x];
                sq += v * v;
            }
            let inv = 1.0 / (sq.sqrt() + NORM_EPS);
            for ch in 0..c {
                let i = ch * h * w + y * w + x;
                out[i] = data[i] * inv;
            }
        }
    }
    out
}

/// Perceptual distance between two same-shape images.
pub fn lpips(x: &Image, y: &Image, fe: &FeatureExtractor) -> Result<f32> {
    if x.height != y.height || x.width != y.width {
        return Err(Error::Dimension(format!(
            "lpips: image sizes {}x{} and {}x{} differ",
            x.height, x.width, y.height, y.width
        )));
    }
    let fx = fe.features(x)?;
    let fy = fe.features(y)?;
    let mut total = 0.0f32;
    for (l, (mx, my)) in fx.iter().zip(fy.iter()).enumerate() {
        let (c, h, w) = (mx.shape()[0], mx.shape()[1], mx.shape()[2]);
        let nx = channel_normalize(mx);
        let ny = channel_normalize(my);
        let wl = fe.stage_weights[l];
        let mut stage = 0.0f32;
        for i in 0..c * h * w {
            let d = wl * (nx[i] - ny[i]);
            stage += d * d;
        }
        total += stage / (h * w) as f32;
    }
    Ok(total)
}

/// Split-level aggregate used for adapter selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LpipsReport {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub per_image: Vec<PerImageDistance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImageDistance {
    pub id: String,
    pub value: f32,
}

/// Mean and sample standard deviation of per-pair distances.
pub fn mean_lpips(
    pairs: &[(String, Image, Image)],
    fe: &FeatureExtractor,
) -> Result<LpipsReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("mean_lpips: empty pair list".into()));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    for (id, synth, real) in pairs {
        per_image.push(PerImageDistance { id: id.clone(), value: lpips(synth, real, fe)? });
    }
    let n = per_image.len();
    let mean = per_image.iter().map(|p| p.value as f64).sum::<f64>() / n as f64;
    let std = if n > 1 {
        let var = per_image.iter().map(|p| (p.value as f64 - mean).powi(2)).sum::<f64>()
            / (n as f64 - 1.0);
        var.sqrt()
    } else {
        0.0
    };
    Ok(LpipsReport { mean, std, count: n, per_image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64, channels: usize, size: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..channels * size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        Image::from_data(channels, size, size, data).unwrap()
    }

    #[test]
    fn distance_to_self_is_zero() {
        let fe = FeatureExtractor::from_seed(42);
        for seed in [1u64, 2, 3] {
            let x = random_image(seed, 3, 16);
            assert_eq!(lpips(&x, &x, &fe).unwrap(), 0.0);
        }
    }

    #[test]
    fn distance_is_symmetric() {
        let fe = FeatureExtractor::from_seed(42);
        let x = random_image(5, 3, 16);
        let y = random_image(6, 3, 16);
        let dxy = lpips(&x, &y, &fe).unwrap();
        let dyx = lpips(&y, &x, &fe).unwrap();
        assert_eq!(dxy.to_bits(), dyx.to_bits());
        assert!(dxy > 0.0);
    }

    #[test]
    fn extractor_is_bit_stable_across_runs() {
        let a = FeatureExtractor::from_seed(7);
        let b = FeatureExtractor::from_seed(7);
        let x = random_image(1, 1, 16);
        let y = random_image(2, 1, 16);
        assert_eq!(lpips(&x, &y, &a).unwrap().to_bits(), lpips(&x, &y, &b).unwrap().to_bits());
    }

    #[test]
    fn stage_outputs_shrink_spatially() {
        let fe = FeatureExtractor::from_seed(3);
        let x = random_image(9, 3, 32);
        let maps = fe.features(&x).unwrap();
        assert_eq!(maps.len(), 3);
        let mut prev = 32;
        for m in maps {
            assert!(m.shape()[1] < prev);
            prev = m.shape()[1];
        }
    }

    /// Independent straight-line evaluation of the metric formula with naive
    /// loops, used as an oracle against the tensor-op implementation.
    fn lpips_reference(x: &Image, y: &Image, fe: &FeatureExtractor) -> f32 {
        fn conv_relu_pool(input: &[Vec<Vec<f32>>], kernel: &Tensor) -> Vec<Vec<Vec<f32>>> {
            let c_in = input.len();
            let h = input[0].len();
            let w = input[0][0].len();
            let c_out = kernel.shape()[0];
            let kd = kernel.data();
            let mut conv = vec![vec![vec![0.0f32; w]; h]; c_out];
            for f in 0..c_out {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for c in 0..c_in {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = yy as isize + ky as isize - 1;
                                    let ix = xx as isize + kx as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input[c][iy as usize][ix as usize]
                                        * kd[f * c_in * 9 + c * 9 + ky * 3 + kx];
                                }
                            }
                        }
                        conv[f][yy][xx] = acc.max(0.0);
                    }
                }
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut pooled = vec![vec![vec![0.0f32; ow]; oh]; c_out];
            for f in 0..c_out {
                for yy in 0..oh {
                    for xx in 0..ow {
                        pooled[f][yy][xx] = 0.25
                            * (conv[f][2 * yy][2 * xx]
                                + conv[f][2 * yy][2 * xx + 1]
                                + conv[f][2 * yy + 1][2 * xx]
                                + conv[f][2 * yy + 1][2 * xx + 1]);
                    }
                }
            }
            pooled
        }

        let to_planes = |im: &Image| -> Vec<Vec<Vec<f32>>> {
            let rgb = im.to_rgb3();
            (0..3)
                .map(|c| {
                    (0..rgb.height)
                        .map(|yy| (0..rgb.width).map(|xx| rgb.get(c, yy, xx) * 2.0 - 1.0).collect())
                        .collect()
                })
                .collect()
        };

        let mut fx = to_planes(x);
        let mut fy = to_planes(y);
        let mut total = 0.0f32;
        for (l, k) in fe.stages.iter().enumerate() {
            fx = conv_relu_pool(&fx, k);
            fy = conv_relu_pool(&fy, k);
            let c = fx.len();
            let h = fx[0].len();
            let w = fx[0][0].len();
            let mut stage = 0.0f32;
            for yy in 0..h {
                for xx in 0..w {
                    let nx: f32 = (0..c).map(|ch| fx[ch][yy][xx] * fx[ch][yy][xx]).sum::<f32>().sqrt();
                    let ny: f32 = (0..c).map(|ch| fy[ch][yy][xx] * fy[ch][yy][xx]).sum::<f32>().sqrt();
                    for ch in 0..c {
                        let a = fx[ch][yy][xx] / (nx + NORM_EPS);
                        let b = fy[ch][yy][xx] / (ny + NORM_EPS);
                        let d = fe.stage_weights[l] * (a - b);
                        stage += d * d;
                    }
                }
            }
            total += stage / (h * w) as f32;
        }
        total
    }

    #[test]
    fn matches_straight_line_reference() {
        // seed 42, x all-zeros, y all-ones, 32x32 as the anchor case, plus a
        // couple of random pairs.
        let fe = FeatureExtractor::from_seed(42);
        let zeros = Image::from_data(3, 32, 32, vec![0.0; 3 * 32 * 32]).unwrap();
        let ones = Image::from_data(3, 32, 32, vec![1.0; 3 * 32 * 32]).unwrap();
        let got = lpips(&zeros, &ones, &fe).unwrap();
        let want = lpips_reference(&zeros, &ones, &fe);
        assert!((got - want).abs() <= 1e-4 * want.abs().max(1.0), "{got} vs {want}");
        assert!(got > 0.0);

        for seed in [10u64, 20] {
            let x = random_image(seed, 3, 16);
            let y = random_image(seed + 100, 3, 16);
            let got = lpips(&x, &y, &fe).unwrap();
            let want = lpips_reference(&x, &y, &fe);
            assert!((got - want).abs() <= 1e-4 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn mean_lpips_arithmetic() {
        let fe = FeatureExtractor::from_seed(1);
        let x = random_image(1, 3, 16);
        let pairs = vec![
            ("a".to_string(), x.clone(), x.clone()),
            ("b".to_string(), x.clone(), x.clone()),
        ];
        let report = mean_lpips(&pairs, &fe).unwrap();
        assert_eq!(report.count, 2);
        assert_eq!(report.mean, 0.0);
        assert_eq!(report.std, 0.0);
    }

    #[test]
    fn mean_lpips_rejects_empty() {
        let fe = FeatureExtractor::from_seed(1);
        assert!(mean_lpips(&[], &fe).is_err());
    }

    #[test]
    fn monotone_under_increasing_noise() {
        let fe = FeatureExtractor::from_seed(42);
        let mut ok = 0;
        let trials = 40;
        for trial in 0..trials {
            let x = random_image(trial, 1, 16);
            let noise = random_image(trial + 1000, 1, 16);
            let mut prev = -1.0f32;
            let mut monotone = true;
            for eps in [0.0f32, 0.1, 0.2, 0.4] {
                let y_data: Vec<f32> = x
                    .data
                    .iter()
                    .zip(noise.data.iter())
                    .map(|(a, n)| a + eps * (n - 0.5))
                    .collect();
                let y = Image::from_data(1, 16, 16, y_data).unwrap();
                let d = lpips(&x, &y, &fe).unwrap();
                if d < prev {
                    monotone = false;
                }
                prev = d;
            }
            if monotone {
                ok += 1;
            }
        }
        assert!(ok * 100 >= trials * 95, "monotone in only {ok}/{trials} trials");
    }
}
