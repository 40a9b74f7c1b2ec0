//! Procedural cross-spectral toy world.
//!
//! Each sample renders the same scene geometry twice: a colored source view
//! (shapes on a textured background) and a target-modality view. The IR-like
//! target remaps per-class intensity (warm discs hot, cool rects cold), then
//! blurs and adds sensor noise; the SAR-like target builds a reflectivity
//! map, applies unit-mean multiplicative speckle, and log-compresses.
//! Class colors are chosen so source luma does NOT separate the classes --
//! a translator must actually learn the color-to-intensity mapping.
//! Generation is a pure function of (spec, index); boxes are identical in
//! both renderings by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PairedSample;
use crate::detect::Box;
use crate::img::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    IrLike,
    SarLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyWorldSpec {
    pub image_size: usize,
    pub modality: Modality,
    pub objects_min: usize,
    pub objects_max: usize,
    pub seed: u64,
}

impl Default for ToyWorldSpec {
    fn default() -> Self {
        ToyWorldSpec {
            image_size: 32,
            modality: Modality::IrLike,
            objects_min: 1,
            objects_max: 3,
            seed: 0,
        }
    }
}

impl ToyWorldSpec {
    pub fn class_names(&self) -> [&'static str; 2] {
        match self.modality {
            Modality::IrLike => ["warm-disc", "cool-rect"],
            Modality::SarLike => ["bridge-bar", "harbor-arc"],
        }
    }
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix-style mix so per-sample streams are independent
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ring { cx: f64, cy: f64, outer: f64, inner: f64 },
}

impl Shape {
    fn bbox(&self, size: f64) -> (f64, f64, f64, f64) {
        let (x0, y0, x1, y1) = match *self {
            Shape::Disc { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Shape::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Shape::Ring { cx, cy, outer, .. } => (cx - outer, cy - outer, cx + outer, cy + outer),
        };
        (x0.max(0.0), y0.max(0.0), x1.min(size), y1.min(size))
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= r * r
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Ring { cx, cy, outer, inner } => {
                let (dx, dy) = (x - cx, y - cy);
                let d2 = dx * dx + dy * dy;
                d2 <= outer * outer && d2 >= inner * inner
            }
        }
    }
}

struct SceneObject {
    shape: Shape,
    class_id: u32,
    color: [f32; 3],
}

fn render_source(spec: &ToyWorldSpec, objects: &[SceneObject], rng: &mut ChaCha8Rng) -> Image {
    let s = spec.image_size;
    let mut img = Image::new(3, s, s);
    // textured background: vertical gradient between two muted tones + noise
    let top = [rng.gen_range(0.25..0.45), rng.gen_range(0.3..0.5), rng.gen_range(0.25..0.4)];
    let bot = [rng.gen_range(0.15..0.35), rng.gen_range(0.2..0.4), rng.gen_range(0.15..0.35)];
    for y in 0..s {
        let f = y as f32 / (s - 1) as f32;
        for x in 0..s {
            for c in 0..3 {
                let base = top[c] * (1.0 - f) + bot[c] * f;
                let noise: f32 = rng.gen_range(-0.04..0.04);
                img.set(c, y, x, (base + noise).clamp(0.0, 1.0));
            }
        }
    }
    for obj in objects {
        for y in 0..s {
            for x in 0..s {
                if obj.shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..3 {
                        img.set(c, y, x, obj.color[c]);
                    }
                }
            }
        }
    }
    img
}

fn render_target(spec: &ToyWorldSpec, objects: &[SceneObject], rng: &mut ChaCha8Rng) -> Image {
    let s = spec.image_size;
    let mut base = Image::new(1, s, s);
    match spec.modality {
        Modality::IrLike => {
            // per-class apparent temperature
            for y in 0..s {
                for x in 0..s {
                    base.set(0, y, x, 0.22 + rng.gen_range(-0.02..0.02f32));
                }
            }
            for obj in objects {
                let level = if obj.class_id == 0 { 0.88 } else { 0.10 };
                for y in 0..s {
                    for x in 0..s {
                        if obj.shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                            base.set(0, y, x, level);
                        }
                    }
                }
            }
            let mut out = base.blur_sigma1();
            for v in out.data.iter_mut() {
                let noise: f32 = rng.gen_range(-0.05..0.05);
                *v = (*v + noise * 0.4).clamp(0.0, 1.0);
            }
            out
        }
        Modality::SarLike => {
            // reflectivity map, multiplicative speckle, log compression
            for y in 0..s {
                for x in 0..s {
                    base.set(0, y, x, 0.10);
                }
            }
            for obj in objects {
                let level = if obj.class_id == 0 { 0.85 } else { 0.45 };
                for y in 0..s {
                    for x in 0..s {
                        if obj.shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                            base.set(0, y, x, level);
                        }
                    }
                }
            }
            let mut out = base;
            for v in out.data.iter_mut() {
                // unit-mean gamma-like speckle: mean of 4 unit exponentials
                let mut speckle = 0.0f32;
                for _ in 0..4 {
                    let u: f32 = rng.gen_range(f32::EPSILON..1.0);
                    speckle += -u.ln();
                }
                speckle /= 4.0;
                let refl = (*v * speckle).max(0.0);
                *v = ((1.0 + 5.0 * refl).ln() / (1.0f32 + 5.0).ln()).clamp(0.0, 1.0);
            }
            out
        }
    }
}

fn place_objects(spec: &ToyWorldSpec, rng: &mut ChaCha8Rng) -> Vec<SceneObject> {
    let s = spec.image_size as f64;
    let scale = s / 32.0;
    let count = rng.gen_range(spec.objects_min..=spec.objects_max);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.gen_range(0..2u32);
        let (shape, color) = match (spec.modality, class_id) {
            (Modality::IrLike, 0) => {
                let r = rng.gen_range(3.0..5.5) * scale;
                let cx = rng.gen_range(r..s - r);
                let cy = rng.gen_range(r..s - r);
                // warm palette, mid luma
                let color = [
                    rng.gen_range(0.60..0.85),
                    rng.gen_range(0.25..0.45),
                    rng.gen_range(0.05..0.20),
                ];
                (Shape::Disc { cx, cy, r }, color)
            }
            (Modality::IrLike, _) => {
                let hw = rng.gen_range(3.0..6.0) * scale;
                let hh = rng.gen_range(3.0..6.0) * scale;
                let cx = rng.gen_range(hw..s - hw);
                let cy = rng.gen_range(hh..s - hh);
                // cool palette, matched luma so grayscale copying fails
                let color = [
                    rng.gen_range(0.05..0.20),
                    rng.gen_range(0.45..0.65),
                    rng.gen_range(0.70..1.00),
                ];
                (Shape::Rect { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh }, color)
            }
            (Modality::SarLike, 0) => {
                let half_len = rng.gen_range(6.0..8.0) * scale;
                let half_thick = rng.gen_range(1.0..1.8) * scale;
                let (hw, hh) = if rng.gen_bool(0.5) { (half_len, half_thick) } else { (half_thick, half_len) };
                let cx = rng.gen_range(hw..s - hw);
                let cy = rng.gen_range(hh..s - hh);
                let color = [
                    rng.gen_range(0.45..0.60),
                    rng.gen_range(0.35..0.50),
                    rng.gen_range(0.25..0.40),
                ];
                (Shape::Rect { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh }, color)
            }
            (Modality::SarLike, _) => {
                let outer = rng.gen_range(4.0..6.0) * scale;
                let inner = outer - 2.0 * scale;
                let cx = rng.gen_range(outer..s - outer);
                let cy = rng.gen_range(outer..s - outer);
                let color = [
                    rng.gen_range(0.10..0.25),
                    rng.gen_range(0.35..0.55),
                    rng.gen_range(0.55..0.75),
                ];
                (Shape::Ring { cx, cy, outer, inner }, color)
            }
        };
        objects.push(SceneObject { shape, class_id, color });
    }
    objects
}

/// One deterministic sample; the RNG stream depends only on (spec.seed, index).
pub fn generate_sample(spec: &ToyWorldSpec, index: u64) -> PairedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index));
    let objects = place_objects(spec, &mut rng);
    let source = render_source(spec, &objects, &mut rng);
    let target = render_target(spec, &objects, &mut rng);
    let size = spec.image_size as f64;
    let boxes = objects
        .iter()
        .map(|o| {
            let (x0, y0, x1, y1) = o.shape.bbox(size);
            Box::new(x0, y0, x1, y1, o.class_id).expect("shapes are placed inside bounds")
        })
        .collect();
    PairedSample {
        id: format!("toy{index:05}"),
        source,
        target: Some(target),
        boxes: Some(boxes),
    }
}

/// Generate `n` samples; content is a pure function of `(spec, n)`.
pub fn toy_world_generate(spec: &ToyWorldSpec, n: usize) -> Vec<PairedSample> {
    (0..n as u64).map(|i| generate_sample(spec, i)).collect()
}
