//! Split management, dataset directory layout, and manifests.
//!
//! The on-disk layout makes the five-split discipline physical:
//! `<root>/<split>/{source,target,labels}/<id>.{png,txt}` with a
//! `manifest.json` per split recording ids, counts, and a content hash.
//! Source images are RGB PNGs, target-modality images grayscale PNGs.

mod synth;
mod toyworld;

pub use synth::{
    build_synthetic_detection_set, load_external_dataset, merge_sets, prefix_ids, MergedSet,
    Regime, SourceRecord, SynthEntry, SynthManifest, SynthOptions, TrainingSetEntry,
};
pub use toyworld::{toy_world_generate, Modality, ToyWorldSpec};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detect::Box;
use crate::error::{Error, Result};
use crate::img::Image;

/// Pixel-aligned source/target pair with optional annotations.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub id: String,
    pub source: Image,
    pub target: Option<Image>,
    pub boxes: Option<Vec<Box>>,
}

impl PairedSample {
    pub fn validate_alignment(&self) -> Result<()> {
        if let Some(t) = &self.target {
            if t.height != self.source.height || t.width != self.source.width {
                return Err(Error::Validation(format!(
                    "sample {}: target {}x{} misaligned with source {}x{}",
                    self.id, t.height, t.width, self.source.height, self.source.width
                )));
            }
        }
        Ok(())
    }
}

pub const SPLIT_NAMES: [&str; 5] = ["sensor_sample", "sensor_val", "train", "val", "test"];

/// Requested number of samples per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub sensor_sample: usize,
    pub sensor_val: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.sensor_sample + self.sensor_val + self.train + self.val + self.test
    }
}

/// Disjoint named id lists covering the study roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSet {
    pub sensor_sample: Vec<String>,
    pub sensor_val: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSet {
    pub fn get(&self, name: &str) -> Option<&[String]> {
        match name {
            "sensor_sample" => Some(&self.sensor_sample),
            "sensor_val" => Some(&self.sensor_val),
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn verify_disjoint(&self) -> Result<()> {
        let mut seen: BTreeSet<&String> = BTreeSet::new();
        for name in SPLIT_NAMES {
            for id in self.get(name).expect("known split") {
                if !seen.insert(id) {
                    return Err(Error::Validation(format!("id {id} appears in two splits")));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic shuffled partition of `ids` into the five splits.
pub fn make_splits(ids: &[String], sizes: &SplitSizes, seed: u64) -> Result<SplitSet> {
    if sizes.total() > ids.len() {
        return Err(Error::Config(format!(
            "split sizes need {} ids, only {} available",
            sizes.total(),
            ids.len()
        )));
    }
    use rand::{seq::SliceRandom, SeedableRng};
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let take = |n: usize, rest: &mut std::vec::IntoIter<String>| -> Vec<String> {
        rest.by_ref().take(n).collect()
    };
    let mut it = shuffled.into_iter();
    let set = SplitSet {
        sensor_sample: take(sizes.sensor_sample, &mut it),
        sensor_val: take(sizes.sensor_val, &mut it),
        train: take(sizes.train, &mut it),
        val: take(sizes.val, &mut it),
        test: take(sizes.test, &mut it),
    };
    set.verify_disjoint()?;
    Ok(set)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Per-split manifest: id list, per-kind file counts, and a content hash over
/// the split's files (order-independent, id-keyed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: String,
    pub ids: Vec<String>,
    pub counts: SplitCounts,
    pub content_hash: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitCounts {
    pub source: usize,
    pub target: usize,
    pub labels: usize,
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Write one split's samples under `<root>/<split>/` and return its manifest.
///
/// Sources are RGB, targets grayscale; labels use the normalized text format.
pub fn write_split(root: &Path, split: &str, samples: &[PairedSample]) -> Result<SplitManifest> {
    let dir = split_dir(root, split);
    let mut ids = Vec::with_capacity(samples.len());
    let mut counts = SplitCounts { source: 0, target: 0, labels: 0 };
    let mut hasher_input: Vec<(String, String)> = Vec::new();
    for s in samples {
        s.validate_alignment()?;
        ids.push(s.id.clone());
        let src_path = dir.join("source").join(format!("{}.png", s.id));
        s.source.save_png(&src_path)?;
        counts.source += 1;
        hasher_input.push((format!("source/{}", s.id), sha256_file(&src_path)?));
        if let Some(t) = &s.target {
            let tgt_path = dir.join("target").join(format!("{}.png", s.id));
            t.to_gray().save_png(&tgt_path)?;
            counts.target += 1;
            hasher_input.push((format!("target/{}", s.id), sha256_file(&tgt_path)?));
        }
        if let Some(boxes) = &s.boxes {
            let text = crate::detect::write_labels(
                boxes,
                s.source.width as f64,
                s.source.height as f64,
            );
            let lbl_path = dir.join("labels").join(format!("{}.txt", s.id));
            atomic_write(&lbl_path, text.as_bytes())?;
            counts.labels += 1;
            hasher_input.push((format!("labels/{}", s.id), sha256_file(&lbl_path)?));
        }
    }
    hasher_input.sort();
    let mut hasher = Sha256::new();
    for (name, h) in &hasher_input {
        hasher.update(name.as_bytes());
        hasher.update(h.as_bytes());
    }
    let content_hash: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let manifest = SplitManifest { split: split.to_string(), ids, counts, content_hash };
    atomic_write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_split_manifest(root: &Path, split: &str) -> Result<SplitManifest> {
    let path = split_dir(root, split).join("manifest.json");
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Re-verify split disjointness from what is actually on disk.
pub fn verify_dataset_disjoint(root: &Path) -> Result<()> {
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for split in SPLIT_NAMES {
        let Ok(manifest) = read_split_manifest(root, split) else { continue };
        for id in manifest.ids {
            if !seen.insert(id.clone()) {
                return Err(Error::Validation(format!(
                    "id {id} appears in multiple splits of {}",
                    root.display()
                )));
            }
        }
    }
    Ok(())
}

/// Load one split back as paired samples (images and labels that exist).
pub fn load_split(root: &Path, split: &str) -> Result<Vec<PairedSample>> {
    let dir = split_dir(root, split);
    let manifest = read_split_manifest(root, split)?;
    let mut out = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        let source = Image::load_png(&dir.join("source").join(format!("{id}.png")))?;
        let tgt_path = dir.join("target").join(format!("{id}.png"));
        let target = if tgt_path.exists() { Some(Image::load_png(&tgt_path)?) } else { None };
        let lbl_path = dir.join("labels").join(format!("{id}.txt"));
        let boxes = if lbl_path.exists() {
            let text = std::fs::read_to_string(&lbl_path)?;
            Some(crate::detect::parse_labels(
                &text,
                source.width as f64,
                source.height as f64,
            )?)
        } else {
            None
        };
        out.push(PairedSample { id: id.clone(), source, target, boxes });
    }
    Ok(out)
}
