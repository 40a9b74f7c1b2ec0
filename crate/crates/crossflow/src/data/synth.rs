//! Synthetic detection-set construction and training-set assembly.
//!
//! Every source image of a labeled set is translated into the target
//! modality; the label file is copied byte-identical (translation is
//! pixel-aligned, so boxes transfer unchanged). A manifest records the
//! (source id, adapter id, per-image seed) provenance. Translation
//! parallelizes across images; each worker rebuilds the model from the
//! shared checkpoint bytes, and per-image seeds derive from (base seed, id)
//! so the output is independent of scheduling.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};


use crate::error::{Error, Result};
use crate::flow::{translate, FlowModel, TranslateOptions};
use crate::img::Image;
use crate::lora::LoraSet;

fn derive_image_seed(base: u64, id: &str) -> u64 {
    crate::seed::derive_seed(base, id)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub adapter_id: String,
    pub base_seed: u64,
    pub steps: u32,
    pub entries: Vec<SynthEntry>,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthEntry {
    pub source_id: String,
    pub adapter_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub adapter_id: String,
    pub steps: u32,
    pub base_seed: u64,
    pub instruction: usize,
}

fn list_ids_with_extension(dir: &Path, ext: &str) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::Validation(format!("missing directory {}", dir.display())));
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Translate a labeled source set (`<set_dir>/{source,labels}`) into
/// `<out_dir>/{target,labels}`, reusing each label file without modification.
pub fn build_synthetic_detection_set(
    model: &FlowModel,
    lora: &LoraSet,
    set_dir: &Path,
    out_dir: &Path,
    opts: &SynthOptions,
) -> Result<SynthManifest> {
    let source_dir = set_dir.join("source");
    let labels_dir = set_dir.join("labels");
    let ids = list_ids_with_extension(&source_dir, "png")?;
    if ids.is_empty() {
        return Err(Error::Validation(format!(
            "no source images under {}",
            source_dir.display()
        )));
    }
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| !labels_dir.join(format!("{id}.txt")).exists())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "{} source images have no label file: {}",
            missing.len(),
            missing.join(", ")
        )));
    }

    std::fs::create_dir_all(out_dir.join("target"))?;
    std::fs::create_dir_all(out_dir.join("labels"))?;

    let model_bytes = model.to_bytes()?;
    let mut lora_bytes = Vec::new();
    lora.save(&mut lora_bytes)?;

    let entries: Vec<SynthEntry> = ids
        .par_iter()
        .map_init(
            || {
                let m = FlowModel::from_bytes(&model_bytes).expect("checkpoint round-trip");
                let l = LoraSet::load(&mut lora_bytes.as_slice()).expect("adapter round-trip");
                (m, l)
            },
            |(m, l), id| -> Result<SynthEntry> {
                let source = Image::load_png(&source_dir.join(format!("{id}.png")))?;
                let seed = derive_image_seed(opts.base_seed, id);
                let topts = TranslateOptions { steps: opts.steps, seed, instruction: opts.instruction };
                let synth = translate(m, Some(l), &source, &topts)?;
                synth.to_gray().save_png(&out_dir.join("target").join(format!("{id}.png")))?;
                // byte-identical label reuse
                std::fs::copy(
                    labels_dir.join(format!("{id}.txt")),
                    out_dir.join("labels").join(format!("{id}.txt")),
                )?;
                Ok(SynthEntry { source_id: id.clone(), adapter_id: opts.adapter_id.clone(), seed })
            },
        )
        .collect::<Result<Vec<_>>>()?;

    let manifest = SynthManifest {
        adapter_id: opts.adapter_id.clone(),
        base_seed: opts.base_seed,
        steps: opts.steps,
        count: entries.len(),
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Table-3 style training regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    RealOnly,
    SynthOnly,
    RealPlusSynth,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::RealOnly => "real_only",
            Regime::SynthOnly => "synthetic_only",
            Regime::RealPlusSynth => "real_plus_synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSetEntry {
    pub id: String,
    pub image: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergedSet {
    pub regime: String,
    pub n_real: usize,
    pub n_synth: usize,
    pub entries: Vec<TrainingSetEntry>,
}

/// Prefix entry ids (synthetic sets get a distinct namespace).
pub fn prefix_ids(entries: &[TrainingSetEntry], prefix: &str) -> Vec<TrainingSetEntry> {
    entries
        .iter()
        .map(|e| TrainingSetEntry {
            id: format!("{prefix}{}", e.id),
            image: e.image.clone(),
            labels: e.labels.clone(),
        })
        .collect()
}

/// Concatenate real and synthetic sets per regime; ids must be disjoint.
pub fn merge_sets(
    real: &[TrainingSetEntry],
    synth: &[TrainingSetEntry],
    regime: Regime,
) -> Result<MergedSet> {
    let entries: Vec<TrainingSetEntry> = match regime {
        Regime::RealOnly => real.to_vec(),
        Regime::SynthOnly => synth.to_vec(),
        Regime::RealPlusSynth => real.iter().chain(synth.iter()).cloned().collect(),
    };
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(&e.id) {
            return Err(Error::Validation(format!("id collision in merged set: {}", e.id)));
        }
    }
    let (n_real, n_synth) = match regime {
        Regime::RealOnly => (real.len(), 0),
        Regime::SynthOnly => (0, synth.len()),
        Regime::RealPlusSynth => (real.len(), synth.len()),
    };
    Ok(MergedSet { regime: regime.name().to_string(), n_real, n_synth, entries })
}

/// A source image plus the path of its label file.
#[derive(Debug, Clone)]
pub struct SourceRecord {
    pub id: String,
    pub image: Image,
    pub labels_path: PathBuf,
}

/// Load a labeled source-only corpus from `<dir>/{source,labels}`.
///
/// A `target/` subdirectory, when present, is ignored entirely (the point is
/// to reuse RGB-only corpora).
pub fn load_external_dataset(dir: &Path) -> Result<Vec<SourceRecord>> {
    let source_dir = dir.join("source");
    let labels_dir = dir.join("labels");
    if !source_dir.is_dir() {
        return Err(Error::Validation(format!(
            "external dataset layout requires {}",
            source_dir.display()
        )));
    }
    if !labels_dir.is_dir() {
        return Err(Error::Validation(format!(
            "external dataset layout requires {}",
            labels_dir.display()
        )));
    }
    let ids = list_ids_with_extension(&source_dir, "png")?;
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let labels_path = labels_dir.join(format!("{id}.txt"));
        if !labels_path.exists() {
            return Err(Error::Validation(format!(
                "missing label file {}",
                labels_path.display()
            )));
        }
        let image = Image::load_png(&source_dir.join(format!("{id}.png")))?;
        out.push(SourceRecord { id, image, labels_path });
    }
    Ok(out)
}
