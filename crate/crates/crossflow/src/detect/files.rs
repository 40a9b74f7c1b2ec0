//! Label and prediction text files.
//!
//! One file per image. Label lines are `class_id cx cy w h` normalized to
//! [0,1]; prediction lines append a trailing `score`. The directory evaluator
//! pairs files by stem and computes metrics in normalized coordinates (IoU is
//! scale-invariant).

use std::collections::BTreeMap;
use std::path::Path;

use super::{evaluate_map, Box, EvalResult};
use crate::error::{Error, Result};

/// Parse one `class cx cy w h [score]` line into a box, in units of the given
/// image dimensions (pass 1.0 x 1.0 to stay normalized).
pub fn parse_label_line(line: &str, image_w: f64, image_h: f64, with_score: bool) -> Result<Box> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let expected = if with_score { 6 } else { 5 };
    if fields.len() != expected {
        return Err(Error::Validation(format!(
            "expected {expected} fields, got {}: {line:?}",
            fields.len()
        )));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::Validation(format!("bad number {s:?} in {line:?}")))
    };
    let class_id = fields[0]
        .parse::<u32>()
        .map_err(|_| Error::Validation(format!("bad class id {:?} in {line:?}", fields[0])))?;
    let cx = parse(fields[1])? * image_w;
    let cy = parse(fields[2])? * image_h;
    let w = parse(fields[3])? * image_w;
    let h = parse(fields[4])? * image_h;
    let mut b = Box::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, class_id)?;
    if with_score {
        let score = parse(fields[5])?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Validation(format!("score {score} outside [0,1] in {line:?}")));
        }
        b = b.with_score(score);
    }
    Ok(b)
}

pub fn parse_labels(content: &str, image_w: f64, image_h: f64) -> Result<Vec<Box>> {
    content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_label_line(l, image_w, image_h, false))
        .collect()
}

pub fn parse_predictions(content: &str, image_w: f64, image_h: f64) -> Result<Vec<Box>> {
    content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_label_line(l, image_w, image_h, true))
        .collect()
}

fn format_box(b: &Box, image_w: f64, image_h: f64, with_score: bool) -> String {
    let cx = (b.x_min + b.x_max) / 2.0 / image_w;
    let cy = (b.y_min + b.y_max) / 2.0 / image_h;
    let w = (b.x_max - b.x_min) / image_w;
    let h = (b.y_max - b.y_min) / image_h;
    if with_score {
        format!("{} {:.6} {:.6} {:.6} {:.6} {:.6}", b.class_id, cx, cy, w, h, b.score.unwrap_or(0.0))
    } else {
        format!("{} {:.6} {:.6} {:.6} {:.6}", b.class_id, cx, cy, w, h)
    }
}

pub fn write_labels(boxes: &[Box], image_w: f64, image_h: f64) -> String {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format_box(b, image_w, image_h, false));
        out.push('\n');
    }
    out
}

pub fn write_predictions(boxes: &[Box], image_w: f64, image_h: f64) -> String {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format_box(b, image_w, image_h, true));
        out.push('\n');
    }
    out
}

fn load_dir(dir: &Path, with_score: bool) -> Result<BTreeMap<String, Vec<Box>>> {
    if !dir.is_dir() {
        return Err(Error::Validation(format!("not a directory: {}", dir.display())));
    }
    let mut out = BTreeMap::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Validation(format!("bad file name {}", path.display())))?
            .to_string();
        let content = std::fs::read_to_string(&path)?;
        let boxes = if with_score {
            parse_predictions(&content, 1.0, 1.0)
        } else {
            parse_labels(&content, 1.0, 1.0)
        }
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        out.insert(stem, boxes);
    }
    Ok(out)
}

/// Evaluate directories of prediction and label files.
pub fn eval_map_from_dirs(preds_dir: &Path, labels_dir: &Path) -> Result<EvalResult> {
    let preds = load_dir(preds_dir, true)?;
    let gts = load_dir(labels_dir, false)?;
    evaluate_map(&preds, &gts)
}
