//! Layout quality metrics: MaxIoU, alignment, overlap, FID over learned
//! features, and condition retention.

mod fid;
mod matching;

use serde::{Deserialize, Serialize};

use crate::layout::{AttrStatus, ContinuousBox, Layout, QuantizerConfig};
use crate::{Error, Result};

pub use fid::{frechet_distance, perturb, FeatureExtractor, FeatureTrainConfig, COV_SHRINKAGE, FEATURE_DIM};
pub use matching::{layout_max_iou, max_iou, max_weight_assignment, Pairing};

fn boxes(layout: &Layout, cfg: &QuantizerConfig) -> Result<Vec<ContinuousBox>> {
    layout
        .elements
        .iter()
        .enumerate()
        .map(|(i, e)| {
            e.normalized_box(cfg)
                .ok_or_else(|| Error::IncompleteLayout(format!("element {i} has masked geometry")))
        })
        .collect()
}

/// `(100 / N) * sum_i min_{j != i, item} |v_item(i) - v_item(j)|` over the
/// left, x-center, right, top, y-center and bottom coordinates.
pub fn alignment(layout: &Layout, cfg: &QuantizerConfig) -> Result<f64> {
    let b = boxes(layout, cfg)?;
    let n = b.len();
    if n < 2 {
        return Ok(0.0);
    }
    let items = |b: &ContinuousBox| {
        let (cx, cy) = b.center();
        [b.x0, cx, b.x1, b.y0, cy, b.y1]
    };
    let v: Vec<[f64; 6]> = b.iter().map(items).collect();
    let total: f64 = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .flat_map(|j| (0..6).map(move |k| (j, k)))
                .map(|(j, k)| (v[i][k] - v[j][k]).abs())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(100.0 * total / n as f64)
}

/// `(100 / N) * sum_i sum_{j != i} area(B_i & B_j) / area(B_i)`.
pub fn overlap(layout: &Layout, cfg: &QuantizerConfig) -> Result<f64> {
    let b = boxes(layout, cfg)?;
    let n = b.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, bi) in b.iter().enumerate() {
        let area = bi.area();
        if area <= 0.0 {
            continue;
        }
        for (j, bj) in b.iter().enumerate() {
            if i != j {
                total += bi.intersection(bj) / area;
            }
        }
    }
    Ok(100.0 * total / n as f64)
}

/// Percentage of precise input attributes whose bin survives in the output;
/// `None` when the input has no precise attribute.
pub fn retention(input: &Layout, output: &Layout) -> Result<Option<f64>> {
    if input.len() != output.len() {
        return Err(Error::Shape(format!(
            "input has {} elements, output {}",
            input.len(),
            output.len()
        )));
    }
    let mut kept = 0usize;
    let mut total = 0usize;
    for (a, b) in input.elements.iter().zip(&output.elements) {
        for (x, y) in a.attrs.iter().zip(&b.attrs) {
            if x.status == AttrStatus::Precise {
                total += 1;
                kept += usize::from(x.bin == y.bin);
            }
        }
    }
    Ok((total > 0).then(|| 100.0 * kept as f64 / total as f64))
}

/// Retention pooled over a collection of (input, output) pairs.
pub fn collection_retention(inputs: &[Layout], outputs: &[Layout]) -> Result<Option<f64>> {
    if inputs.len() != outputs.len() {
        return Err(Error::Shape("input and output collections differ in length".into()));
    }
    let mut kept = 0.0;
    let mut total = 0usize;
    for (a, b) in inputs.iter().zip(outputs) {
        let n = a
            .elements
            .iter()
            .flat_map(|e| e.attrs.iter())
            .filter(|x| x.status == AttrStatus::Precise)
            .count();
        if let Some(r) = retention(a, b)? {
            kept += r * n as f64 / 100.0;
            total += n;
        }
    }
    Ok((total > 0).then(|| 100.0 * kept / total as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub max_iou: f64,
    pub fid: f64,
    pub alignment: f64,
    pub overlap: f64,
    pub retention: Option<f64>,
    pub n_layouts: usize,
}

/// Mean alignment and overlap of a collection.
pub fn mean_alignment_overlap(layouts: &[Layout], cfg: &QuantizerConfig) -> Result<(f64, f64)> {
    if layouts.is_empty() {
        return Err(Error::Degenerate("empty collection".into()));
    }
    let mut a = 0.0;
    let mut o = 0.0;
    for l in layouts {
        a += alignment(l, cfg)?;
        o += overlap(l, cfg)?;
    }
    let n = layouts.len() as f64;
    Ok((a / n, o / n))
}

/// All metrics of `generated` against `reference`. `inputs` are the
/// conditioned requests when the generation was conditional.
pub fn evaluate(
    generated: &[Layout],
    reference: &[Layout],
    inputs: Option<&[Layout]>,
    pairing: Pairing,
    extractor: &FeatureExtractor,
    cfg: &QuantizerConfig,
) -> Result<MetricReport> {
    let max_iou = max_iou(generated, reference, cfg, pairing)?;
    let fid = frechet_distance(&extractor.features(generated)?, &extractor.features(reference)?)?;
    let (alignment, overlap) = mean_alignment_overlap(generated, cfg)?;
    let retention = match inputs {
        Some(inputs) => collection_retention(inputs, generated)?,
        None => None,
    };
    Ok(MetricReport {
        max_iou,
        fid,
        alignment,
        overlap,
        retention,
        n_layouts: generated.len(),
    })
}
