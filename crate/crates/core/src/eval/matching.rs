use std::collections::BTreeMap;

use crate::layout::{ContinuousBox, Layout, QuantizerConfig};
use crate::{Error, Result};

/// Maximum-weight assignment on a rectangular weight matrix. Returns the
/// total weight and, per row, the matched column.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> (f64, Vec<Option<usize>>) {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return (0.0, vec![None; rows]);
    }
    if rows > cols {
        let transposed: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| weights[i][j]).collect()).collect();
        let (total, col_match) = max_weight_assignment(&transposed);
        let mut row_match = vec![None; rows];
        for (j, m) in col_match.into_iter().enumerate() {
            if let Some(i) = m {
                row_match[i] = Some(j);
            }
        }
        return (total, row_match);
    }
    // Kuhn-Munkres with potentials on the cost -w, 1-based with a dummy column 0.
    let cost = |i: usize, j: usize| -weights[i - 1][j - 1];
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![None; n];
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = Some(j - 1);
            total += weights[p[j] - 1][j - 1];
        }
    }
    (total, assignment)
}

fn boxes_by_category(layout: &Layout, cfg: &QuantizerConfig) -> Result<BTreeMap<u32, Vec<ContinuousBox>>> {
    let mut out: BTreeMap<u32, Vec<ContinuousBox>> = BTreeMap::new();
    for (i, e) in layout.elements.iter().enumerate() {
        let (Some(c), Some(b)) = (e.category(), e.normalized_box(cfg)) else {
            return Err(Error::IncompleteLayout(format!("element {i} has masked attributes")));
        };
        out.entry(c).or_default().push(b);
    }
    Ok(out)
}

/// Mean over reference elements of the IoU each gets under the optimal
/// same-category matching with the generated elements.
pub fn layout_max_iou(generated: &Layout, reference: &Layout, cfg: &QuantizerConfig) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Degenerate("reference layout has no elements".into()));
    }
    let gen = boxes_by_category(generated, cfg)?;
    let reference_boxes = boxes_by_category(reference, cfg)?;
    let mut total = 0.0;
    for (cat, refs) in &reference_boxes {
        let Some(gens) = gen.get(cat) else { continue };
        let w: Vec<Vec<f64>> = refs.iter().map(|r| gens.iter().map(|g| r.iou(g)).collect()).collect();
        total += max_weight_assignment(&w).0;
    }
    Ok(total / reference.len() as f64)
}

/// How generated layouts are paired with references.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// Element `i` of both collections belong together.
    Source,
    /// Each generated layout takes its best reference among those with the
    /// same category multiset; without one it scores 0.
    BestSameMultiset,
}

fn category_multiset(l: &Layout) -> Vec<Option<u32>> {
    let mut c: Vec<Option<u32>> = l.elements.iter().map(|e| e.category()).collect();
    c.sort_unstable();
    c
}

/// Collection-level MaxIoU.
pub fn max_iou(generated: &[Layout], reference: &[Layout], cfg: &QuantizerConfig, pairing: Pairing) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Degenerate("MaxIoU needs non-empty collections".into()));
    }
    let scores = match pairing {
        Pairing::Source => {
            if generated.len() != reference.len() {
                return Err(Error::Shape(format!(
                    "{} generated layouts for {} sources",
                    generated.len(),
                    reference.len()
                )));
            }
            generated
                .iter()
                .zip(reference)
                .map(|(g, r)| layout_max_iou(g, r, cfg))
                .collect::<Result<Vec<_>>>()?
        }
        Pairing::BestSameMultiset => {
            let mut groups: BTreeMap<Vec<Option<u32>>, Vec<&Layout>> = BTreeMap::new();
            for r in reference {
                groups.entry(category_multiset(r)).or_default().push(r);
            }
            generated
                .iter()
                .map(|g| {
                    let Some(cands) = groups.get(&category_multiset(g)) else { return Ok(0.0) };
                    cands
                        .iter()
                        .map(|r| layout_max_iou(g, r, cfg))
                        .try_fold(0.0f64, |best, s| s.map(|s| best.max(s)))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
