use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Layout, QuantizerConfig, RelationLabel, RelationMap};
use crate::{Error, Result};

/// Slack for comparisons of dequantized coordinates, far below one bin.
const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationMode {
    Size,
    Location,
    Mixed,
}

impl FromStr for RelationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "size" => Ok(RelationMode::Size),
            "location" => Ok(RelationMode::Location),
            "mixed" => Ok(RelationMode::Mixed),
            other => Err(format!("unknown relation mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationConfig {
    pub mode: RelationMode,
    /// Relative area tolerance under which two boxes count as equal-sized.
    pub eps_rel: f64,
}

impl Default for RelationConfig {
    fn default() -> Self {
        Self {
            mode: RelationMode::Mixed,
            eps_rel: 0.05,
        }
    }
}

/// Label every ordered pair `(i, j)`, `i != j`, of a layout with complete geometry.
///
/// Size: `equal` when `|A_i - A_j| <= eps_rel * max(A_i, A_j)`, else
/// `smaller`/`larger` from `i`'s point of view. Location: `overlapped` for a
/// positive intersection area, otherwise the dominant axis of the center
/// displacement decides (`above`/`bottom` when `|dy| >= |dx|`, with y growing
/// downwards). Boxes sharing a center without intersecting are `overlapped`.
/// Mixed: `equal` when the size rule says so, the location label otherwise.
pub fn derive_relations(
    layout: &Layout,
    cfg: &QuantizerConfig,
    rel: &RelationConfig,
) -> Result<RelationMap> {
    let boxes = layout
        .elements
        .iter()
        .enumerate()
        .map(|(i, e)| {
            e.normalized_box(cfg).ok_or_else(|| {
                Error::IncompleteLayout(format!("element {i} has masked geometry"))
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut map = RelationMap::new();
    for (i, bi) in boxes.iter().enumerate() {
        for (j, bj) in boxes.iter().enumerate() {
            if i == j {
                continue;
            }
            let size = {
                let (ai, aj) = (bi.area(), bj.area());
                if (ai - aj).abs() <= rel.eps_rel * ai.max(aj) + TIE_EPS {
                    RelationLabel::Equal
                } else if ai < aj {
                    RelationLabel::Smaller
                } else {
                    RelationLabel::Larger
                }
            };
            let location = || {
                if bi.intersection(bj) > TIE_EPS {
                    return RelationLabel::Overlapped;
                }
                let (cxi, cyi) = bi.center();
                let (cxj, cyj) = bj.center();
                let (dx, dy) = (cxj - cxi, cyj - cyi);
                if dx.abs() < TIE_EPS && dy.abs() < TIE_EPS {
                    RelationLabel::Overlapped
                } else if dy.abs() >= dx.abs() - TIE_EPS {
                    if dy > 0.0 {
                        RelationLabel::Above
                    } else {
                        RelationLabel::Bottom
                    }
                } else if dx > 0.0 {
                    RelationLabel::Left
                } else {
                    RelationLabel::Right
                }
            };
            let label = match rel.mode {
                RelationMode::Size => size,
                RelationMode::Location => location(),
                RelationMode::Mixed if size == RelationLabel::Equal => size,
                RelationMode::Mixed => location(),
            };
            map.insert((i, j), label);
        }
    }
    Ok(map)
}

/// Keep `round(fraction * N(N-1))` ordered pairs of a full relation map,
/// chosen uniformly without replacement.
pub fn sample_relations<R: Rng + ?Sized>(full: &RelationMap, n: usize, fraction: f64, rng: &mut R) -> RelationMap {
    let pairs = n * n.saturating_sub(1);
    let keep = ((fraction.clamp(0.0, 1.0) * pairs as f64).round() as usize).min(full.len());
    let entries: Vec<_> = full.iter().collect();
    rand::seq::index::sample(rng, entries.len(), keep)
        .into_iter()
        .map(|i| (*entries[i].0, *entries[i].1))
        .collect()
}
