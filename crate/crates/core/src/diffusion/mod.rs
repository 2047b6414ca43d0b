//! Forward corruption machinery.
//!
//! Every attribute kind has its own vocabulary of `K` clean values plus one
//! absorbing MASK value at index `K`. Matrices use the column convention
//! `Q[i][j] = q(x_t = i | x_{t-1} = j)`, so a distribution is a column vector
//! and one step is a left multiplication.

mod corrupt;
mod plan;
mod schedule;
mod stack;
mod transition;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use corrupt::corrupt;
pub use plan::{plan_corruption, CorruptionPlan, CorruptionStrategy, DecouplingLevel, PlanEntry};
pub use schedule::Schedule;
pub use stack::{StackSet, TransitionStack};
pub use transition::{build_transition_matrix, TransitionMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseType {
    Uniform,
    DiscretizedGaussian,
    /// Band of half-width `v`; `None` picks `max(1, round(0.05 K))`.
    BandDiagonal(Option<u32>),
}

impl NoiseType {
    pub const ALL: [NoiseType; 3] = [
        NoiseType::Uniform,
        NoiseType::DiscretizedGaussian,
        NoiseType::BandDiagonal(None),
    ];

    pub fn name(&self) -> &'static str {
        match self {
            NoiseType::Uniform => "Uniform",
            NoiseType::DiscretizedGaussian => "DiscretizedGaussian",
            NoiseType::BandDiagonal(_) => "BandDiagonal",
        }
    }

    pub fn band_width(&self, k: usize) -> Option<usize> {
        match self {
            NoiseType::BandDiagonal(Some(v)) => Some(*v as usize),
            NoiseType::BandDiagonal(None) => Some(((0.05 * k as f64).round() as usize).max(1)),
            _ => None,
        }
    }
}

impl FromStr for NoiseType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Uniform" | "uniform" => Ok(NoiseType::Uniform),
            "DiscretizedGaussian" | "gaussian" | "discretized-gaussian" => {
                Ok(NoiseType::DiscretizedGaussian)
            }
            "BandDiagonal" | "band" | "band-diagonal" => Ok(NoiseType::BandDiagonal(None)),
            other => {
                if let Some(v) = other
                    .strip_prefix("BandDiagonal(")
                    .and_then(|r| r.strip_suffix(')'))
                {
                    let v: u32 = v.parse().map_err(|_| format!("bad band width in `{other}`"))?;
                    if v == 0 {
                        return Err("band half-width must be at least 1".into());
                    }
                    return Ok(NoiseType::BandDiagonal(Some(v)));
                }
                Err(format!("unknown noise type `{other}`"))
            }
        }
    }
}

/// Noise type used for each attribute kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseAssignment {
    pub category: NoiseType,
    pub geometry: NoiseType,
}

impl Default for NoiseAssignment {
    fn default() -> Self {
        Self {
            category: NoiseType::Uniform,
            geometry: NoiseType::DiscretizedGaussian,
        }
    }
}

impl NoiseAssignment {
    pub fn for_kind(&self, kind: crate::layout::AttrKind) -> NoiseType {
        if kind.is_geometry() {
            self.geometry
        } else {
            self.category
        }
    }
}
