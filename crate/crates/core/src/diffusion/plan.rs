use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layout::{AttrGroup, TokenSequence};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub enum CorruptionStrategy {
    #[default]
    ParallelDecoupled,
    SequentialDecoupled,
    /// Overlap fraction `f` in `(0, 1)`; the master clock runs to `(1 + 2f) T`.
    PartialDecoupled(f64),
    NonDecoupled,
}

impl CorruptionStrategy {
    pub const ALL: [CorruptionStrategy; 4] = [
        CorruptionStrategy::ParallelDecoupled,
        CorruptionStrategy::SequentialDecoupled,
        CorruptionStrategy::PartialDecoupled(0.3),
        CorruptionStrategy::NonDecoupled,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionStrategy::ParallelDecoupled => "ParallelDecoupled",
            CorruptionStrategy::SequentialDecoupled => "SequentialDecoupled",
            CorruptionStrategy::PartialDecoupled(_) => "PartialDecoupled",
            CorruptionStrategy::NonDecoupled => "NonDecoupled",
        }
    }

    pub fn check(&self) -> crate::Result<()> {
        if let CorruptionStrategy::PartialDecoupled(f) = self {
            if !(*f > 0.0 && *f < 1.0) {
                return Err(crate::Error::Validation(format!(
                    "partial overlap {f} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }

    /// Largest master timestep for a chain of `t_max` steps.
    pub fn master_len(&self, t_max: usize) -> usize {
        match self {
            CorruptionStrategy::ParallelDecoupled | CorruptionStrategy::NonDecoupled => t_max,
            CorruptionStrategy::PartialDecoupled(f) => t_max + partial_offsets(*f, t_max).1,
            CorruptionStrategy::SequentialDecoupled => 3 * t_max,
        }
    }

    /// Map a master timestep to the timestep of one attribute group.
    pub fn group_timestep(&self, master: usize, group: AttrGroup, t_max: usize) -> usize {
        let t = master;
        let mapped = match self {
            CorruptionStrategy::ParallelDecoupled | CorruptionStrategy::NonDecoupled => t,
            CorruptionStrategy::PartialDecoupled(f) => {
                let (dp, dc) = partial_offsets(*f, t_max);
                match group {
                    AttrGroup::Category => {
                        if t < dc {
                            1
                        } else {
                            t - dc
                        }
                    }
                    AttrGroup::Position => {
                        if t < dp {
                            1
                        } else if t > t_max + dp {
                            t_max
                        } else {
                            t - dp
                        }
                    }
                    AttrGroup::Size => t.min(t_max),
                }
            }
            CorruptionStrategy::SequentialDecoupled => match group {
                AttrGroup::Category => {
                    if t < 2 * t_max {
                        1
                    } else {
                        t - 2 * t_max
                    }
                }
                AttrGroup::Position => {
                    if t <= t_max {
                        1
                    } else if t <= 2 * t_max {
                        t - t_max
                    } else {
                        t_max
                    }
                }
                AttrGroup::Size => t.min(t_max),
            },
        };
        mapped.clamp(1, t_max)
    }
}

/// `(round(f T), round(2 f T))`: position and category delays.
fn partial_offsets(f: f64, t_max: usize) -> (usize, usize) {
    let t = t_max as f64;
    ((f * t).round() as usize, (2.0 * f * t).round() as usize)
}

impl fmt::Display for CorruptionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorruptionStrategy::PartialDecoupled(o) if (*o - 0.3).abs() > 1e-12 => {
                write!(f, "PartialDecoupled({o})")
            }
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for CorruptionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parsed = match s {
            "ParallelDecoupled" | "parallel" => CorruptionStrategy::ParallelDecoupled,
            "SequentialDecoupled" | "sequential" => CorruptionStrategy::SequentialDecoupled,
            "PartialDecoupled" | "partial" => CorruptionStrategy::PartialDecoupled(0.3),
            "NonDecoupled" | "non" | "none" => CorruptionStrategy::NonDecoupled,
            other => {
                let inner = other
                    .strip_prefix("PartialDecoupled(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| format!("unknown corruption strategy `{other}`"))?;
                let f: f64 = inner
                    .parse()
                    .map_err(|_| format!("bad overlap fraction in `{other}`"))?;
                CorruptionStrategy::PartialDecoupled(f)
            }
        };
        parsed.check().map_err(|e| e.to_string())?;
        Ok(parsed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecouplingLevel {
    None,
    Element,
    Token,
    #[default]
    TypeGroup,
}

impl DecouplingLevel {
    pub const ALL: [DecouplingLevel; 4] = [
        DecouplingLevel::None,
        DecouplingLevel::Element,
        DecouplingLevel::Token,
        DecouplingLevel::TypeGroup,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DecouplingLevel::None => "None",
            DecouplingLevel::Element => "Element",
            DecouplingLevel::Token => "Token",
            DecouplingLevel::TypeGroup => "TypeGroup",
        }
    }
}

impl fmt::Display for DecouplingLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecouplingLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "None" | "none" => Ok(DecouplingLevel::None),
            "Element" | "element" => Ok(DecouplingLevel::Element),
            "Token" | "token" => Ok(DecouplingLevel::Token),
            "TypeGroup" | "type-group" | "typegroup" | "group" => Ok(DecouplingLevel::TypeGroup),
            other => Err(format!("unknown decoupling level `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlanEntry {
    pub selected: bool,
    /// 0 when unselected, else in `[1, T]`.
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub entries: Vec<PlanEntry>,
}

impl CorruptionPlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every token selected at the same timestep.
    pub fn uniform(n_tokens: usize, t: usize) -> Self {
        Self {
            entries: vec![PlanEntry { selected: t > 0, t }; n_tokens],
        }
    }
}

/// Clock key shared by tokens that draw one master timestep.
fn clock_key(
    strategy: CorruptionStrategy,
    level: DecouplingLevel,
    element: usize,
    token: usize,
    group: AttrGroup,
) -> usize {
    if strategy == CorruptionStrategy::NonDecoupled {
        return 0;
    }
    match level {
        DecouplingLevel::None => 0,
        DecouplingLevel::Element => element,
        DecouplingLevel::Token => token,
        DecouplingLevel::TypeGroup => match strategy {
            CorruptionStrategy::ParallelDecoupled => group as usize,
            _ => 0,
        },
    }
}

/// Select tokens with probability `select_prob` and assign timesteps.
///
/// The decoupling level decides which tokens share one master clock draw;
/// the strategy then maps the master value to each token's attribute group.
pub fn plan_corruption<R: Rng + ?Sized>(
    seq: &TokenSequence,
    strategy: CorruptionStrategy,
    level: DecouplingLevel,
    select_prob: f64,
    t_max: usize,
    rng: &mut R,
) -> CorruptionPlan {
    let t_max = t_max.max(1);
    let master_len = strategy.master_len(t_max);
    let n = seq.tokens.len();
    let selected: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < select_prob).collect();
    let mut clocks: Vec<(usize, usize)> = Vec::new();
    let mut entries = Vec::with_capacity(n);
    for (i, tok) in seq.tokens.iter().enumerate() {
        let group = tok.kind.group();
        let key = clock_key(strategy, level, tok.element, i, group);
        let master = match clocks.iter().find(|(k, _)| *k == key) {
            Some(&(_, m)) => m,
            None => {
                let m = rng.random_range(1..=master_len);
                clocks.push((key, m));
                m
            }
        };
        entries.push(if selected[i] {
            PlanEntry {
                selected: true,
                t: strategy.group_timestep(master, group, t_max),
            }
        } else {
            PlanEntry::default()
        });
    }
    CorruptionPlan { entries }
}
