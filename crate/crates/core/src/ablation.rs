//! Sweep over corruption strategies, noise types, decoupling levels and
//! decoders: one toy model per training configuration, every decoder on
//! each, all scored on the same test draws.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{CorruptionStrategy, DecouplingLevel, NoiseAssignment, NoiseType};
use crate::eval::{collection_retention, frechet_distance, max_iou, mean_alignment_overlap, FeatureExtractor, FeatureTrainConfig, Pairing};
use crate::inference::{build_task, decode, DecodeOptions, DecodeStrategy, GenerationRequest, Task, TaskSource, TaskSpec};
use crate::layout::Layout;
use crate::numerics::seeded_rng;
use crate::training::{TrainConfig, Trainer};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Base training settings; strategy, level and geometry noise are swept.
    pub train: TrainConfig,
    /// Training steps per configuration.
    pub steps: u64,
    pub task: Task,
    /// Test layouts decoded per cell.
    pub n_eval: usize,
    pub decode_steps: Option<usize>,
    pub temperature: f64,
    /// Steps for the FID feature extractor; 0 skips FID.
    pub feature_steps: u64,
    pub seed: u64,
    pub strategies: Vec<CorruptionStrategy>,
    pub noises: Vec<NoiseType>,
    pub levels: Vec<DecouplingLevel>,
    pub decoders: Vec<DecodeStrategy>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::toy(),
            steps: 200,
            task: Task::GenPCM,
            n_eval: 100,
            decode_steps: None,
            temperature: 1.0,
            feature_steps: 300,
            seed: 0,
            strategies: CorruptionStrategy::ALL.to_vec(),
            noises: NoiseType::ALL.to_vec(),
            levels: DecouplingLevel::ALL.to_vec(),
            decoders: DecodeStrategy::ALL.to_vec(),
        }
    }
}

impl AblationConfig {
    pub fn check(&self) -> Result<()> {
        if self.steps == 0 || self.n_eval == 0 {
            return Err(Error::Validation("ablation needs steps >= 1 and n_eval >= 1".into()));
        }
        if self.strategies.is_empty() || self.noises.is_empty() || self.levels.is_empty() || self.decoders.is_empty() {
            return Err(Error::Validation("every swept axis needs at least one value".into()));
        }
        self.train.check()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub level: DecouplingLevel,
    pub decoder: DecodeStrategy,
    pub val_l_vlb: f64,
    pub max_iou: f64,
    pub fid: Option<f64>,
    pub alignment: f64,
    pub overlap: f64,
    pub retention: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: CorruptionStrategy,
    pub noise: NoiseType,
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub task: Task,
    pub train_steps: u64,
    pub n_eval: usize,
    pub seed: u64,
    pub seconds: f64,
    pub rows: Vec<AblationRow>,
}

const METRICS: [&str; 6] = ["val_l_vlb", "max_iou", "fid", "alignment", "overlap", "retention"];

impl AblationTable {
    /// One CSV line per row; columns are `level/decoder/metric`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,noise");
        if let Some(first) = self.rows.first() {
            for c in &first.cells {
                for m in METRICS {
                    out.push_str(&format!(",{}/{}/{m}", c.level.name(), c.decoder.name()));
                }
            }
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for row in &self.rows {
            out.push_str(&format!("{},{}", row.strategy.name(), row.noise.name()));
            for c in &row.cells {
                for v in [Some(c.val_l_vlb), Some(c.max_iou), c.fid, Some(c.alignment), Some(c.overlap), c.retention] {
                    out.push(',');
                    out.push_str(&opt(v));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Run the sweep. `progress` receives one JSON line per trained configuration.
pub fn run_ablation(
    cfg: &AblationConfig,
    train: &[Layout],
    val: &[Layout],
    test: &[Layout],
    progress: &mut dyn Write,
) -> Result<AblationTable> {
    cfg.check()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("ablation needs training and test layouts".into()));
    }
    let start = Instant::now();
    let quant = cfg.train.quantizer()?;
    let sources: Vec<&Layout> = test.iter().cycle().take(cfg.n_eval).collect();
    let inputs: Vec<Layout> = sources
        .iter()
        .enumerate()
        .map(|(i, src)| {
            let mut rng = seeded_rng(cfg.seed, &format!("ablation-task/{i}"));
            build_task(&TaskSource::Layout((*src).clone()), &TaskSpec::new(cfg.task), &quant, &mut rng)
        })
        .collect::<Result<_>>()?;
    let references: Vec<Layout> = sources.iter().map(|l| (*l).clone()).collect();
    let extractor = if cfg.feature_steps > 0 {
        let fc = FeatureTrainConfig { steps: cfg.feature_steps, seed: cfg.seed, ..FeatureTrainConfig::default() };
        Some(FeatureExtractor::train(train, quant, fc)?.0)
    } else {
        None
    };
    let reference_features = extractor.as_ref().map(|e| e.features(&references)).transpose()?;

    let mut rows = Vec::with_capacity(cfg.strategies.len() * cfg.noises.len());
    for &strategy in &cfg.strategies {
        for &noise in &cfg.noises {
            let mut cells = Vec::with_capacity(cfg.levels.len() * cfg.decoders.len());
            for &level in &cfg.levels {
                let train_cfg = TrainConfig {
                    strategy,
                    level,
                    noise: NoiseAssignment { geometry: noise, ..NoiseAssignment::default() },
                    total_steps: cfg.steps,
                    seed: cfg.seed,
                    ..cfg.train.clone()
                };
                let mut trainer = Trainer::new(train_cfg)?;
                while trainer.step_index() < cfg.steps {
                    trainer.step(train)?;
                }
                let val_l_vlb = trainer.evaluate(if val.is_empty() { test } else { val })?.l_vlb;
                let stacks = trainer.cfg.stacks()?;
                let model = &trainer.checkpoint().model;
                let steps = cfg.decode_steps.unwrap_or(trainer.cfg.t_max);
                for &decoder in &cfg.decoders {
                    let outputs: Vec<Layout> = inputs
                        .par_iter()
                        .enumerate()
                        .map(|(i, input)| {
                            let req = GenerationRequest {
                                strategy: decoder,
                                temperature: cfg.temperature,
                                ..GenerationRequest::new(input.clone(), steps, cfg.seed.wrapping_add(i as u64))
                            };
                            decode(&req, model, &stacks, DecodeOptions::default()).map(|(l, _)| l)
                        })
                        .collect::<Result<_>>()?;
                    let (alignment, overlap) = mean_alignment_overlap(&outputs, &quant)?;
                    let fid = match (&extractor, &reference_features) {
                        (Some(e), Some(r)) => Some(frechet_distance(&e.features(&outputs)?, r)?),
                        _ => None,
                    };
                    cells.push(AblationCell {
                        level,
                        decoder,
                        val_l_vlb,
                        max_iou: max_iou(&outputs, &references, &quant, Pairing::Source)?,
                        fid,
                        alignment,
                        overlap,
                        retention: collection_retention(&inputs, &outputs)?,
                    });
                }
                let line = serde_json::json!({
                    "strategy": strategy.name(),
                    "noise": noise.name(),
                    "level": level.name(),
                    "val_l_vlb": val_l_vlb,
                    "seconds": start.elapsed().as_secs_f64(),
                });
                writeln!(progress, "{line}").map_err(|e| Error::Io { path: "<progress>".into(), source: e })?;
            }
            rows.push(AblationRow { strategy, noise, cells });
        }
    }
    Ok(AblationTable {
        task: cfg.task,
        train_steps: cfg.steps,
        n_eval: cfg.n_eval,
        seed: cfg.seed,
        seconds: start.elapsed().as_secs_f64(),
        rows,
    })
}
