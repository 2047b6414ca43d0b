//! The variational training objective and a seeded, resumable training loop.

mod loss;

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{save_checkpoint, Batch, Checkpoint, Denoiser, ModelConfig};
use crate::diffusion::{
    corrupt, plan_corruption, CorruptionPlan, CorruptionStrategy, DecouplingLevel, NoiseAssignment, Schedule, StackSet,
};
use crate::layout::{derive_relations, sample_relations, tokenize, Layout, QuantizerConfig, RelationConfig, TokenSequence};
use crate::numerics::{seeded_rng, AdamW, AdamWConfig, Graph};
use crate::{Error, Result};

pub use loss::{compute_loss, loss_on_graph, targets, token_loss, LossBreakdown, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub t_max: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub strategy: CorruptionStrategy,
    pub level: DecouplingLevel,
    pub noise: NoiseAssignment,
    pub select_prob: f64,
    pub beta_end: f64,
    pub sigma_end: f64,
    pub gamma_end: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    /// Probability that a training example carries sampled relations.
    pub relation_prob: f64,
    /// Fraction of ordered pairs kept when relations are attached.
    pub relation_fraction: f64,
    pub eval_every: u64,
    pub k_category: u32,
    pub k_geometry: u32,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub n_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sched = Schedule::default();
        Self {
            t_max: sched.t_max,
            lambda: 0.1,
            batch_size: 128,
            lr: 5e-5,
            warmup_fraction: 0.1,
            total_steps: 10_000,
            seed: 0,
            strategy: CorruptionStrategy::default(),
            level: DecouplingLevel::default(),
            noise: NoiseAssignment::default(),
            select_prob: 0.9,
            beta_end: sched.beta_end,
            sigma_end: sched.sigma_end,
            gamma_end: sched.gamma_end,
            weight_decay: 0.01,
            max_grad_norm: None,
            relation_prob: 0.5,
            relation_fraction: 0.1,
            eval_every: 500,
            k_category: 13,
            k_geometry: QuantizerConfig::DEFAULT_GEOMETRY_BINS,
            d_model: 256,
            n_heads: 8,
            n_layers: 8,
            d_ffn: 2048,
            n_max: crate::layout::DEFAULT_N_MAX,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings for the synthetic corpus.
    pub fn toy() -> Self {
        Self {
            t_max: 20,
            batch_size: 32,
            lr: 1e-3,
            total_steps: 2000,
            k_category: 5,
            k_geometry: 32,
            d_model: 64,
            n_layers: 2,
            d_ffn: 128,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.t_max == 0 {
            return bad("t_max must be at least 1".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        for (name, v) in [
            ("warmup_fraction", self.warmup_fraction),
            ("select_prob", self.select_prob),
            ("relation_prob", self.relation_prob),
            ("relation_fraction", self.relation_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        self.strategy.check()?;
        self.schedule().check()?;
        self.quantizer()?;
        self.model_config()?.check()
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            t_max: self.t_max,
            beta_end: self.beta_end,
            sigma_end: self.sigma_end,
            gamma_end: self.gamma_end,
        }
    }

    pub fn quantizer(&self) -> Result<QuantizerConfig> {
        QuantizerConfig::new(self.k_category, self.k_geometry)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::standard(&self.quantizer()?);
        cfg.d_model = self.d_model;
        cfg.n_heads = self.n_heads;
        cfg.n_layers = self.n_layers;
        cfg.d_ffn = self.d_ffn;
        cfg.n_max = self.n_max;
        Ok(cfg)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: (self.warmup_fraction * self.total_steps as f64).ceil() as u64,
            max_grad_norm: self.max_grad_norm,
            ..AdamWConfig::default()
        }
    }

    pub fn stacks(&self) -> Result<StackSet> {
        StackSet::build(&self.noise, &self.schedule(), &self.quantizer()?)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_value(v: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(v.clone()).map_err(|e| Error::parse("$", e.to_string()))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_vlb: f64,
    pub l_rec: f64,
    pub l_total: f64,
    pub lr: f64,
    #[serde(skip)]
    pub grad_norm: f64,
    #[serde(skip)]
    pub breakdown: LossBreakdown,
}

/// A clean sequence, its corrupted copy and the plan that links them.
#[derive(Debug, Clone)]
pub struct Example {
    pub clean: TokenSequence,
    pub corrupted: TokenSequence,
    pub plan: CorruptionPlan,
}

/// Tokenize a complete layout, attach sampled relations and corrupt it.
pub fn prepare_example<R: Rng + ?Sized>(
    layout: &Layout,
    cfg: &TrainConfig,
    quant: &QuantizerConfig,
    stacks: &StackSet,
    rng: &mut R,
) -> Result<Example> {
    if !layout.is_complete() {
        return Err(Error::Data("training layouts must have every attribute".into()));
    }
    let mut clean = tokenize(layout, quant);
    clean.relations = if rng.random::<f64>() < cfg.relation_prob {
        let full = derive_relations(layout, quant, &RelationConfig::default())?;
        sample_relations(&full, layout.len(), cfg.relation_fraction, rng)
    } else {
        Default::default()
    };
    let plan = plan_corruption(&clean, cfg.strategy, cfg.level, cfg.select_prob, cfg.t_max, rng);
    let corrupted = corrupt(&clean, &plan, stacks, rng)?;
    Ok(Example { clean, corrupted, plan })
}

/// Examples for one step; each draws from its own `(seed, step, index)`
/// stream so the result does not depend on the thread count.
pub fn prepare_batch(
    layouts: &[&Layout],
    cfg: &TrainConfig,
    quant: &QuantizerConfig,
    stacks: &StackSet,
    label: &str,
) -> Result<Vec<Example>> {
    layouts
        .par_iter()
        .enumerate()
        .map(|(i, l)| {
            let mut rng = seeded_rng(cfg.seed, &format!("{label}/{i}"));
            prepare_example(l, cfg, quant, stacks, &mut rng)
        })
        .collect()
}

/// Loss of a batch of examples without a backward pass.
pub fn evaluate_examples(model: &Denoiser<f32>, examples: &[Example], stacks: &StackSet, lambda: f64) -> Result<LossBreakdown> {
    let batch = Batch::new(examples.iter().map(|e| &e.corrupted), &model.cfg)?;
    let mut targets = Vec::with_capacity(batch.len());
    for e in examples {
        targets.extend(loss::targets(&e.clean, &e.corrupted, &e.plan, stacks)?);
    }
    let mut g = Graph::new(&model.params);
    let (_, b) = loss_on_graph(&mut g, model, &batch, &targets, stacks, lambda)?;
    Ok(b)
}

/// plan, corrupt, forward, loss, backward and one optimizer update.
pub fn train_step(
    examples: &[Example],
    model: &mut Denoiser<f32>,
    opt: &mut AdamW<f32>,
    stacks: &StackSet,
    lambda: f64,
) -> Result<StepLog> {
    if examples.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let batch = Batch::new(examples.iter().map(|e| &e.corrupted), &model.cfg)?;
    let mut targets = Vec::with_capacity(batch.len());
    for e in examples {
        targets.extend(loss::targets(&e.clean, &e.corrupted, &e.plan, stacks)?);
    }
    let (grads, breakdown) = {
        let mut g = Graph::new(&model.params);
        let (l, b) = loss_on_graph(&mut g, model, &batch, &targets, stacks, lambda)?;
        (g.backward(l)?, b)
    };
    if !grads.all_finite() {
        return Err(Error::Invariant("non-finite gradient".into()));
    }
    let grad_norm = grads.global_norm();
    let lr = opt.step(&mut model.params, &grads);
    Ok(StepLog {
        step: opt.state.step,
        l_vlb: breakdown.l_vlb,
        l_rec: breakdown.l_rec,
        l_total: breakdown.l_total,
        lr,
        grad_norm,
        breakdown,
    })
}

/// Model, optimizer and everything needed to continue training.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Denoiser<f32>,
    pub opt: AdamW<f32>,
    pub stacks: StackSet,
    pub quant: QuantizerConfig,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.check()?;
        let model = Denoiser::new(cfg.model_config()?, cfg.seed)?;
        let opt = AdamW::new(cfg.adamw(), &model.params);
        Ok(Self {
            stacks: cfg.stacks()?,
            quant: cfg.quantizer()?,
            cfg,
            model,
            opt,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let cfg = match &ckpt.train_config {
            Some(v) => TrainConfig::from_value(v)?,
            None => return Err(Error::IncompatibleCheckpoint("checkpoint has no training config".into())),
        };
        cfg.check()?;
        if cfg.model_config()? != ckpt.model.cfg {
            return Err(Error::IncompatibleCheckpoint("model config disagrees with training config".into()));
        }
        let mut opt = AdamW::new(cfg.adamw(), &ckpt.model.params);
        if let Some(state) = ckpt.optimizer {
            opt.state = state;
        }
        Ok(Self {
            stacks: cfg.stacks()?,
            quant: cfg.quantizer()?,
            cfg,
            model: ckpt.model,
            opt,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.opt.state.step
    }

    /// Examples for the next step, drawn with replacement from the corpus.
    pub fn next_examples(&self, corpus: &[Layout]) -> Result<Vec<Example>> {
        if corpus.is_empty() {
            return Err(Error::Data("empty training corpus".into()));
        }
        let step = self.step_index() + 1;
        let mut rng = seeded_rng(self.cfg.seed, &format!("batch/{step}"));
        let picks: Vec<&Layout> = (0..self.cfg.batch_size)
            .map(|_| &corpus[rng.random_range(0..corpus.len())])
            .collect();
        prepare_batch(&picks, &self.cfg, &self.quant, &self.stacks, &format!("corrupt/{step}"))
    }

    pub fn step(&mut self, corpus: &[Layout]) -> Result<StepLog> {
        let examples = self.next_examples(corpus)?;
        train_step(&examples, &mut self.model, &mut self.opt, &self.stacks, self.cfg.lambda)
    }

    /// Validation loss on a fixed draw of corruptions.
    pub fn evaluate(&self, layouts: &[Layout]) -> Result<LossBreakdown> {
        let refs: Vec<&Layout> = layouts.iter().collect();
        let mut total = LossBreakdown::default();
        let mut weight = 0.0;
        for (c, chunk) in refs.chunks(self.cfg.batch_size).enumerate() {
            let ex = prepare_batch(chunk, &self.cfg, &self.quant, &self.stacks, &format!("val/{c}"))?;
            let b = evaluate_examples(&self.model, &ex, &self.stacks, self.cfg.lambda)?;
            let w = b.n_tokens() as f64;
            total.l_vlb += w * b.l_vlb;
            total.l_rec += w * b.l_rec;
            total.l_total += w * b.l_total;
            total.l_prior += w * b.l_prior;
            total.n_rec += b.n_rec;
            total.n_first += b.n_first;
            total.n_kl += b.n_kl;
            weight += w;
        }
        if weight > 0.0 {
            total.l_vlb /= weight;
            total.l_rec /= weight;
            total.l_total /= weight;
            total.l_prior /= weight;
        }
        Ok(total)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.model.clone(), Some(self.opt.state.clone()), Some(self.cfg.to_value()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: Option<StepLog>,
    pub best_val_l_vlb: Option<f64>,
    pub best_step: Option<u64>,
}

/// Train until `total_steps`, appending one JSON line per step to `log`.
/// `last.ckpt` is rewritten at every evaluation and at the end; `best.ckpt`
/// keeps the lowest validation `l_vlb`.
pub fn run_training(
    trainer: &mut Trainer,
    train: &[Layout],
    val: &[Layout],
    out_dir: &Path,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    let log_path = out_dir.join("train.log");
    let mut summary = TrainSummary {
        steps: trainer.step_index(),
        last: None,
        best_val_l_vlb: None,
        best_step: None,
    };
    while trainer.step_index() < trainer.cfg.total_steps {
        let entry = trainer.step(train)?;
        let line = serde_json::to_string(&entry).expect("log line serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        summary.last = Some(entry);
        summary.steps = entry.step;
        let at_eval = trainer.cfg.eval_every > 0 && entry.step % trainer.cfg.eval_every == 0;
        if at_eval || entry.step == trainer.cfg.total_steps {
            let ckpt = trainer.checkpoint();
            save_checkpoint(&ckpt, &out_dir.join("last.ckpt"))?;
            if !val.is_empty() {
                let v = trainer.evaluate(val)?.l_vlb;
                if summary.best_val_l_vlb.is_none_or(|b| v < b) {
                    summary.best_val_l_vlb = Some(v);
                    summary.best_step = Some(entry.step);
                    save_checkpoint(&ckpt, &out_dir.join("best.ckpt"))?;
                }
            }
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{CanvasSpec, Element};
    use crate::numerics::grad_check;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            t_max: 4,
            batch_size: 4,
            lr: 1e-3,
            total_steps: 6,
            k_category: 5,
            k_geometry: 5,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 16,
            gamma_end: 0.3,
            beta_end: 0.2,
            sigma_end: 0.2,
            relation_prob: 1.0,
            relation_fraction: 0.5,
            ..TrainConfig::default()
        }
    }

    fn corpus() -> Vec<Layout> {
        (0..6u32)
            .map(|i| {
                Layout::new(
                    CanvasSpec::new(100, 100).unwrap(),
                    vec![
                        Element::precise(i % 5, 0, 0, 4, 1),
                        Element::precise((i + 1) % 5, 1, 2, 2, 2),
                        Element::precise((i + 2) % 5, 3, 3, 1, 1),
                    ],
                )
            })
            .collect()
    }

    #[test]
    fn case_counts_partition_tokens() {
        let t = Trainer::new(tiny_cfg()).unwrap();
        let ex = t.next_examples(&corpus()).unwrap();
        let b = evaluate_examples(&t.model, &ex, &t.stacks, 0.1).unwrap();
        assert_eq!(b.n_tokens(), 4 * 15);
        assert!(b.l_vlb >= -1e-9 && b.l_rec >= -1e-9);
        assert!((b.l_total - (b.l_vlb + 0.1 * b.l_rec)).abs() < 1e-6);
    }

    #[test]
    fn steps_are_deterministic_and_finite() {
        let mut a = Trainer::new(tiny_cfg()).unwrap();
        let mut b = Trainer::new(tiny_cfg()).unwrap();
        for _ in 0..3 {
            let la = a.step(&corpus()).unwrap();
            let lb = b.step(&corpus()).unwrap();
            assert_eq!(la.l_total.to_bits(), lb.l_total.to_bits());
            assert!(la.grad_norm.is_finite() && la.grad_norm > 0.0);
        }
    }

    #[test]
    fn full_denoiser_loss_passes_gradient_check() {
        let cfg = tiny_cfg();
        let t = Trainer::new(cfg.clone()).unwrap();
        let model: Denoiser<f64> = t.model.cast();
        let ex = t.next_examples(&corpus()[..1]).unwrap();
        let ex = &ex[..1];
        let batch = Batch::new(ex.iter().map(|e| &e.corrupted), &model.cfg).unwrap();
        let tg = targets(&ex[0].clean, &ex[0].corrupted, &ex[0].plan, &t.stacks).unwrap();
        let mut params = model.params.clone();
        let report = grad_check(
            |g| loss_on_graph(g, &model, &batch, &tg, &t.stacks, 0.1).unwrap().0,
            &mut params,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error());
    }

    #[test]
    fn resume_from_checkpoint_continues_identically() {
        let corpus = corpus();
        let mut straight = Trainer::new(tiny_cfg()).unwrap();
        for _ in 0..3 {
            straight.step(&corpus).unwrap();
        }
        let ckpt = Checkpoint::from_bytes(&straight.checkpoint().to_bytes().unwrap()).unwrap();
        let mut resumed = Trainer::from_checkpoint(ckpt).unwrap();
        let a = straight.step(&corpus).unwrap();
        let b = resumed.step(&corpus).unwrap();
        assert_eq!(a.step, b.step);
        assert_eq!(a.l_total.to_bits(), b.l_total.to_bits());
        assert_eq!(straight.model.params.get(crate::numerics::ParamId(0)), resumed.model.params.get(crate::numerics::ParamId(0)));
    }

    #[test]
    fn run_writes_log_lines_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny_cfg()).unwrap();
        let mut log = Vec::new();
        let s = run_training(&mut t, &corpus(), &corpus()[..2], dir.path(), &mut log).unwrap();
        assert_eq!(s.steps, 6);
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 6);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["step", "l_vlb", "l_rec", "l_total", "lr"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        assert!(dir.path().join("last.ckpt").exists());
        assert!(dir.path().join("best.ckpt").exists());
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let cfg = TrainConfig::toy();
        assert_eq!(TrainConfig::from_value(&cfg.to_value()).unwrap(), cfg);
        assert!(TrainConfig::from_value(&serde_json::json!({"bogus": 1})).is_err());
        let partial: TrainConfig = serde_json::from_str(r#"{"t_max": 7}"#).unwrap();
        assert_eq!(partial.t_max, 7);
        assert_eq!(partial.lambda, 0.1);
    }
}
