use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};

use ldgm_core::data::{Corpus, Split};
use ldgm_core::denoiser::load_checkpoint;
use ldgm_core::diffusion::{corrupt as corrupt_sequence, plan_corruption};
use ldgm_core::layout::{detokenize, tokenize, AttrStatus, LayoutDoc};
use ldgm_core::numerics::seeded_rng;
use ldgm_core::training::{run_training, TrainConfig, Trainer};
use ldgm_core::Error;

use crate::args::{CorruptArgs, TrainArgs};
use crate::{write_json, CliResult, RunHeader};

/// Training settings from `path`, or the toy configuration.
pub(crate) fn train_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    match path {
        Some(p) => crate::read_config(Some(p)),
        None => Ok(TrainConfig::toy()),
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub fn train(a: &TrainArgs, argv: &[String]) -> CliResult<Value> {
    let corpus = Corpus::load(&a.corpus)?;
    let mut trainer = match &a.checkpoint {
        Some(path) => Trainer::from_checkpoint(load_checkpoint(path)?)?,
        None => {
            let mut cfg = train_config(a.config.as_deref())?;
            cfg.k_category = corpus.vocabulary().len() as u32;
            cfg.strategy = a.strategy.unwrap_or(cfg.strategy);
            cfg.level = a.level.unwrap_or(cfg.level);
            cfg.noise.geometry = a.noise.unwrap_or(cfg.noise.geometry);
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            Trainer::new(cfg)?
        }
    };
    if let Some(steps) = a.steps {
        trainer.cfg.total_steps = steps;
    }
    let quant = trainer.cfg.quantizer()?;
    let train = corpus.layouts(Some(Split::Train), &quant)?;
    let val = corpus.layouts(Some(Split::Val), &quant)?;
    if train.is_empty() {
        return Err(Error::Data("the corpus has no training layouts".into()).into());
    }

    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    let header = RunHeader::new("train", argv, trainer.cfg.seed);
    write_json(&a.out.join("run.json"), &json!({"run": header, "config": trainer.cfg}))?;
    let log_path = a.out.join("train.log");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io(&log_path))?);
    writeln!(log, "{}", json!({"run": header})).map_err(io(&log_path))?;
    let summary = run_training(&mut trainer, &train, &val, &a.out, &mut log)?;
    Ok(json!({
        "out": a.out,
        "steps": summary.steps,
        "last": summary.last,
        "best_val_l_vlb": summary.best_val_l_vlb,
        "best_step": summary.best_step,
    }))
}

pub fn corrupt(a: &CorruptArgs, argv: &[String]) -> CliResult<Value> {
    let corpus = Corpus::load(&a.corpus)?;
    let mut cfg = train_config(a.config.as_deref())?;
    cfg.k_category = corpus.vocabulary().len() as u32;
    cfg.strategy = a.strategy.unwrap_or(cfg.strategy);
    cfg.level = a.level.unwrap_or(cfg.level);
    cfg.noise.geometry = a.noise.unwrap_or(cfg.noise.geometry);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.check()?;
    let quant = cfg.quantizer()?;
    let stacks = cfg.stacks()?;
    let vocab = corpus.vocabulary();

    let mut records = Vec::with_capacity(corpus.docs.len());
    let mut masked = 0usize;
    let mut changed = 0usize;
    let mut total = 0usize;
    for (i, layout) in corpus.layouts(None, &quant)?.iter().enumerate() {
        let mut rng = seeded_rng(cfg.seed, &format!("corrupt/{i}"));
        let seq = tokenize(layout, &quant);
        let plan = plan_corruption(&seq, cfg.strategy, cfg.level, cfg.select_prob, cfg.t_max, &mut rng);
        let noisy = corrupt_sequence(&seq, &plan, &stacks, &mut rng)?;
        let statuses: Vec<AttrStatus> = seq
            .tokens
            .iter()
            .zip(&noisy.tokens)
            .map(|(a, b)| if a.value == b.value { AttrStatus::Precise } else { AttrStatus::Coarse })
            .collect();
        for (a, b) in seq.tokens.iter().zip(&noisy.tokens) {
            total += 1;
            if b.value == quant.mask(b.kind) {
                masked += 1;
            } else if a.value != b.value {
                changed += 1;
            }
        }
        let out = detokenize(&noisy, &statuses, layout.canvas, &quant)?;
        records.push(json!({
            "source": LayoutDoc::from_layout(layout, &quant, Some(vocab)),
            "corrupted": LayoutDoc::from_layout(&out, &quant, Some(vocab)),
            "plan": plan.entries,
        }));
    }
    let header = RunHeader::new("corrupt", argv, cfg.seed);
    let body = json!({
        "run": header,
        "strategy": cfg.strategy.name(),
        "level": cfg.level.name(),
        "noise": cfg.noise,
        "t_max": cfg.t_max,
        "k_geometry": cfg.k_geometry,
        "vocabulary": vocab,
        "layouts": records,
    });
    write_json(&a.out, &body)?;
    Ok(json!({
        "out": a.out,
        "layouts": corpus.docs.len(),
        "masked_fraction": masked as f64 / total.max(1) as f64,
        "changed_fraction": changed as f64 / total.max(1) as f64,
    }))
}
