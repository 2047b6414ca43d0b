use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use ldgm_core::data::{Corpus, Split};
use ldgm_core::denoiser::load_checkpoint;
use ldgm_core::eval::{collection_retention, mean_alignment_overlap, retention};
use ldgm_core::inference::{build_task, decode, DecodeOptions, GenerationRequest, TaskSource, TaskSpec, Trajectory};
use ldgm_core::layout::{Layout, LayoutDoc, QuantizerConfig, Vocabulary};
use ldgm_core::numerics::seeded_rng;
use ldgm_core::Result;
use ldgm_service::LoadedModel;

use crate::args::GenerateArgs;
use crate::{read_config, write_json, CliError, CliResult, RunHeader};

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateFile {
    split: Split,
    /// Use only the first `limit` layouts of the split.
    limit: Option<usize>,
    relation_fraction: f64,
    coarse_std: f64,
}

impl Default for GenerateFile {
    fn default() -> Self {
        let spec = TaskSpec::new(ldgm_core::inference::Task::UGen);
        Self {
            split: Split::Test,
            limit: None,
            relation_fraction: spec.relation_fraction,
            coarse_std: spec.coarse_std,
        }
    }
}

fn doc(l: &Layout, quant: &QuantizerConfig, vocab: &Vocabulary) -> LayoutDoc {
    LayoutDoc::from_layout(l, quant, Some(vocab))
}

fn trajectory_json(t: &Trajectory, quant: &QuantizerConfig, vocab: &Vocabulary) -> Value {
    t.steps
        .iter()
        .map(|s| {
            let committed: Vec<Value> =
                s.committed.iter().map(|(e, k)| json!({"element": e, "attr": k.name()})).collect();
            json!({"step": s.step, "t": s.t, "layout": doc(&s.layout, quant, vocab), "committed": committed})
        })
        .collect()
}

pub fn generate(a: &GenerateArgs, argv: &[String]) -> CliResult<Value> {
    let file: GenerateFile = read_config(a.config.as_deref())?;
    if !(a.temperature >= 0.0 && a.temperature.is_finite()) {
        return Err(CliError::Usage(format!("--temperature must be >= 0, got {}", a.temperature)));
    }
    if a.steps == Some(0) {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let corpus = Corpus::load(&a.corpus)?;
    let vocab = corpus.vocabulary().clone();
    let model = LoadedModel::new(load_checkpoint(&a.checkpoint)?, Some(vocab.clone()))?;
    let quant = *model.quantizer();
    let mut sources = corpus.layouts(Some(file.split), &quant)?;
    if let Some(limit) = file.limit {
        sources.truncate(limit);
    }
    let spec = TaskSpec { task: a.task, relation_fraction: file.relation_fraction, coarse_std: file.coarse_std };
    spec.check()?;
    let steps = a.steps.unwrap_or(model.t_max());

    let results: Vec<(Layout, Layout, Trajectory)> = sources
        .par_iter()
        .enumerate()
        .map(|(i, src)| -> Result<_> {
            let mut rng = seeded_rng(a.seed, &format!("task/{i}"));
            let input = build_task(&TaskSource::Layout(src.clone()), &spec, &quant, &mut rng)?;
            let req = GenerationRequest {
                strategy: a.strategy,
                temperature: a.temperature,
                clamp_conditions: a.clamp,
                ..GenerationRequest::new(input.clone(), steps, a.seed.wrapping_add(i as u64))
            };
            let (out, traj) = decode(&req, model.denoiser(), model.stacks(), DecodeOptions::default())?;
            Ok((input, out, traj))
        })
        .collect::<Result<_>>()?;

    let inputs: Vec<Layout> = results.iter().map(|r| r.0.clone()).collect();
    let outputs: Vec<Layout> = results.iter().map(|r| r.1.clone()).collect();
    let pooled = collection_retention(&inputs, &outputs)?;
    let (alignment, overlap) = if outputs.is_empty() { (0.0, 0.0) } else { mean_alignment_overlap(&outputs, &quant)? };
    let records = sources
        .iter()
        .zip(&results)
        .enumerate()
        .map(|(i, (src, (input, out, traj)))| {
            let mut r = json!({
                "seed": a.seed.wrapping_add(i as u64),
                "source": doc(src, &quant, &vocab),
                "input": doc(input, &quant, &vocab),
                "output": doc(out, &quant, &vocab),
                "retention": retention(input, out)?,
            });
            if a.trajectory {
                r["trajectory"] = trajectory_json(traj, &quant, &vocab);
            }
            Ok(r)
        })
        .collect::<Result<Vec<Value>>>()?;

    let summary = json!({
        "layouts": outputs.len(),
        "retention": pooled,
        "alignment": alignment,
        "overlap": overlap,
    });
    let body = json!({
        "run": RunHeader::new("generate", argv, a.seed),
        "model_version": model.version(),
        "task": a.task.name(),
        "strategy": a.strategy.name(),
        "steps": steps,
        "temperature": a.temperature,
        "clamp": a.clamp,
        "split": file.split,
        "k_category": quant.k_category,
        "k_geometry": quant.k_x,
        "vocabulary": vocab,
        "summary": summary,
        "results": records,
    });
    write_json(&a.out, &body)?;
    Ok(json!({"out": a.out, "summary": summary}))
}
