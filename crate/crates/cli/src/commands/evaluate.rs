use std::fs;
use std::io::stderr;
use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Value};

use ldgm_core::ablation::{run_ablation, AblationConfig};
use ldgm_core::data::{Corpus, Split};
use ldgm_core::eval::{evaluate, FeatureExtractor, FeatureTrainConfig, MetricReport, Pairing};
use ldgm_core::layout::{parse_layout_value, Layout, ParseMode, QuantizerConfig, Vocabulary};
use ldgm_core::{Error, Result};

use crate::args::{AblateArgs, EvalArgs, TableFormat};
use crate::{read_config, write_json, write_text, CliError, CliResult, RunHeader};

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalFile {
    /// `source` or `best-same-multiset`.
    pairing: String,
    feature_steps: u64,
    /// Split scored when the input is a corpus directory.
    split: Split,
    /// Geometry bins used to quantize a corpus directory.
    k_geometry: u32,
}

impl Default for EvalFile {
    fn default() -> Self {
        Self {
            pairing: "source".into(),
            feature_steps: FeatureTrainConfig::default().steps,
            split: Split::Test,
            k_geometry: QuantizerConfig::DEFAULT_GEOMETRY_BINS,
        }
    }
}

struct Collections {
    generated: Vec<Layout>,
    reference: Vec<Layout>,
    inputs: Option<Vec<Layout>>,
    quant: QuantizerConfig,
}

/// Generated, reference and input layouts from the output of `generate`.
fn from_generation(path: &Path) -> Result<Collections> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
    let v: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let vocab: Vocabulary = serde_json::from_value(v["vocabulary"].clone()).map_err(|e| bad(format!("vocabulary: {e}")))?;
    let k_geometry = v["k_geometry"].as_u64().ok_or_else(|| bad("missing k_geometry".into()))? as u32;
    let quant = QuantizerConfig::new(vocab.len() as u32, k_geometry)?;
    let results = v["results"].as_array().ok_or_else(|| bad("missing results".into()))?;
    let field = |r: &Value, i: usize, key: &str| -> Result<Layout> {
        parse_layout_value(&r[key], ParseMode::Strict)
            .and_then(|d| d.to_layout(&quant, &vocab))
            .map_err(|e| bad(format!("results[{i}].{key}: {e}")))
    };
    let mut c = Collections { generated: vec![], reference: vec![], inputs: Some(vec![]), quant };
    for (i, r) in results.iter().enumerate() {
        c.generated.push(field(r, i, "output")?);
        c.reference.push(field(r, i, "source")?);
        c.inputs.as_mut().expect("set above").push(field(r, i, "input")?);
    }
    Ok(c)
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> CliResult<Value> {
    let file: EvalFile = read_config(a.config.as_deref())?;
    let pairing = match file.pairing.as_str() {
        "source" => Pairing::Source,
        "best-same-multiset" => Pairing::BestSameMultiset,
        other => return Err(CliError::Usage(format!("unknown pairing `{other}`"))),
    };
    let c = if a.corpus.is_dir() {
        let corpus = Corpus::load(&a.corpus)?;
        let quant = corpus.quantizer(file.k_geometry)?;
        let layouts = corpus.layouts(Some(file.split), &quant)?;
        Collections { generated: layouts.clone(), reference: layouts, inputs: None, quant }
    } else {
        from_generation(&a.corpus)?
    };
    if c.generated.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()).into());
    }
    let fc = FeatureTrainConfig { steps: file.feature_steps, seed: a.seed, ..FeatureTrainConfig::default() };
    let (extractor, accuracy) = FeatureExtractor::train(&c.reference, c.quant, fc)?;
    let report = evaluate(&c.generated, &c.reference, c.inputs.as_deref(), pairing, &extractor, &c.quant)?;
    let header = RunHeader::new("eval", argv, a.seed);
    match a.format {
        TableFormat::Json => write_json(
            &a.out,
            &json!({
                "run": header,
                "source": a.corpus,
                "pairing": file.pairing,
                "feature_accuracy": accuracy,
                "report": report,
            }),
        )?,
        TableFormat::Csv => write_text(&a.out, &report_csv(&header, &report))?,
    }
    Ok(json!({"out": a.out, "report": report}))
}

fn report_csv(header: &RunHeader, r: &MetricReport) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    format!(
        "# run: {}\nmax_iou,fid,alignment,overlap,retention,n_layouts\n{:.6},{:.6},{:.6},{:.6},{},{}\n",
        json!(header),
        r.max_iou,
        r.fid,
        r.alignment,
        r.overlap,
        opt(r.retention),
        r.n_layouts
    )
}

pub fn ablate(a: &AblateArgs, argv: &[String]) -> CliResult<Value> {
    let mut cfg: AblationConfig = read_config(a.config.as_deref())?;
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.task = a.task.unwrap_or(cfg.task);
    let corpus = Corpus::load(&a.corpus)?;
    cfg.train.k_category = corpus.vocabulary().len() as u32;
    cfg.check()?;
    let quant = cfg.train.quantizer()?;
    let train = corpus.layouts(Some(Split::Train), &quant)?;
    let val = corpus.layouts(Some(Split::Val), &quant)?;
    let test = corpus.layouts(Some(Split::Test), &quant)?;
    let table = run_ablation(&cfg, &train, &val, &test, &mut stderr())?;
    let header = RunHeader::new("ablate", argv, cfg.seed);
    match a.format {
        TableFormat::Json => write_json(&a.out, &json!({"run": header, "config": cfg, "table": table}))?,
        TableFormat::Csv => write_text(&a.out, &format!("# run: {}\n{}", json!(header), table.to_csv()))?,
    }
    Ok(json!({"out": a.out, "rows": table.rows.len(), "seconds": table.seconds}))
}
