use serde::Deserialize;
use serde_json::{json, Value};

use ldgm_core::data::{
    ingest as ingest_source, synth_corpus, synth_vocabulary, Corpus, IngestConfig, SynthConfig, VocabPolicy,
    DEFAULT_SPLIT_FRACTIONS,
};
use ldgm_core::layout::{Vocabulary, DEFAULT_N_MAX};

use crate::args::{IngestArgs, SynthArgs};
use crate::{read_config, write_json, CliResult, RunHeader};

fn summary(corpus: &Corpus, out: &std::path::Path) -> Value {
    json!({
        "out": out,
        "layouts": corpus.manifest.total,
        "counts": corpus.manifest.counts,
        "vocabulary": corpus.manifest.vocabulary,
    })
}

pub fn synth_data(a: &SynthArgs, argv: &[String]) -> CliResult<Value> {
    let mut cfg: SynthConfig = read_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.check()?;
    let layouts = synth_corpus(&cfg)?;
    let corpus = Corpus::from_layouts("synthetic", &layouts, &cfg.quantizer()?, &synth_vocabulary(), cfg.seed)?;
    corpus.write(&a.out)?;
    let header = RunHeader::new("synth-data", argv, cfg.seed);
    write_json(&a.out.join("run.json"), &json!({"run": header, "config": cfg}))?;
    Ok(summary(&corpus, &a.out))
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct IngestFile {
    name: Option<String>,
    policy: String,
    vocabulary: Option<Vec<String>>,
    max_n: usize,
    fractions: [f64; 3],
}

impl Default for IngestFile {
    fn default() -> Self {
        Self {
            name: None,
            policy: "all".into(),
            vocabulary: None,
            max_n: DEFAULT_N_MAX,
            fractions: DEFAULT_SPLIT_FRACTIONS,
        }
    }
}

pub fn ingest(a: &IngestArgs, argv: &[String]) -> CliResult<Value> {
    let file: IngestFile = read_config(a.config.as_deref())?;
    let policy = VocabPolicy::parse(&file.policy, file.vocabulary.clone().map(Vocabulary::new))?;
    let name = file.name.clone().unwrap_or_else(|| {
        a.corpus.file_stem().map_or_else(|| "corpus".into(), |s| s.to_string_lossy().into_owned())
    });
    let cfg = IngestConfig {
        max_n: file.max_n,
        split_seed: a.seed.unwrap_or(0),
        fractions: file.fractions,
        ..IngestConfig::new(&name, a.format, policy)
    };
    let corpus = ingest_source(&a.corpus, &cfg)?;
    corpus.write(&a.out)?;
    let header = RunHeader::new("ingest", argv, cfg.split_seed);
    let config = json!({
        "source": a.corpus,
        "format": a.format.name(),
        "policy": cfg.policy.name(),
        "max_n": cfg.max_n,
        "fractions": cfg.fractions,
    });
    write_json(&a.out.join("run.json"), &json!({"run": header, "config": config}))?;
    let mut out = summary(&corpus, &a.out);
    out["dropped_layouts"] = json!(corpus.manifest.dropped_layouts);
    out["dropped_elements"] = json!(corpus.manifest.dropped_elements);
    Ok(out)
}
