//! Corpora: ingestion with vocabulary and size filtering, deterministic
//! splits, on-disk corpus directories and the synthetic generator.

mod ingest;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::layout::{parse_layout, Layout, LayoutDoc, ParseMode, QuantizerConfig, Vocabulary, DEFAULT_N_MAX};
use crate::numerics::seeded_rng;
use crate::{Error, Result};

pub use ingest::{ingest, IngestConfig, SourceFormat, VocabPolicy};
pub use synth::{synth_canvas, synth_corpus, synth_layout, synth_vocabulary, SynthConfig, SYNTH_CATEGORIES};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_SPLIT_FRACTIONS: [f64; 3] = [0.85, 0.05, 0.10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

/// Layout indices per split, each sorted ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Shuffle `0..n` with the seed and cut it by `fractions`.
pub fn make_splits(n: usize, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if n < 3 {
        return Err(Error::Data(format!("a corpus of {n} layouts cannot be split")));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, "splits"));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(Splits {
        train: sorted(&order[..n_train]),
        val: sorted(&order[n_train..n_train + n_val]),
        test: sorted(&order[n_train + n_val..]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterProvenance {
    pub policy: String,
    pub categories_kept: Vec<String>,
    pub max_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub source_format: String,
    pub vocabulary: Vocabulary,
    pub canvas_convention: String,
    pub total: usize,
    pub counts: SplitCounts,
    pub splits: Splits,
    pub split_seed: u64,
    pub filter: FilterProvenance,
    pub dropped_layouts: BTreeMap<String, usize>,
    pub dropped_elements: BTreeMap<String, usize>,
}

pub const CANVAS_CONVENTION: &str =
    "per-layout canvas in source units; x, y is the top-left corner; w, h are extents";

impl DatasetManifest {
    pub fn check(&self) -> Result<()> {
        if self.counts.total() != self.total || self.splits.counts() != self.counts {
            return Err(Error::Data(format!(
                "manifest split counts {:?} do not add up to {}",
                self.counts, self.total
            )));
        }
        let mut seen = vec![false; self.total];
        for &i in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if i >= self.total || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("split index {i} is out of range or repeated")));
            }
        }
        Ok(())
    }
}

/// An in-memory corpus: layout documents plus their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub docs: Vec<LayoutDoc>,
}

pub fn layout_file_name(i: usize) -> String {
    format!("{i:06}.json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

impl Corpus {
    /// A corpus of already-quantized layouts, as produced by the generator.
    pub fn from_layouts(
        name: &str,
        layouts: &[Layout],
        quant: &QuantizerConfig,
        vocab: &Vocabulary,
        split_seed: u64,
    ) -> Result<Self> {
        let docs: Vec<LayoutDoc> = layouts.iter().map(|l| LayoutDoc::from_layout(l, quant, Some(vocab))).collect();
        let splits = make_splits(docs.len(), DEFAULT_SPLIT_FRACTIONS, split_seed)?;
        let max_n = layouts.iter().map(Layout::len).max().unwrap_or(0);
        let manifest = DatasetManifest {
            name: name.to_string(),
            source_format: "synthetic".into(),
            vocabulary: vocab.clone(),
            canvas_convention: CANVAS_CONVENTION.into(),
            total: docs.len(),
            counts: splits.counts(),
            splits,
            split_seed,
            filter: FilterProvenance {
                policy: "all".into(),
                categories_kept: vocab.names().to_vec(),
                max_n: max_n.max(DEFAULT_N_MAX),
            },
            dropped_layouts: BTreeMap::new(),
            dropped_elements: BTreeMap::new(),
        };
        Ok(Self { manifest, docs })
    }

    /// Write one JSON file per layout plus the manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.manifest.check()?;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (i, doc) in self.docs.iter().enumerate() {
            let path = dir.join(layout_file_name(i));
            let text = serde_json::to_string_pretty(doc).expect("layout documents serialize");
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifests serialize");
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        manifest.check()?;
        let docs = (0..manifest.total)
            .map(|i| {
                let path = dir.join(layout_file_name(i));
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                parse_layout(&text, ParseMode::Strict).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, docs })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.manifest.vocabulary
    }

    pub fn quantizer(&self, k_geometry: u32) -> Result<QuantizerConfig> {
        QuantizerConfig::new(self.manifest.vocabulary.len() as u32, k_geometry)
    }

    /// Quantize every layout of a split; `None` takes the whole corpus.
    pub fn layouts(&self, split: Option<Split>, quant: &QuantizerConfig) -> Result<Vec<Layout>> {
        let vocab = &self.manifest.vocabulary;
        let to_layout = |i: usize| self.docs[i].to_layout(quant, vocab);
        match split {
            Some(s) => self.manifest.splits.get(s).iter().map(|&i| to_layout(i)).collect(),
            None => (0..self.docs.len()).map(to_layout).collect(),
        }
    }
}
