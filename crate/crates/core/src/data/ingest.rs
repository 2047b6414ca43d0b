//! Source adapters and the filtering protocol.
//!
//! Adapters:
//!
//! - `json`: a directory of layout documents (or a single document). A
//!   `manifest.json` next to them supplies names for numeric category ids.
//! - `coco`: one file with `images`, `annotations` (`bbox = [x, y, w, h]`) and
//!   `categories`; one layout per image.
//! - `rico`: a directory of view-hierarchy files; the root `bounds`
//!   `[x1, y1, x2, y2]` define the canvas and every descendant carrying a
//!   `componentLabel` becomes an element.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::Value;

use super::{make_splits, Corpus, DatasetManifest, FilterProvenance, CANVAS_CONVENTION, DEFAULT_SPLIT_FRACTIONS, MANIFEST_FILE};
use crate::layout::{
    parse_layout, validate, AttrStatus, CanvasSpec, CategoryRef, ElementDoc, ElementStatusDoc, LayoutDoc, ParseMode,
    QuantizerConfig, RelationDoc, Vocabulary, DEFAULT_N_MAX,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    Json,
    Coco,
    Rico,
}

impl std::str::FromStr for SourceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(SourceFormat::Json),
            "coco" => Ok(SourceFormat::Coco),
            "rico" => Ok(SourceFormat::Rico),
            other => Err(Error::Validation(format!("unknown source format `{other}` (json, coco, rico)"))),
        }
    }
}

impl SourceFormat {
    pub fn name(self) -> &'static str {
        match self {
            SourceFormat::Json => "json",
            SourceFormat::Coco => "coco",
            SourceFormat::Rico => "rico",
        }
    }
}

/// Which categories survive ingestion.
#[derive(Debug, Clone, PartialEq)]
pub enum VocabPolicy {
    /// Keep the `k` most frequent categories and drop other elements.
    TopK(usize),
    /// Keep every category.
    All,
    /// Reject any layout with a category outside the given vocabulary.
    Strict(Vocabulary),
}

impl VocabPolicy {
    /// `rico-13`, `top-<k>`, `all`, or `strict` (which needs a vocabulary).
    pub fn parse(name: &str, vocabulary: Option<Vocabulary>) -> Result<Self> {
        match name {
            "rico-13" => Ok(VocabPolicy::TopK(13)),
            "all" => Ok(VocabPolicy::All),
            "strict" => vocabulary
                .filter(|v| !v.is_empty())
                .map(VocabPolicy::Strict)
                .ok_or_else(|| Error::Validation("the strict policy needs a vocabulary".into())),
            other => other
                .strip_prefix("top-")
                .and_then(|k| k.parse().ok())
                .filter(|&k: &usize| k > 0)
                .map(VocabPolicy::TopK)
                .ok_or_else(|| Error::Validation(format!("unknown vocabulary policy `{other}`"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            VocabPolicy::TopK(13) => "rico-13".into(),
            VocabPolicy::TopK(k) => format!("top-{k}"),
            VocabPolicy::All => "all".into(),
            VocabPolicy::Strict(_) => "strict".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestConfig {
    pub name: String,
    pub format: SourceFormat,
    pub policy: VocabPolicy,
    pub max_n: usize,
    pub split_seed: u64,
    pub fractions: [f64; 3],
}

impl IngestConfig {
    pub fn new(name: &str, format: SourceFormat, policy: VocabPolicy) -> Self {
        Self {
            name: name.to_string(),
            format,
            policy,
            max_n: DEFAULT_N_MAX,
            split_seed: 0,
            fractions: DEFAULT_SPLIT_FRACTIONS,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn data_err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {message}", path.display()))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| data_err(path, e))
}

/// The `*.json` files of a directory in name order, without the manifest.
fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let is_json = path.extension().is_some_and(|e| e == "json");
        let is_manifest = path.file_name().is_some_and(|n| n == MANIFEST_FILE);
        if path.is_file() && is_json && !is_manifest {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn precise_element(category: String, x: f64, y: f64, w: f64, h: f64) -> ElementDoc {
    ElementDoc {
        category: Some(CategoryRef::Name(category)),
        x: Some(x),
        y: Some(y),
        w: Some(w),
        h: Some(h),
        status: ElementStatusDoc::uniform(AttrStatus::Precise),
    }
}

fn canvas_of(path: &Path, w: f64, h: f64) -> Result<CanvasSpec> {
    if !(w.is_finite() && h.is_finite()) {
        return Err(data_err(path, "non-finite canvas size"));
    }
    CanvasSpec::new(w.round().max(0.0) as u32, h.round().max(0.0) as u32).map_err(|e| data_err(path, e))
}

fn read_json_source(path: &Path) -> Result<Vec<LayoutDoc>> {
    let (files, vocab) = if path.is_dir() {
        let manifest = path.join(MANIFEST_FILE);
        let vocab = if manifest.is_file() {
            let m: DatasetManifest = serde_json::from_value(read_json(&manifest)?).map_err(|e| data_err(&manifest, e))?;
            Some(m.vocabulary)
        } else {
            None
        };
        (json_files(path)?, vocab)
    } else {
        (vec![path.to_path_buf()], None)
    };
    files
        .par_iter()
        .map(|f| {
            let text = fs::read_to_string(f).map_err(io_err(f))?;
            let mut doc = parse_layout(&text, ParseMode::Lenient).map_err(|e| data_err(f, e))?;
            for e in &mut doc.elements {
                if let Some(CategoryRef::Id(id)) = e.category {
                    let name = vocab.as_ref().and_then(|v| v.name(id)).map_or_else(|| id.to_string(), str::to_string);
                    e.category = Some(CategoryRef::Name(name));
                }
            }
            Ok(doc)
        })
        .collect()
}

fn read_coco_source(path: &Path) -> Result<Vec<LayoutDoc>> {
    let root = read_json(path)?;
    let array = |key: &str| {
        root.get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| data_err(path, format!("missing array `{key}`")))
    };
    let num = |v: &Value, key: &str| v.get(key).and_then(Value::as_f64).ok_or_else(|| data_err(path, format!("missing number `{key}`")));
    let id_of = |v: &Value, key: &str| {
        v.get(key)
            .and_then(|x| x.as_u64().map(|n| n.to_string()).or_else(|| x.as_str().map(str::to_string)))
            .ok_or_else(|| data_err(path, format!("missing id `{key}`")))
    };
    let mut names = HashMap::new();
    for c in array("categories")? {
        let name = c.get("name").and_then(Value::as_str).ok_or_else(|| data_err(path, "category without a name"))?;
        names.insert(id_of(c, "id")?, name.to_string());
    }
    let mut by_image: HashMap<String, Vec<ElementDoc>> = HashMap::new();
    for a in array("annotations")? {
        let bbox = a
            .get("bbox")
            .and_then(Value::as_array)
            .filter(|b| b.len() == 4)
            .and_then(|b| b.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
            .ok_or_else(|| data_err(path, "annotation bbox must be four numbers"))?;
        let cat = id_of(a, "category_id")?;
        let name = names.get(&cat).cloned().unwrap_or(cat);
        by_image
            .entry(id_of(a, "image_id")?)
            .or_default()
            .push(precise_element(name, bbox[0], bbox[1], bbox[2], bbox[3]));
    }
    array("images")?
        .iter()
        .map(|img| {
            Ok(LayoutDoc {
                canvas: canvas_of(path, num(img, "width")?, num(img, "height")?)?,
                elements: by_image.remove(&id_of(img, "id")?).unwrap_or_default(),
                relations: Vec::new(),
            })
        })
        .collect()
}

fn rico_bounds(node: &Value) -> Option<[f64; 4]> {
    let b = node.get("bounds")?.as_array()?;
    if b.len() != 4 {
        return None;
    }
    Some([b[0].as_f64()?, b[1].as_f64()?, b[2].as_f64()?, b[3].as_f64()?])
}

fn rico_walk(node: &Value, origin: [f64; 2], out: &mut Vec<ElementDoc>) {
    if let (Some(label), Some([x1, y1, x2, y2])) = (node.get("componentLabel").and_then(Value::as_str), rico_bounds(node)) {
        out.push(precise_element(label.to_string(), x1 - origin[0], y1 - origin[1], x2 - x1, y2 - y1));
    }
    if let Some(children) = node.get("children").and_then(Value::as_array) {
        for c in children {
            rico_walk(c, origin, out);
        }
    }
}

fn read_rico_file(path: &Path) -> Result<LayoutDoc> {
    let root = read_json(path)?;
    let [x1, y1, x2, y2] = rico_bounds(&root).ok_or_else(|| data_err(path, "root node has no bounds"))?;
    let mut elements = Vec::new();
    if let Some(children) = root.get("children").and_then(Value::as_array) {
        for c in children {
            rico_walk(c, [x1, y1], &mut elements);
        }
    }
    Ok(LayoutDoc {
        canvas: canvas_of(path, x2 - x1, y2 - y1)?,
        elements,
        relations: Vec::new(),
    })
}

fn read_source(path: &Path, format: SourceFormat) -> Result<Vec<LayoutDoc>> {
    match format {
        SourceFormat::Json => read_json_source(path),
        SourceFormat::Coco => read_coco_source(path),
        SourceFormat::Rico => {
            let files = if path.is_dir() { json_files(path)? } else { vec![path.to_path_buf()] };
            files.par_iter().map(|f| read_rico_file(f)).collect()
        }
    }
}

fn category_name(e: &ElementDoc) -> Option<&str> {
    match &e.category {
        Some(CategoryRef::Name(n)) => Some(n),
        _ => None,
    }
}

fn is_clean(e: &ElementDoc) -> bool {
    let coords = [e.x, e.y, e.w, e.h];
    category_name(e).is_some()
        && coords.iter().all(|c| c.is_some_and(f64::is_finite))
        && e.w.is_some_and(|w| w >= 0.0)
        && e.h.is_some_and(|h| h >= 0.0)
        && e.status == ElementStatusDoc::uniform(AttrStatus::Precise)
}

fn bump(map: &mut BTreeMap<String, usize>, reason: &str, n: usize) {
    if n > 0 {
        *map.entry(reason.to_string()).or_default() += n;
    }
}

/// Names sorted by descending count, ties by name.
fn by_frequency(counts: &BTreeMap<String, usize>) -> Vec<String> {
    let mut names: Vec<(&String, &usize)> = counts.iter().collect();
    names.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    names.into_iter().map(|(n, _)| n.clone()).collect()
}

/// Read a source, filter it and split it.
pub fn ingest(path: &Path, cfg: &IngestConfig) -> Result<Corpus> {
    let raw = read_source(path, cfg.format)?;
    let mut dropped_layouts = BTreeMap::new();
    let mut dropped_elements = BTreeMap::new();

    let mut candidates = Vec::with_capacity(raw.len());
    let mut frequency: BTreeMap<String, usize> = BTreeMap::new();
    for doc in raw {
        if !doc.elements.iter().all(is_clean) {
            bump(&mut dropped_layouts, "incomplete", 1);
            continue;
        }
        for e in &doc.elements {
            *frequency.entry(category_name(e).unwrap().to_string()).or_default() += 1;
        }
        candidates.push(doc);
    }

    let allowed: Vec<String> = match &cfg.policy {
        VocabPolicy::TopK(k) => by_frequency(&frequency).into_iter().take(*k).collect(),
        VocabPolicy::All => by_frequency(&frequency),
        VocabPolicy::Strict(v) => v.names().to_vec(),
    };
    let strict = matches!(cfg.policy, VocabPolicy::Strict(_));

    let mut kept = Vec::with_capacity(candidates.len());
    let mut surviving: BTreeMap<String, usize> = BTreeMap::new();
    for doc in candidates {
        let keep: Vec<bool> = doc.elements.iter().map(|e| allowed.iter().any(|a| Some(a.as_str()) == category_name(e))).collect();
        let removed = keep.iter().filter(|k| !**k).count();
        if strict && removed > 0 {
            bump(&mut dropped_layouts, "out-of-vocabulary", 1);
            continue;
        }
        let mut index = vec![None; doc.elements.len()];
        let mut elements = Vec::with_capacity(doc.elements.len() - removed);
        for (i, e) in doc.elements.into_iter().enumerate() {
            if keep[i] {
                index[i] = Some(elements.len());
                elements.push(e);
            }
        }
        if elements.is_empty() {
            bump(&mut dropped_elements, "out-of-vocabulary", removed);
            bump(&mut dropped_layouts, "empty", 1);
            continue;
        }
        if elements.len() > cfg.max_n {
            bump(&mut dropped_layouts, "max-n", 1);
            continue;
        }
        bump(&mut dropped_elements, "out-of-vocabulary", removed);
        let relations = doc
            .relations
            .iter()
            .filter_map(|r| match (index.get(r.i).copied().flatten(), index.get(r.j).copied().flatten()) {
                (Some(i), Some(j)) if i != j => Some(RelationDoc { i, j, label: r.label }),
                _ => None,
            })
            .collect();
        for e in &elements {
            *surviving.entry(category_name(e).unwrap().to_string()).or_default() += 1;
        }
        kept.push(LayoutDoc { canvas: doc.canvas, elements, relations });
    }

    let vocabulary = match &cfg.policy {
        VocabPolicy::Strict(v) => v.clone(),
        _ => Vocabulary::new(by_frequency(&surviving)),
    };
    if kept.is_empty() || vocabulary.is_empty() {
        return Err(Error::Data(format!("no layout of {} survives filtering", path.display())));
    }
    let quant = QuantizerConfig::new(vocabulary.len().max(2) as u32, QuantizerConfig::DEFAULT_GEOMETRY_BINS)?;
    let mut docs = Vec::with_capacity(kept.len());
    for doc in kept {
        let valid = doc
            .to_layout(&quant, &vocabulary)
            .is_ok_and(|l| validate(&l, &quant, cfg.max_n).is_valid());
        if valid {
            docs.push(doc);
        } else {
            bump(&mut dropped_layouts, "invalid", 1);
        }
    }
    if docs.is_empty() {
        return Err(Error::Data(format!("no layout of {} survives filtering", path.display())));
    }

    let splits = make_splits(docs.len(), cfg.fractions, cfg.split_seed)?;
    let manifest = DatasetManifest {
        name: cfg.name.clone(),
        source_format: cfg.format.name().into(),
        vocabulary: vocabulary.clone(),
        canvas_convention: CANVAS_CONVENTION.into(),
        total: docs.len(),
        counts: splits.counts(),
        splits,
        split_seed: cfg.split_seed,
        filter: FilterProvenance {
            policy: cfg.policy.name(),
            categories_kept: vocabulary.names().to_vec(),
            max_n: cfg.max_n,
        },
        dropped_layouts,
        dropped_elements,
    };
    Ok(Corpus { manifest, docs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn element(cat: &str, i: usize) -> Value {
        json!({"category": cat, "x": i as f64, "y": 2.0 * i as f64, "w": 10.0, "h": 5.0})
    }

    fn write_layout(dir: &Path, name: &str, cats: &[&str]) {
        let elements: Vec<Value> = cats.iter().enumerate().map(|(i, c)| element(c, i)).collect();
        let doc = json!({"canvas": {"width": 100, "height": 200}, "elements": elements});
        fs::write(dir.join(name), doc.to_string()).unwrap();
    }

    #[test]
    fn oversized_layouts_are_dropped_as_max_n() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..4 {
            write_layout(dir.path(), &format!("{i}.json"), &["a", "b"]);
        }
        write_layout(dir.path(), "big.json", &["a"; 26]);
        let c = ingest(dir.path(), &IngestConfig::new("t", SourceFormat::Json, VocabPolicy::All)).unwrap();
        assert_eq!(c.manifest.total, 4);
        assert_eq!(c.manifest.dropped_layouts.get("max-n"), Some(&1));
    }

    #[test]
    fn rare_categories_are_removed_under_top_k() {
        let dir = tempfile::tempdir().unwrap();
        write_layout(dir.path(), "0.json", &["a", "b", "rare"]);
        write_layout(dir.path(), "1.json", &["a", "b"]);
        write_layout(dir.path(), "2.json", &["a"]);
        write_layout(dir.path(), "3.json", &["rare"]);
        let c = ingest(dir.path(), &IngestConfig::new("t", SourceFormat::Json, VocabPolicy::TopK(2))).unwrap();
        assert_eq!(c.manifest.vocabulary.names(), ["a", "b"]);
        assert_eq!(c.docs[0].elements.len(), 2);
        assert_eq!(c.manifest.total, 3);
        assert_eq!(c.manifest.dropped_elements.get("out-of-vocabulary"), Some(&2));
        assert_eq!(c.manifest.dropped_layouts.get("empty"), Some(&1));
    }

    #[test]
    fn strict_policy_rejects_whole_layouts() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write_layout(dir.path(), &format!("{i}.json"), &["a"]);
        }
        write_layout(dir.path(), "x.json", &["a", "z"]);
        let policy = VocabPolicy::parse("strict", Some(Vocabulary::new(vec!["a".into()]))).unwrap();
        let c = ingest(dir.path(), &IngestConfig::new("t", SourceFormat::Json, policy)).unwrap();
        assert_eq!(c.manifest.total, 3);
        assert_eq!(c.manifest.dropped_layouts.get("out-of-vocabulary"), Some(&1));
    }

    #[test]
    fn clean_corpus_counts_equal_file_counts() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..11 {
            write_layout(dir.path(), &format!("{i:02}.json"), &["a", "b"]);
        }
        let c = ingest(dir.path(), &IngestConfig::new("t", SourceFormat::Json, VocabPolicy::All)).unwrap();
        assert_eq!(c.manifest.total, 11);
        assert_eq!(c.manifest.counts.total(), 11);
        assert!(c.manifest.dropped_layouts.is_empty());
    }

    #[test]
    fn nothing_surviving_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_layout(dir.path(), "big.json", &["a"; 30]);
        let err = ingest(dir.path(), &IngestConfig::new("t", SourceFormat::Json, VocabPolicy::All)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(matches!(
            ingest(&dir.path().join("missing"), &IngestConfig::new("t", SourceFormat::Json, VocabPolicy::All)),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn ingesting_an_ingested_corpus_is_the_identity() {
        let dir = tempfile::tempdir().unwrap();
        let coco = json!({
            "images": (0..8).map(|i| json!({"id": i, "width": 320, "height": 480})).collect::<Vec<_>>(),
            "categories": [{"id": 1, "name": "text"}, {"id": 2, "name": "image"}, {"id": 3, "name": "rare"}],
            "annotations": (0..8).flat_map(|i| {
                let mut v = vec![
                    json!({"image_id": i, "category_id": 1, "bbox": [10.5, 20.25, 100.0, 30.0]}),
                    json!({"image_id": i, "category_id": 2, "bbox": [0.0, 100.0, 320.0, 2.0 * i as f64 + 50.0]}),
                ];
                if i % 3 == 0 {
                    v.push(json!({"image_id": i, "category_id": 3, "bbox": [1.0, 1.0, 1.0, 1.0]}));
                }
                v
            }).collect::<Vec<_>>(),
        });
        let src = dir.path().join("coco.json");
        fs::write(&src, coco.to_string()).unwrap();
        let first = ingest(&src, &IngestConfig::new("t", SourceFormat::Coco, VocabPolicy::TopK(2))).unwrap();
        assert_eq!(first.manifest.total, 8);
        let out = dir.path().join("corpus");
        first.write(&out).unwrap();
        let second = ingest(&out, &IngestConfig::new("t", SourceFormat::Json, VocabPolicy::TopK(2))).unwrap();
        assert_eq!(second.docs, first.docs);
        assert_eq!(second.manifest.vocabulary, first.manifest.vocabulary);
        assert_eq!(second.manifest.splits, first.manifest.splits);
        assert!(second.manifest.dropped_layouts.is_empty() && second.manifest.dropped_elements.is_empty());
    }

    #[test]
    fn rico_hierarchies_become_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let screen = json!({
            "bounds": [0, 0, 1440, 2560],
            "children": [{
                "bounds": [0, 0, 1440, 200],
                "componentLabel": "Toolbar",
                "children": [{"bounds": [20, 40, 140, 160], "componentLabel": "Icon"}]
            }, {"bounds": [0, 200, 1440, 2560]}]
        });
        for i in 0..3 {
            fs::write(dir.path().join(format!("{i}.json")), screen.to_string()).unwrap();
        }
        let c = ingest(dir.path(), &IngestConfig::new("t", SourceFormat::Rico, VocabPolicy::TopK(13))).unwrap();
        assert_eq!(c.docs[0].canvas, CanvasSpec::new(1440, 2560).unwrap());
        assert_eq!(c.docs[0].elements.len(), 2);
        assert_eq!(c.docs[0].elements[1].w, Some(120.0));
        assert_eq!(c.manifest.filter.policy, "rico-13");
    }

    #[test]
    fn policy_names_parse() {
        assert_eq!(VocabPolicy::parse("rico-13", None).unwrap(), VocabPolicy::TopK(13));
        assert_eq!(VocabPolicy::parse("top-5", None).unwrap(), VocabPolicy::TopK(5));
        assert!(VocabPolicy::parse("strict", None).is_err());
        assert!(VocabPolicy::parse("top-0", None).is_err());
    }
}
