//! Path-aware parsing of the layout JSON document.
//!
//! Errors carry a JSONPath-like location (`$.elements[2].status.x`) so clients
//! can point at the offending field.

use serde_json::{Map, Value};

use super::quantize::to_doc;
use super::{
    AttrKind, AttrStatus, CanvasSpec, CategoryRef, ElementDoc, ElementStatusDoc, Layout, LayoutDoc,
    QuantizerConfig, RelationDoc, RelationLabel, Vocabulary,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Unknown object keys are errors.
    Strict,
    /// Unknown object keys are ignored.
    #[default]
    Lenient,
}

pub fn parse_layout(text: &str, mode: ParseMode) -> Result<LayoutDoc> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::parse("$", e.to_string()))?;
    parse_layout_value(&value, mode)
}

pub fn parse_layout_value(value: &Value, mode: ParseMode) -> Result<LayoutDoc> {
    let root = object(value, "$")?;
    check_keys(root, "$", &["canvas", "elements", "relations"], mode)?;

    let canvas_v = root
        .get("canvas")
        .ok_or_else(|| Error::parse("$.canvas", "missing required key"))?;
    let canvas_o = object(canvas_v, "$.canvas")?;
    check_keys(canvas_o, "$.canvas", &["width", "height"], mode)?;
    let width = positive_int(canvas_o.get("width"), "$.canvas.width")?;
    let height = positive_int(canvas_o.get("height"), "$.canvas.height")?;
    let canvas = CanvasSpec { width, height };

    let elements_v = root
        .get("elements")
        .ok_or_else(|| Error::parse("$.elements", "missing required key"))?;
    let elements_a = elements_v
        .as_array()
        .ok_or_else(|| Error::parse("$.elements", "expected an array"))?;
    let elements = elements_a
        .iter()
        .enumerate()
        .map(|(i, v)| parse_element(v, &format!("$.elements[{i}]"), mode))
        .collect::<Result<Vec<_>>>()?;

    let mut relations = Vec::new();
    if let Some(rel_v) = root.get("relations") {
        let rel_a = rel_v
            .as_array()
            .ok_or_else(|| Error::parse("$.relations", "expected an array"))?;
        for (k, r) in rel_a.iter().enumerate() {
            let path = format!("$.relations[{k}]");
            let o = object(r, &path)?;
            check_keys(o, &path, &["i", "j", "label"], mode)?;
            let i = index(o.get("i"), &format!("{path}.i"))?;
            let j = index(o.get("j"), &format!("{path}.j"))?;
            let label_path = format!("{path}.label");
            let label: RelationLabel = o
                .get("label")
                .ok_or_else(|| Error::parse(&label_path, "missing required key"))?
                .as_str()
                .ok_or_else(|| Error::parse(&label_path, "expected a string"))?
                .parse()
                .map_err(|e: String| Error::parse(&label_path, e))?;
            if i >= elements.len() || j >= elements.len() || i == j {
                return Err(Error::parse(
                    &path,
                    format!("relation ({i}, {j}) does not name two distinct elements"),
                ));
            }
            relations.push(RelationDoc { i, j, label });
        }
    }

    Ok(LayoutDoc {
        canvas,
        elements,
        relations,
    })
}

fn parse_element(v: &Value, path: &str, mode: ParseMode) -> Result<ElementDoc> {
    let o = object(v, path)?;
    check_keys(o, path, &["category", "x", "y", "w", "h", "status"], mode)?;

    let cat_path = format!("{path}.category");
    let category = match o.get("category") {
        None => return Err(Error::parse(&cat_path, "missing required key")),
        Some(Value::Null) => None,
        Some(Value::String(s)) => Some(CategoryRef::Name(s.clone())),
        Some(Value::Number(n)) => Some(CategoryRef::Id(
            n.as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .ok_or_else(|| Error::parse(&cat_path, "expected a non-negative integer id"))?,
        )),
        Some(_) => return Err(Error::parse(&cat_path, "expected a string, an integer or null")),
    };

    let mut coords = [None; 4];
    for (slot, kind) in coords.iter_mut().zip(&AttrKind::ALL[1..]) {
        let p = format!("{path}.{kind}");
        *slot = match o.get(kind.name()) {
            None => return Err(Error::parse(&p, "missing required key")),
            Some(Value::Null) => None,
            Some(Value::Number(n)) => Some(
                n.as_f64()
                    .filter(|f| f.is_finite())
                    .ok_or_else(|| Error::parse(&p, "expected a finite number"))?,
            ),
            Some(_) => return Err(Error::parse(&p, "expected a number or null")),
        };
    }

    let status_path = format!("{path}.status");
    let status_o = match o.get("status") {
        None => None,
        Some(s) => {
            let so = object(s, &status_path)?;
            check_keys(so, &status_path, &["category", "x", "y", "w", "h"], mode)?;
            Some(so)
        }
    };
    let mut status = ElementStatusDoc::uniform(AttrStatus::Precise);
    for kind in AttrKind::ALL {
        let has_value = match kind {
            AttrKind::Category => category.is_some(),
            _ => coords[kind.index() - 1].is_some(),
        };
        let p = format!("{status_path}.{kind}");
        let declared = match status_o.and_then(|so| so.get(kind.name())) {
            None => None,
            Some(Value::String(s)) => {
                Some(s.parse::<AttrStatus>().map_err(|e| Error::parse(&p, e))?)
            }
            Some(_) => return Err(Error::parse(&p, "expected a status string")),
        };
        let resolved = match (declared, has_value) {
            (None, true) => AttrStatus::Precise,
            (None, false) => AttrStatus::Missing,
            (Some(AttrStatus::Missing), false) => AttrStatus::Missing,
            (Some(AttrStatus::Missing), true) => {
                return Err(Error::parse(&p, "status is missing but the value is not null"))
            }
            (Some(s), true) => s,
            (Some(s), false) => {
                return Err(Error::parse(
                    &p,
                    format!("status is {} but the value is null", s.name()),
                ))
            }
        };
        status.set(kind, resolved);
    }

    let [x, y, w, h] = coords;
    Ok(ElementDoc {
        category,
        x,
        y,
        w,
        h,
        status,
    })
}

fn object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| Error::parse(path, "expected an object"))
}

fn check_keys(o: &Map<String, Value>, path: &str, allowed: &[&str], mode: ParseMode) -> Result<()> {
    if mode == ParseMode::Strict {
        if let Some(k) = o.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::parse(format!("{path}.{k}"), "unknown field"));
        }
    }
    Ok(())
}

fn positive_int(v: Option<&Value>, path: &str) -> Result<u32> {
    let v = v.ok_or_else(|| Error::parse(path, "missing required key"))?;
    v.as_u64()
        .filter(|&n| n >= 1)
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| Error::parse(path, "expected a positive integer"))
}

fn index(v: Option<&Value>, path: &str) -> Result<usize> {
    let v = v.ok_or_else(|| Error::parse(path, "missing required key"))?;
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| Error::parse(path, "expected a non-negative integer"))
}

/// Serialize a (possibly partial) layout to the JSON document form.
pub fn serialize_layout(layout: &Layout, cfg: &QuantizerConfig, vocab: Option<&Vocabulary>) -> Value {
    serde_json::to_value(to_doc(layout, cfg, vocab)).expect("layout documents always serialize")
}

impl LayoutDoc {
    pub fn to_layout(&self, cfg: &QuantizerConfig, vocab: &Vocabulary) -> Result<Layout> {
        super::quantize(self, cfg, vocab)
    }

    pub fn from_layout(layout: &Layout, cfg: &QuantizerConfig, vocab: Option<&Vocabulary>) -> Self {
        to_doc(layout, cfg, vocab)
    }
}
