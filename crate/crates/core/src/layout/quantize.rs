use serde::{Deserialize, Serialize};

use super::{
    AttrKind, AttrStatus, AttrValue, CanvasSpec, Element, Layout, QuantizerConfig, RelationLabel,
    RelationMap, Vocabulary,
};
use crate::{Error, Result};

/// A category given either by vocabulary name or by numeric id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CategoryRef {
    Id(u32),
    Name(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementStatusDoc {
    pub category: AttrStatus,
    pub x: AttrStatus,
    pub y: AttrStatus,
    pub w: AttrStatus,
    pub h: AttrStatus,
}

impl ElementStatusDoc {
    pub fn uniform(status: AttrStatus) -> Self {
        Self {
            category: status,
            x: status,
            y: status,
            w: status,
            h: status,
        }
    }

    pub fn get(&self, kind: AttrKind) -> AttrStatus {
        match kind {
            AttrKind::Category => self.category,
            AttrKind::X => self.x,
            AttrKind::Y => self.y,
            AttrKind::W => self.w,
            AttrKind::H => self.h,
        }
    }

    pub fn set(&mut self, kind: AttrKind, status: AttrStatus) {
        match kind {
            AttrKind::Category => self.category = status,
            AttrKind::X => self.x = status,
            AttrKind::Y => self.y = status,
            AttrKind::W => self.w = status,
            AttrKind::H => self.h = status,
        }
    }
}

/// An element with continuous coordinates in canvas device units.
/// `(x, y)` is the top-left corner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementDoc {
    pub category: Option<CategoryRef>,
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub w: Option<f64>,
    pub h: Option<f64>,
    pub status: ElementStatusDoc,
}

impl ElementDoc {
    pub fn coord(&self, kind: AttrKind) -> Option<f64> {
        match kind {
            AttrKind::Category => None,
            AttrKind::X => self.x,
            AttrKind::Y => self.y,
            AttrKind::W => self.w,
            AttrKind::H => self.h,
        }
    }

    pub fn set_coord(&mut self, kind: AttrKind, v: Option<f64>) {
        match kind {
            AttrKind::Category => {}
            AttrKind::X => self.x = v,
            AttrKind::Y => self.y = v,
            AttrKind::W => self.w = v,
            AttrKind::H => self.h = v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationDoc {
    pub i: usize,
    pub j: usize,
    pub label: RelationLabel,
}

/// The continuous-coordinate layout document; this is the JSON interchange form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutDoc {
    pub canvas: CanvasSpec,
    pub elements: Vec<ElementDoc>,
    #[serde(default)]
    pub relations: Vec<RelationDoc>,
}

/// Round-half-up of `v / extent * (k - 1)`, clamped into `[0, k - 1]`.
pub(crate) fn quantize_coord(v: f64, extent: f64, k: u32) -> u32 {
    let scaled = v / extent * (k - 1) as f64;
    let bin = (scaled + 0.5).floor();
    bin.clamp(0.0, (k - 1) as f64) as u32
}

pub(crate) fn dequantize_coord(bin: u32, extent: f64, k: u32) -> f64 {
    bin as f64 / (k - 1) as f64 * extent
}

/// Quantize a continuous layout document.
pub fn quantize(doc: &LayoutDoc, cfg: &QuantizerConfig, vocab: &Vocabulary) -> Result<Layout> {
    let canvas = CanvasSpec::new(doc.canvas.width, doc.canvas.height)?;
    let mut elements = Vec::with_capacity(doc.elements.len());
    for (idx, e) in doc.elements.iter().enumerate() {
        let mut attrs = [AttrValue::missing(); 5];
        let cat_status = e.status.category;
        attrs[0] = match (&e.category, cat_status) {
            (None, AttrStatus::Missing) => AttrValue::missing(),
            (None, s) => {
                return Err(Error::Validation(format!(
                    "element {idx}: category is null but status is {}",
                    s.name()
                )))
            }
            (Some(_), AttrStatus::Missing) => {
                return Err(Error::Validation(format!(
                    "element {idx}: category has a value but status is missing"
                )))
            }
            (Some(c), status) => {
                let id = match c {
                    CategoryRef::Name(name) => vocab
                        .id(name)
                        .ok_or_else(|| Error::Vocabulary(name.clone()))?,
                    CategoryRef::Id(id) => *id,
                };
                if id >= cfg.k_category {
                    return Err(Error::Vocabulary(format!("category id {id}")));
                }
                AttrValue {
                    bin: Some(id),
                    status,
                }
            }
        };
        for kind in &AttrKind::ALL[1..] {
            let status = e.status.get(*kind);
            let value = e.coord(*kind);
            attrs[kind.index()] = match (value, status) {
                (None, AttrStatus::Missing) => AttrValue::missing(),
                (None, s) => {
                    return Err(Error::Validation(format!(
                        "element {idx}: {kind} is null but status is {}",
                        s.name()
                    )))
                }
                (Some(_), AttrStatus::Missing) => {
                    return Err(Error::Validation(format!(
                        "element {idx}: {kind} has a value but status is missing"
                    )))
                }
                (Some(v), status) => {
                    if !v.is_finite() {
                        return Err(Error::Validation(format!(
                            "element {idx}: {kind} is not finite"
                        )));
                    }
                    if matches!(kind, AttrKind::W | AttrKind::H) && v < 0.0 {
                        return Err(Error::Validation(format!(
                            "element {idx}: negative {kind} {v}"
                        )));
                    }
                    let bin = quantize_coord(v, canvas.extent(*kind), cfg.bins(*kind));
                    AttrValue {
                        bin: Some(bin),
                        status,
                    }
                }
            };
        }
        elements.push(Element { attrs });
    }
    let mut relations = RelationMap::new();
    for r in &doc.relations {
        if r.label != RelationLabel::Unavailable {
            relations.insert((r.i, r.j), r.label);
        }
    }
    Ok(Layout {
        canvas,
        elements,
        relations,
    })
}

/// Convert a layout to its document form; missing attributes become `null`.
pub(crate) fn to_doc(layout: &Layout, cfg: &QuantizerConfig, vocab: Option<&Vocabulary>) -> LayoutDoc {
    let elements = layout
        .elements
        .iter()
        .map(|e| {
            let mut status = ElementStatusDoc::uniform(AttrStatus::Precise);
            for kind in AttrKind::ALL {
                status.set(kind, e.get(kind).status);
            }
            let category = e.category().map(|id| {
                match vocab.and_then(|v| v.name(id)) {
                    Some(name) => CategoryRef::Name(name.to_string()),
                    None => CategoryRef::Id(id),
                }
            });
            let coord = |kind: AttrKind| {
                e.get(kind)
                    .bin
                    .map(|b| dequantize_coord(b, layout.canvas.extent(kind), cfg.bins(kind)))
            };
            ElementDoc {
                category,
                x: coord(AttrKind::X),
                y: coord(AttrKind::Y),
                w: coord(AttrKind::W),
                h: coord(AttrKind::H),
                status,
            }
        })
        .collect();
    let relations = layout
        .relations
        .iter()
        .filter(|(_, l)| **l != RelationLabel::Unavailable)
        .map(|(&(i, j), &label)| RelationDoc { i, j, label })
        .collect();
    LayoutDoc {
        canvas: layout.canvas,
        elements,
        relations,
    }
}

/// Map every bin back to canvas coordinates. Fails if any attribute is missing.
pub fn dequantize(layout: &Layout, cfg: &QuantizerConfig, vocab: Option<&Vocabulary>) -> Result<LayoutDoc> {
    if let Some(idx) = layout.elements.iter().position(|e| !e.is_complete()) {
        return Err(Error::IncompleteLayout(format!(
            "element {idx} has a masked attribute"
        )));
    }
    Ok(to_doc(layout, cfg, vocab))
}

/// A box in canvas-normalized coordinates, clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl ContinuousBox {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn intersection(&self, other: &ContinuousBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &ContinuousBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

impl Element {
    /// Normalized box of a complete element, clamped to the canvas.
    pub fn normalized_box(&self, cfg: &QuantizerConfig) -> Option<ContinuousBox> {
        let [x, y, w, h] = self.geometry()?;
        let n = |b: u32, kind: AttrKind| b as f64 / (cfg.bins(kind) - 1) as f64;
        let x0 = n(x, AttrKind::X);
        let y0 = n(y, AttrKind::Y);
        Some(ContinuousBox {
            x0,
            y0,
            x1: n(x + w, AttrKind::X).min(1.0),
            y1: n(y + h, AttrKind::Y).min(1.0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc_one(x: f64) -> LayoutDoc {
        LayoutDoc {
            canvas: CanvasSpec::new(100, 100).unwrap(),
            elements: vec![ElementDoc {
                category: Some(CategoryRef::Id(0)),
                x: Some(x),
                y: Some(0.0),
                w: Some(10.0),
                h: Some(10.0),
                status: ElementStatusDoc::uniform(AttrStatus::Precise),
            }],
            relations: vec![],
        }
    }

    fn cfg() -> QuantizerConfig {
        QuantizerConfig::new(3, 128).unwrap()
    }

    #[test]
    fn quantize_boundaries_and_midpoint() {
        let vocab = Vocabulary::numbered(3);
        let bin = |x| quantize(&doc_one(x), &cfg(), &vocab).unwrap().elements[0].attrs[1].bin;
        assert_eq!(bin(0.0), Some(0));
        assert_eq!(bin(100.0), Some(127));
        // round(0.5 * 127) = round(63.5) = 64 with half-up rounding
        assert_eq!(bin(50.0), Some(64));
    }

    #[test]
    fn dequantize_boundaries() {
        assert_eq!(dequantize_coord(0, 100.0, 128), 0.0);
        assert_eq!(dequantize_coord(127, 100.0, 128), 100.0);
    }

    #[test]
    fn quantize_dequantize_identity_on_all_bins() {
        for k in [2u32, 3, 16, 128] {
            for extent in [1.0, 37.0, 100.0, 1080.0] {
                for b in 0..k {
                    let v = dequantize_coord(b, extent, k);
                    assert_eq!(quantize_coord(v, extent, k), b, "k={k} extent={extent}");
                }
            }
        }
    }

    #[test]
    fn unknown_category_name_is_vocabulary_error() {
        let mut doc = doc_one(0.0);
        doc.elements[0].category = Some(CategoryRef::Name("banner".into()));
        let err = quantize(&doc, &cfg(), &Vocabulary::numbered(3)).unwrap_err();
        assert!(matches!(err, Error::Vocabulary(_)));
    }

    #[test]
    fn negative_size_is_validation_error() {
        let mut doc = doc_one(0.0);
        doc.elements[0].w = Some(-1.0);
        let err = quantize(&doc, &cfg(), &Vocabulary::numbered(3)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn dequantize_rejects_masked_layouts() {
        let mut layout = quantize(&doc_one(5.0), &cfg(), &Vocabulary::numbered(3)).unwrap();
        layout.elements[0].attrs[3] = AttrValue::missing();
        assert!(matches!(
            dequantize(&layout, &cfg(), None),
            Err(Error::IncompleteLayout(_))
        ));
    }

    #[test]
    fn statuses_survive_quantization() {
        let mut doc = doc_one(5.0);
        doc.elements[0].status.y = AttrStatus::Coarse;
        doc.elements[0].status.h = AttrStatus::Missing;
        doc.elements[0].h = None;
        let layout = quantize(&doc, &cfg(), &Vocabulary::numbered(3)).unwrap();
        assert_eq!(layout.elements[0].get(AttrKind::Y).status, AttrStatus::Coarse);
        assert!(layout.elements[0].get(AttrKind::H).is_missing());
    }

    proptest::proptest! {
        #[test]
        fn quantize_is_monotone(a in 0.0f64..500.0, b in 0.0f64..500.0, k in 2u32..300) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            proptest::prop_assert!(quantize_coord(lo, 500.0, k) <= quantize_coord(hi, 500.0, k));
        }
    }
}
