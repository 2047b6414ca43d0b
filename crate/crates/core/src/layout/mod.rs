//! Layout domain types and the operations that move between representations:
//! continuous documents, quantized layouts and attribute token sequences.

mod json;
mod quantize;
mod relations;
mod tokens;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use json::{parse_layout, parse_layout_value, serialize_layout, ParseMode};
pub use quantize::{dequantize, quantize, ContinuousBox, ElementDoc, ElementStatusDoc, LayoutDoc, RelationDoc, CategoryRef};
pub use relations::{derive_relations, sample_relations, RelationConfig, RelationMode};
pub use tokens::{detokenize, tokenize, AttributeToken, TokenSequence};
pub use validate::{validate, ValidationReport, Violation};

/// Default maximum number of elements per layout.
pub const DEFAULT_N_MAX: usize = 25;

/// Number of attributes per element.
pub const ATTRS_PER_ELEMENT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub width: u32,
    pub height: u32,
}

impl CanvasSpec {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "canvas dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    /// Extent of the canvas along the axis an attribute is measured on.
    pub fn extent(&self, kind: AttrKind) -> f64 {
        match kind {
            AttrKind::X | AttrKind::W => self.width as f64,
            AttrKind::Y | AttrKind::H => self.height as f64,
            AttrKind::Category => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrKind {
    Category,
    X,
    Y,
    W,
    H,
}

impl AttrKind {
    /// Canonical per-element order `[c, x, y, w, h]`.
    pub const ALL: [AttrKind; 5] = [
        AttrKind::Category,
        AttrKind::X,
        AttrKind::Y,
        AttrKind::W,
        AttrKind::H,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_geometry(self) -> bool {
        self != AttrKind::Category
    }

    /// Semantic group: category `{C}`, position `{x, y}`, size `{w, h}`.
    pub fn group(self) -> AttrGroup {
        match self {
            AttrKind::Category => AttrGroup::Category,
            AttrKind::X | AttrKind::Y => AttrGroup::Position,
            AttrKind::W | AttrKind::H => AttrGroup::Size,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttrKind::Category => "category",
            AttrKind::X => "x",
            AttrKind::Y => "y",
            AttrKind::W => "w",
            AttrKind::H => "h",
        }
    }
}

impl fmt::Display for AttrKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttrGroup {
    Category,
    Position,
    Size,
}

impl AttrGroup {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrStatus {
    Precise,
    Coarse,
    Missing,
}

impl AttrStatus {
    pub fn name(self) -> &'static str {
        match self {
            AttrStatus::Precise => "precise",
            AttrStatus::Coarse => "coarse",
            AttrStatus::Missing => "missing",
        }
    }
}

impl FromStr for AttrStatus {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "precise" => Ok(AttrStatus::Precise),
            "coarse" => Ok(AttrStatus::Coarse),
            "missing" => Ok(AttrStatus::Missing),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

/// One quantized attribute. `bin` is `None` exactly when the status is missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttrValue {
    pub bin: Option<u32>,
    pub status: AttrStatus,
}

impl AttrValue {
    pub fn precise(bin: u32) -> Self {
        Self {
            bin: Some(bin),
            status: AttrStatus::Precise,
        }
    }

    pub fn coarse(bin: u32) -> Self {
        Self {
            bin: Some(bin),
            status: AttrStatus::Coarse,
        }
    }

    pub fn missing() -> Self {
        Self {
            bin: None,
            status: AttrStatus::Missing,
        }
    }

    pub fn is_missing(&self) -> bool {
        self.bin.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Element {
    pub attrs: [AttrValue; 5],
}

impl Element {
    pub fn precise(category: u32, x: u32, y: u32, w: u32, h: u32) -> Self {
        Self {
            attrs: [category, x, y, w, h].map(AttrValue::precise),
        }
    }

    pub fn all_missing() -> Self {
        Self {
            attrs: [AttrValue::missing(); 5],
        }
    }

    pub fn get(&self, kind: AttrKind) -> AttrValue {
        self.attrs[kind.index()]
    }

    pub fn get_mut(&mut self, kind: AttrKind) -> &mut AttrValue {
        &mut self.attrs[kind.index()]
    }

    pub fn category(&self) -> Option<u32> {
        self.get(AttrKind::Category).bin
    }

    /// All four geometry bins, if none is missing.
    pub fn geometry(&self) -> Option<[u32; 4]> {
        Some([
            self.attrs[1].bin?,
            self.attrs[2].bin?,
            self.attrs[3].bin?,
            self.attrs[4].bin?,
        ])
    }

    pub fn is_complete(&self) -> bool {
        self.attrs.iter().all(|a| !a.is_missing())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationLabel {
    Smaller,
    Larger,
    Equal,
    Above,
    Bottom,
    Left,
    Right,
    Overlapped,
    Unavailable,
}

impl RelationLabel {
    pub const COUNT: usize = 9;

    pub const ALL: [RelationLabel; 9] = [
        RelationLabel::Smaller,
        RelationLabel::Larger,
        RelationLabel::Equal,
        RelationLabel::Above,
        RelationLabel::Bottom,
        RelationLabel::Left,
        RelationLabel::Right,
        RelationLabel::Overlapped,
        RelationLabel::Unavailable,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationLabel::Smaller => "smaller",
            RelationLabel::Larger => "larger",
            RelationLabel::Equal => "equal",
            RelationLabel::Above => "above",
            RelationLabel::Bottom => "bottom",
            RelationLabel::Left => "left",
            RelationLabel::Right => "right",
            RelationLabel::Overlapped => "overlapped",
            RelationLabel::Unavailable => "unavailable",
        }
    }

    /// Label of the reversed pair `(j, i)`.
    pub fn converse(self) -> Self {
        match self {
            RelationLabel::Smaller => RelationLabel::Larger,
            RelationLabel::Larger => RelationLabel::Smaller,
            RelationLabel::Above => RelationLabel::Bottom,
            RelationLabel::Bottom => RelationLabel::Above,
            RelationLabel::Left => RelationLabel::Right,
            RelationLabel::Right => RelationLabel::Left,
            other => other,
        }
    }
}

impl FromStr for RelationLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        RelationLabel::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown relation label `{s}`"))
    }
}

/// Sparse map from ordered element pairs to labels; absent pairs are unavailable.
pub type RelationMap = BTreeMap<(usize, usize), RelationLabel>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub canvas: CanvasSpec,
    pub elements: Vec<Element>,
    pub relations: RelationMap,
}

impl Layout {
    pub fn new(canvas: CanvasSpec, elements: Vec<Element>) -> Self {
        Self {
            canvas,
            elements,
            relations: RelationMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.elements.iter().all(Element::is_complete)
    }

    pub fn count_status(&self, status: AttrStatus) -> usize {
        self.elements
            .iter()
            .flat_map(|e| e.attrs.iter())
            .filter(|a| a.status == status)
            .count()
    }

    pub fn relation(&self, i: usize, j: usize) -> RelationLabel {
        self.relations
            .get(&(i, j))
            .copied()
            .unwrap_or(RelationLabel::Unavailable)
    }
}

/// Bin counts per attribute kind. Index order follows [`AttrKind::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub k_category: u32,
    pub k_x: u32,
    pub k_y: u32,
    pub k_w: u32,
    pub k_h: u32,
}

impl QuantizerConfig {
    pub const DEFAULT_GEOMETRY_BINS: u32 = 128;

    pub fn new(k_category: u32, k_geometry: u32) -> Result<Self> {
        let cfg = Self {
            k_category,
            k_x: k_geometry,
            k_y: k_geometry,
            k_w: k_geometry,
            k_h: k_geometry,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        for kind in AttrKind::ALL {
            if self.bins(kind) < 2 {
                return Err(Error::Validation(format!(
                    "bin count for {kind} must be at least 2, got {}",
                    self.bins(kind)
                )));
            }
        }
        Ok(())
    }

    pub fn bins(&self, kind: AttrKind) -> u32 {
        match kind {
            AttrKind::Category => self.k_category,
            AttrKind::X => self.k_x,
            AttrKind::Y => self.k_y,
            AttrKind::W => self.k_w,
            AttrKind::H => self.k_h,
        }
    }

    /// Index of the absorbing MASK value for `kind`, equal to its bin count.
    pub fn mask(&self, kind: AttrKind) -> u32 {
        self.bins(kind)
    }
}

/// Category names; the index of a name is its category id.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    /// Vocabulary of `n` synthetic names `"0"`, `"1"`, ...
    pub fn numbered(n: usize) -> Self {
        Self::new((0..n).map(|i| i.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32)
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }
}
