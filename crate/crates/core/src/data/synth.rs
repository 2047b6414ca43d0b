//! Rule-based synthetic layouts.
//!
//! Rules, in canvas-normalized units with margin `m = 0.05` and gap `0.02`:
//!
//! - element 0 is a `title` band spanning `[m, 1 - m]` at the top, height 0.08;
//! - the remaining `N - 1` categories are drawn i.i.d. from
//!   `text 0.40, image 0.25, button 0.20, icon 0.15` and stacked in rows;
//! - `text` and `image` take a full-width row (heights 0.06 and 0.18);
//! - two consecutive buttons share a two-column row, a lone button is full width
//!   (height 0.05);
//! - an icon (0.10 x 0.06) sits at the left margin and the next non-icon
//!   element, if any, fills the rest of its row;
//! - rows that do not fit are scaled down uniformly together with their gaps;
//! - every distinct grid line (margin, column edge, row top, element bottom)
//!   gets one `N(0, jitter_std)` offset shared by all edges lying on it, then
//!   edges snap to bins without letting rows or columns cross.
//!
//! `N` is uniform on `[min_elements, max_elements]`.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::layout::{CanvasSpec, Element, Layout, QuantizerConfig, Vocabulary};
use crate::numerics::seeded_rng;
use crate::{Error, Result};

pub const SYNTH_CATEGORIES: [&str; 5] = ["title", "text", "image", "button", "icon"];
const BODY_WEIGHTS: [f64; 4] = [0.40, 0.25, 0.20, 0.15];
const MARGIN: f64 = 0.05;
const GAP: f64 = 0.02;
const TITLE_H: f64 = 0.08;
const ICON_W: f64 = 0.10;
const HEIGHTS: [f64; 5] = [TITLE_H, 0.06, 0.18, 0.05, 0.06];
const TITLE: u32 = 0;
const BUTTON: u32 = 3;
const ICON: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_layouts: usize,
    pub k_geometry: u32,
    pub jitter_std: f64,
    pub min_elements: usize,
    pub max_elements: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_layouts: 1000,
            k_geometry: 32,
            jitter_std: 0.002,
            min_elements: 2,
            max_elements: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::Validation(format!("jitter_std must be >= 0, got {}", self.jitter_std)));
        }
        if self.min_elements < 1 || self.min_elements > self.max_elements {
            return Err(Error::Validation(format!(
                "element range [{}, {}] is empty or starts at 0",
                self.min_elements, self.max_elements
            )));
        }
        if self.k_geometry < 16 {
            return Err(Error::Validation(format!("k_geometry must be >= 16, got {}", self.k_geometry)));
        }
        Ok(())
    }

    pub fn quantizer(&self) -> Result<QuantizerConfig> {
        QuantizerConfig::new(SYNTH_CATEGORIES.len() as u32, self.k_geometry)
    }

    /// Expected share of each category among all generated elements.
    pub fn category_distribution(&self) -> [f64; 5] {
        let mean_n = (self.min_elements + self.max_elements) as f64 / 2.0;
        let mut out = [0.0; 5];
        out[0] = 1.0 / mean_n;
        for (c, w) in BODY_WEIGHTS.iter().enumerate() {
            out[c + 1] = w * (mean_n - 1.0) / mean_n;
        }
        out
    }
}

pub fn synth_vocabulary() -> Vocabulary {
    Vocabulary::new(SYNTH_CATEGORIES.iter().map(|s| s.to_string()).collect())
}

pub fn synth_canvas() -> CanvasSpec {
    CanvasSpec { width: 360, height: 640 }
}

/// A placed element before snapping: category and `[x0, y0, x1, y1]`.
struct Placed {
    category: u32,
    edges: [f64; 4],
}

fn draw_body<R: Rng + ?Sized>(rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in BODY_WEIGHTS.iter().enumerate() {
        acc += w;
        if u < acc {
            return i as u32 + 1;
        }
    }
    BODY_WEIGHTS.len() as u32
}

/// Group body categories into rows of one or two elements.
fn rows(body: &[u32]) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < body.len() {
        let c = body[i];
        let next = body.get(i + 1).copied();
        let pair = match (c, next) {
            (BUTTON, Some(BUTTON)) => true,
            (ICON, Some(n)) => n != ICON,
            _ => false,
        };
        if pair {
            out.push(vec![c, next.unwrap()]);
            i += 2;
        } else {
            out.push(vec![c]);
            i += 1;
        }
    }
    out
}

fn place(body: &[u32]) -> Vec<Placed> {
    let right = 1.0 - MARGIN;
    let mut placed = vec![Placed {
        category: TITLE,
        edges: [MARGIN, MARGIN, right, MARGIN + TITLE_H],
    }];
    let rows = rows(body);
    let row_h = |r: &[u32]| r.iter().map(|&c| HEIGHTS[c as usize]).fold(0.0, f64::max);
    let natural: f64 = rows.iter().map(|r| row_h(r)).sum::<f64>() + GAP * rows.len().saturating_sub(1) as f64;
    let top = MARGIN + TITLE_H + GAP;
    let available = right - top;
    let scale = if natural > available { available / natural } else { 1.0 };
    let mut y = top;
    let col_w = (right - MARGIN - GAP) / 2.0;
    for r in &rows {
        let h = |c: u32| HEIGHTS[c as usize] * scale;
        match r.as_slice() {
            [BUTTON, BUTTON] => {
                placed.push(Placed { category: BUTTON, edges: [MARGIN, y, MARGIN + col_w, y + h(BUTTON)] });
                placed.push(Placed { category: BUTTON, edges: [right - col_w, y, right, y + h(BUTTON)] });
            }
            [ICON, other] => {
                placed.push(Placed { category: ICON, edges: [MARGIN, y, MARGIN + ICON_W, y + h(ICON)] });
                placed.push(Placed { category: *other, edges: [MARGIN + ICON_W + GAP, y, right, y + h(*other)] });
            }
            [ICON] => placed.push(Placed { category: ICON, edges: [MARGIN, y, MARGIN + ICON_W, y + h(ICON)] }),
            [c] => placed.push(Placed { category: *c, edges: [MARGIN, y, right, y + h(*c)] }),
            _ => unreachable!("rows hold one or two elements"),
        }
        y += row_h(r) * scale + GAP * scale;
    }
    placed
}

fn snap(v: f64, k: u32) -> i64 {
    (v * (k - 1) as f64).round().clamp(0.0, (k - 1) as f64) as i64
}

/// One layout drawn from the rule distribution.
pub fn synth_layout<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Layout {
    let n = rng.random_range(cfg.min_elements..=cfg.max_elements);
    let body: Vec<u32> = (1..n).map(|_| draw_body(rng)).collect();
    let placed = place(&body);
    let k = cfg.k_geometry;
    let top = (k - 1) as i64;
    let noise = Normal::new(0.0, cfg.jitter_std).expect("jitter checked");
    let mut offsets: HashMap<(bool, u64), f64> = HashMap::new();
    let mut jitter = |vertical: bool, v: f64| {
        if cfg.jitter_std == 0.0 {
            return v;
        }
        v + *offsets.entry((vertical, v.to_bits())).or_insert_with(|| noise.sample(rng))
    };

    let mut elements = Vec::with_capacity(placed.len());
    let mut floor = 0i64;
    let mut row_bottom = 0i64;
    let mut prev: Option<(f64, i64)> = None;
    for p in &placed {
        let [x0, y0, x1, y1] = p.edges;
        // a new row starts whenever the nominal top moves down
        let same_row = prev.is_some_and(|(py, _)| (py - y0).abs() < 1e-12);
        if !same_row {
            floor = row_bottom;
        }
        let mut bx0 = snap(jitter(false, x0), k);
        if let (true, Some((_, prev_right))) = (same_row, prev) {
            bx0 = bx0.max(prev_right);
        }
        let mut bx1 = snap(jitter(false, x1), k).max(bx0 + 1);
        if bx1 > top {
            bx1 = top;
            bx0 = bx0.min(top - 1);
        }
        let by0 = snap(jitter(true, y0), k).max(floor).min(top - 1);
        let by1 = snap(jitter(true, y1), k).max(by0 + 1).min(top);
        row_bottom = row_bottom.max(by1);
        prev = Some((y0, bx1));
        elements.push(Element::precise(
            p.category,
            bx0 as u32,
            by0 as u32,
            (bx1 - bx0) as u32,
            (by1 - by0) as u32,
        ));
    }
    Layout::new(synth_canvas(), elements)
}

/// `cfg.n_layouts` layouts; layout `i` uses its own seeded stream.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<Layout>> {
    cfg.check()?;
    Ok((0..cfg.n_layouts)
        .map(|i| synth_layout(cfg, &mut seeded_rng(cfg.seed, &format!("synth/{i}"))))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{alignment, overlap};
    use crate::layout::{validate, AttrKind};

    #[test]
    fn zero_jitter_is_perfectly_aligned_and_disjoint() {
        let cfg = SynthConfig { n_layouts: 300, jitter_std: 0.0, ..SynthConfig::default() };
        let q = cfg.quantizer().unwrap();
        for l in synth_corpus(&cfg).unwrap() {
            assert_eq!(alignment(&l, &q).unwrap(), 0.0, "{l:?}");
            assert_eq!(overlap(&l, &q).unwrap(), 0.0, "{l:?}");
            assert!(validate(&l, &q, 25).is_valid());
        }
    }

    #[test]
    fn jittered_layouts_meet_the_quality_bounds() {
        for k in [32, 64, 128] {
            let cfg = SynthConfig { n_layouts: 500, jitter_std: 0.005, k_geometry: k, seed: 3, ..SynthConfig::default() };
            let q = cfg.quantizer().unwrap();
            for l in synth_corpus(&cfg).unwrap() {
                let a = alignment(&l, &q).unwrap();
                let o = overlap(&l, &q).unwrap();
                assert!(a <= 1.0 && o <= 5.0, "k={k} alignment {a} overlap {o}");
                assert!(validate(&l, &q, 25).is_valid());
            }
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = SynthConfig { n_layouts: 50, seed: 9, ..SynthConfig::default() };
        assert_eq!(synth_corpus(&cfg).unwrap(), synth_corpus(&cfg).unwrap());
        let other = SynthConfig { seed: 10, ..cfg.clone() };
        assert_ne!(synth_corpus(&cfg).unwrap(), synth_corpus(&other).unwrap());
    }

    #[test]
    fn category_histogram_matches_the_rules() {
        let cfg = SynthConfig::default();
        let corpus = synth_corpus(&cfg).unwrap();
        let mut counts = [0usize; 5];
        for l in &corpus {
            assert_eq!(l.elements[0].category(), Some(TITLE));
            assert!((2..=10).contains(&l.len()));
            for e in &l.elements {
                counts[e.get(AttrKind::Category).bin.unwrap() as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for (c, expected) in cfg.category_distribution().iter().enumerate() {
            let got = counts[c] as f64 / total as f64;
            assert!((got - expected).abs() <= 0.05 * expected, "category {c}: {got} vs {expected}");
        }
    }

    #[test]
    fn rows_pair_buttons_and_icons() {
        assert_eq!(rows(&[3, 3, 3]), vec![vec![3, 3], vec![3]]);
        assert_eq!(rows(&[4, 4, 1]), vec![vec![4], vec![4, 1]]);
        assert_eq!(rows(&[2, 4]), vec![vec![2], vec![4]]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(SynthConfig { jitter_std: -0.1, ..SynthConfig::default() }.check().is_err());
        assert!(SynthConfig { min_elements: 0, ..SynthConfig::default() }.check().is_err());
        assert!(SynthConfig { min_elements: 5, max_elements: 4, ..SynthConfig::default() }.check().is_err());
    }
}
