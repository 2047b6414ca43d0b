use std::fmt;

use serde::Serialize;

use super::{AttrKind, AttrStatus, Layout, QuantizerConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    BinOutOfRange {
        element: usize,
        attr: AttrKind,
        bin: u32,
        bins: u32,
    },
    StatusMismatch {
        element: usize,
        attr: AttrKind,
    },
    Cardinality {
        n: usize,
        n_max: usize,
    },
    RelationIndex {
        i: usize,
        j: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BinOutOfRange {
                element,
                attr,
                bin,
                bins,
            } => write!(f, "element {element}: {attr} bin {bin} outside [0, {bins})"),
            Violation::StatusMismatch { element, attr } => {
                write!(f, "element {element}: {attr} status disagrees with its value")
            }
            Violation::Cardinality { n, n_max } => {
                write!(f, "layout has {n} elements, allowed range is [1, {n_max}]")
            }
            Violation::RelationIndex { i, j } => write!(f, "relation ({i}, {j}) is invalid"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Collect every invariant violation of `layout`; an empty report means valid.
pub fn validate(layout: &Layout, cfg: &QuantizerConfig, n_max: usize) -> ValidationReport {
    let mut violations = Vec::new();
    let n = layout.len();
    if n == 0 || n > n_max {
        violations.push(Violation::Cardinality { n, n_max });
    }
    for (element, e) in layout.elements.iter().enumerate() {
        for attr in AttrKind::ALL {
            let a = e.get(attr);
            match a.bin {
                Some(bin) if bin >= cfg.bins(attr) => violations.push(Violation::BinOutOfRange {
                    element,
                    attr,
                    bin,
                    bins: cfg.bins(attr),
                }),
                _ => {}
            }
            if a.bin.is_none() != (a.status == AttrStatus::Missing) {
                violations.push(Violation::StatusMismatch { element, attr });
            }
        }
    }
    for &(i, j) in layout.relations.keys() {
        if i >= n || j >= n || i == j {
            violations.push(Violation::RelationIndex { i, j });
        }
    }
    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{CanvasSpec, Element, RelationLabel};

    fn cfg() -> QuantizerConfig {
        QuantizerConfig::new(5, 128).unwrap()
    }

    fn one() -> Layout {
        Layout::new(CanvasSpec::new(10, 10).unwrap(), vec![Element::precise(1, 2, 3, 4, 5)])
    }

    #[test]
    fn valid_layout_has_empty_report() {
        assert!(validate(&one(), &cfg(), 25).is_valid());
    }

    #[test]
    fn bin_equal_to_k_is_one_range_violation() {
        let mut l = one();
        l.elements[0].attrs[1].bin = Some(128);
        let report = validate(&l, &cfg(), 25);
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(report.violations[0], Violation::BinOutOfRange { bin: 128, .. }));
    }

    #[test]
    fn twenty_six_elements_is_one_cardinality_violation() {
        let l = Layout::new(CanvasSpec::new(10, 10).unwrap(), vec![Element::precise(1, 2, 3, 4, 5); 26]);
        let report = validate(&l, &cfg(), 25);
        assert_eq!(report.violations, vec![Violation::Cardinality { n: 26, n_max: 25 }]);
    }

    #[test]
    fn dangling_relation_and_status_mismatch_are_reported() {
        let mut l = one();
        l.relations.insert((0, 3), RelationLabel::Above);
        l.elements[0].attrs[2].status = AttrStatus::Missing;
        let report = validate(&l, &cfg(), 25);
        assert_eq!(report.violations.len(), 2);
    }
}
