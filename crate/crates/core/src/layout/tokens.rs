use super::{
    AttrKind, AttrStatus, AttrValue, CanvasSpec, Element, Layout, QuantizerConfig, RelationMap,
    ATTRS_PER_ELEMENT,
};
use crate::{Error, Result};

/// One attribute as seen by the denoiser. `value == K_kind` is the MASK value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttributeToken {
    pub element: usize,
    pub kind: AttrKind,
    pub value: u32,
    /// Set exactly when the attribute is a precise condition.
    pub flag: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<AttributeToken>,
    pub relations: RelationMap,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_elements(&self) -> usize {
        self.tokens.len() / ATTRS_PER_ELEMENT
    }
}

/// Flatten a layout into `5N` tokens in `[c, x, y, w, h]` order per element.
pub fn tokenize(layout: &Layout, cfg: &QuantizerConfig) -> TokenSequence {
    let mut tokens = Vec::with_capacity(layout.len() * ATTRS_PER_ELEMENT);
    for (i, e) in layout.elements.iter().enumerate() {
        for kind in AttrKind::ALL {
            let a = e.get(kind);
            tokens.push(AttributeToken {
                element: i,
                kind,
                value: a.bin.unwrap_or_else(|| cfg.mask(kind)),
                flag: a.status == AttrStatus::Precise,
            });
        }
    }
    TokenSequence {
        tokens,
        relations: layout.relations.clone(),
    }
}

/// Rebuild a layout from tokens and per-token statuses.
pub fn detokenize(
    seq: &TokenSequence,
    statuses: &[AttrStatus],
    canvas: CanvasSpec,
    cfg: &QuantizerConfig,
) -> Result<Layout> {
    if !seq.len().is_multiple_of(ATTRS_PER_ELEMENT) {
        return Err(Error::Shape(format!(
            "token count {} is not divisible by {ATTRS_PER_ELEMENT}",
            seq.len()
        )));
    }
    if statuses.len() != seq.len() {
        return Err(Error::Shape(format!(
            "{} statuses for {} tokens",
            statuses.len(),
            seq.len()
        )));
    }
    let elements = seq
        .tokens
        .chunks(ATTRS_PER_ELEMENT)
        .zip(statuses.chunks(ATTRS_PER_ELEMENT))
        .map(|(toks, sts)| {
            let mut attrs = [AttrValue::missing(); 5];
            for (t, s) in toks.iter().zip(sts) {
                let mask = cfg.mask(t.kind);
                attrs[t.kind.index()] = if t.value == mask || *s == AttrStatus::Missing {
                    AttrValue::missing()
                } else {
                    AttrValue {
                        bin: Some(t.value),
                        status: *s,
                    }
                };
            }
            Element { attrs }
        })
        .collect();
    Ok(Layout {
        canvas,
        elements,
        relations: seq.relations.clone(),
    })
}
