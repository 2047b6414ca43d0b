//! The relation-biased transformer that predicts a distribution over clean
//! values for every attribute token, and its composition with the analytic
//! posterior.

mod checkpoint;
mod reverse;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::layout::{AttrKind, AttributeToken, QuantizerConfig, RelationLabel, TokenSequence, DEFAULT_N_MAX};
use crate::numerics::{seeded_rng, softmax_in_place, AttnSegment, AttnSpec, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use reverse::{reverse_distribution, Mixture};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub n_max: usize,
    /// Clean-value count per kind in `[c, x, y, w, h]` order; MASK is extra.
    pub vocab_sizes: [usize; 5],
}

impl ModelConfig {
    /// Full-size settings: 8 layers of 8 heads, feed-forward width 2048.
    pub fn standard(quant: &QuantizerConfig) -> Self {
        Self {
            d_model: 256,
            n_heads: 8,
            n_layers: 8,
            d_ffn: 2048,
            n_max: DEFAULT_N_MAX,
            vocab_sizes: vocab_sizes(quant),
        }
    }

    pub fn toy(quant: &QuantizerConfig) -> Self {
        Self {
            d_model: 64,
            n_heads: 8,
            n_layers: 2,
            d_ffn: 128,
            n_max: DEFAULT_N_MAX,
            vocab_sizes: vocab_sizes(quant),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Validation(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ffn == 0 || self.n_max == 0 {
            return Err(Error::Validation("layer count, ffn width and n_max must be positive".into()));
        }
        if self.vocab_sizes.iter().any(|&k| k < 2) {
            return Err(Error::Validation("every vocabulary needs at least 2 values".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn vocab(&self, kind: AttrKind) -> usize {
        self.vocab_sizes[kind.index()]
    }

    /// Row offset of each kind in the shared value-embedding table.
    fn value_offsets(&self) -> [usize; 5] {
        let mut out = [0; 5];
        let mut acc = 0;
        for (o, &k) in out.iter_mut().zip(&self.vocab_sizes) {
            *o = acc;
            acc += k + 1;
        }
        out
    }

    fn value_rows(&self) -> usize {
        self.vocab_sizes.iter().map(|k| k + 1).sum()
    }
}

fn vocab_sizes(quant: &QuantizerConfig) -> [usize; 5] {
    AttrKind::ALL.map(|k| quant.bins(k) as usize)
}

/// Tokens of several sequences flattened into one matrix, with one attention
/// segment per sequence.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<AttributeToken>,
    /// `(start, len)` of each sequence.
    pub segments: Vec<(usize, usize)>,
    attn: Arc<AttnSpec>,
    /// Token indices of each kind, in flattened order.
    kind_rows: [Vec<usize>; 5],
    /// Position of each token inside its kind's row list.
    slot: Vec<usize>,
}

impl Batch {
    pub fn new<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>, cfg: &ModelConfig) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut segments = Vec::new();
        let mut attn_segments = Vec::new();
        for seq in seqs {
            let start = tokens.len();
            let n_el = seq.tokens.iter().map(|t| t.element + 1).max().unwrap_or(0);
            if n_el > cfg.n_max || seq.tokens.len() > 5 * cfg.n_max {
                return Err(Error::Range(format!(
                    "sequence with {n_el} elements exceeds n_max = {}",
                    cfg.n_max
                )));
            }
            for t in &seq.tokens {
                if t.value as usize > cfg.vocab(t.kind) {
                    return Err(Error::Range(format!(
                        "{} value {} outside [0, {}]",
                        t.kind,
                        t.value,
                        cfg.vocab(t.kind)
                    )));
                }
            }
            let unavailable = RelationLabel::Unavailable.index() as u8;
            let mut rel = vec![unavailable; n_el * n_el];
            for (&(i, j), &label) in &seq.relations {
                if i < n_el && j < n_el && i != j {
                    rel[i * n_el + j] = label.index() as u8;
                }
            }
            attn_segments.push(AttnSegment {
                start,
                len: seq.tokens.len(),
                element: seq.tokens.iter().map(|t| t.element).collect(),
                n_elements: n_el,
                rel,
            });
            segments.push((start, seq.tokens.len()));
            tokens.extend_from_slice(&seq.tokens);
        }
        if tokens.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut kind_rows: [Vec<usize>; 5] = Default::default();
        let mut slot = Vec::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let rows = &mut kind_rows[t.kind.index()];
            slot.push(rows.len());
            rows.push(i);
        }
        Ok(Self {
            tokens,
            segments,
            attn: Arc::new(AttnSpec {
                n_heads: cfg.n_heads,
                segments: attn_segments,
            }),
            kind_rows,
            slot,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn kind_rows(&self, kind: AttrKind) -> &[usize] {
        &self.kind_rows[kind.index()]
    }

    /// Row of token `i` inside the logits of its kind.
    pub fn slot(&self, i: usize) -> usize {
        self.slot[i]
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

/// Embedding fusion plus pre-norm transformer blocks and a final norm.
#[derive(Debug, Clone)]
pub struct Trunk {
    cfg: ModelConfig,
    value_emb: ParamId,
    kind_emb: ParamId,
    element_emb: ParamId,
    flag_emb: ParamId,
    rel_q: ParamId,
    rel_k: ParamId,
    layers: Vec<LayerIds>,
    final_ln: (ParamId, ParamId),
}

fn normal<F: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| F::of(dist.sample(rng))).collect()).expect("shape")
}

fn filled<F: Real>(shape: &[usize], v: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, vec![F::of(v); n]).expect("shape")
}

impl Trunk {
    pub fn register<F: Real, R: Rng + ?Sized>(
        params: &mut ParamStore<F>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        let dh = cfg.d_head();
        let linear = |params: &mut ParamStore<F>, name: String, i: usize, o: usize, rng: &mut R| {
            (
                params.add(format!("{name}.w"), normal(&[i, o], INIT_STD, rng)),
                params.add(format!("{name}.b"), filled(&[o], 0.0)),
            )
        };
        let norm = |params: &mut ParamStore<F>, name: String| {
            (
                params.add(format!("{name}.g"), filled(&[d], 1.0)),
                params.add(format!("{name}.b"), filled(&[d], 0.0)),
            )
        };
        let value_emb = params.add(format!("{prefix}embed.value"), normal(&[cfg.value_rows(), d], INIT_STD, rng));
        let kind_emb = params.add(format!("{prefix}embed.kind"), normal(&[5, d], INIT_STD, rng));
        let element_emb = params.add(format!("{prefix}embed.element"), normal(&[cfg.n_max, d], INIT_STD, rng));
        let flag_emb = params.add(format!("{prefix}embed.flag"), normal(&[2, d], INIT_STD, rng));
        let mut rel_table = |name: &str, rng: &mut R| {
            let mut t: Tensor<F> = normal(&[RelationLabel::COUNT, dh], INIT_STD, rng);
            t.row_mut(RelationLabel::Unavailable.index()).fill(F::ZERO);
            params.add(format!("{prefix}{name}"), t)
        };
        let rel_q = rel_table("rel.q", rng);
        let rel_k = rel_table("rel.k", rng);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("{prefix}layers.{l}");
                LayerIds {
                    ln1: norm(params, format!("{p}.ln1")),
                    wq: linear(params, format!("{p}.attn.q"), d, d, rng),
                    wk: linear(params, format!("{p}.attn.k"), d, d, rng),
                    wv: linear(params, format!("{p}.attn.v"), d, d, rng),
                    wo: linear(params, format!("{p}.attn.o"), d, d, rng),
                    ln2: norm(params, format!("{p}.ln2")),
                    ff1: linear(params, format!("{p}.ffn.1"), d, cfg.d_ffn, rng),
                    ff2: linear(params, format!("{p}.ffn.2"), cfg.d_ffn, d, rng),
                }
            })
            .collect();
        let final_ln = norm(params, format!("{prefix}final_ln"));
        Self {
            cfg: *cfg,
            value_emb,
            kind_emb,
            element_emb,
            flag_emb,
            rel_q,
            rel_k,
            layers,
            final_ln,
        }
    }

    /// Fused token embeddings, `[tokens, d_model]`.
    pub fn embed<F: Real>(&self, g: &mut Graph<'_, F>, batch: &Batch) -> Var {
        let offsets = self.cfg.value_offsets();
        let values = batch
            .tokens
            .iter()
            .map(|t| offsets[t.kind.index()] + t.value as usize)
            .collect();
        let kinds = batch.tokens.iter().map(|t| t.kind.index()).collect();
        let elements = batch.tokens.iter().map(|t| t.element).collect();
        let flags = batch.tokens.iter().map(|t| usize::from(t.flag)).collect();
        let tables = [self.value_emb, self.kind_emb, self.element_emb, self.flag_emb];
        let mut acc: Option<Var> = None;
        for (table, idx) in tables.into_iter().zip([values, kinds, elements, flags]) {
            let t = g.param(table);
            let e = g.gather(t, idx);
            acc = Some(match acc {
                Some(a) => g.add(a, e),
                None => e,
            });
        }
        acc.expect("four tables")
    }

    /// Final hidden states, `[tokens, d_model]`.
    pub fn encode<F: Real>(&self, g: &mut Graph<'_, F>, batch: &Batch) -> Var {
        let mut x = self.embed(g, batch);
        let rq = g.param(self.rel_q);
        let rk = g.param(self.rel_k);
        for layer in &self.layers {
            let h = norm(g, x, layer.ln1);
            let q = linear(g, h, layer.wq);
            let k = linear(g, h, layer.wk);
            let v = linear(g, h, layer.wv);
            let a = g.attention(q, k, v, rq, rk, batch.attn.clone());
            let o = linear(g, a, layer.wo);
            x = g.add(x, o);
            let h = norm(g, x, layer.ln2);
            let f = linear(g, h, layer.ff1);
            let f = g.gelu(f);
            let f = linear(g, f, layer.ff2);
            x = g.add(x, f);
        }
        norm(g, x, self.final_ln)
    }
}

fn linear<F: Real>(g: &mut Graph<'_, F>, x: Var, (w, b): (ParamId, ParamId)) -> Var {
    let w = g.param(w);
    let b = g.param(b);
    g.linear(x, w, b)
}

fn norm<F: Real>(g: &mut Graph<'_, F>, x: Var, (gamma, beta): (ParamId, ParamId)) -> Var {
    let gamma = g.param(gamma);
    let beta = g.param(beta);
    g.layer_norm(x, gamma, beta)
}

/// Per-kind logits of one forward pass; `None` for kinds absent from the batch.
#[derive(Debug, Clone, Copy)]
pub struct HeadLogits {
    pub logits: [Option<Var>; 5],
}

/// Clean-value distribution for every token of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub probs: Vec<Vec<f64>>,
}

/// The x0-parameterized denoiser. Parameters live in one store so a graph
/// can borrow them all at once.
#[derive(Debug, Clone)]
pub struct Denoiser<F: Real = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    trunk: Trunk,
    heads: [(ParamId, ParamId); 5],
}

impl<F: Real> Denoiser<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.check()?;
        let mut rng = seeded_rng(seed, "denoiser-init");
        let mut params = ParamStore::new();
        let trunk = Trunk::register(&mut params, "", &cfg, &mut rng);
        let heads = AttrKind::ALL.map(|kind| {
            let k = cfg.vocab(kind);
            (
                params.add(format!("head.{kind}.w"), normal(&[cfg.d_model, k], INIT_STD, &mut rng)),
                params.add(format!("head.{kind}.b"), filled(&[k], 0.0)),
            )
        });
        Ok(Self {
            cfg,
            params,
            trunk,
            heads,
        })
    }

    /// Rebuild a model from a parameter store with matching names and shapes.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let mut fresh = Self::new(cfg, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {} tensors, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (_, name, t) in fresh.params.iter() {
            let other = params
                .id(name)
                .map(|i| params.get(i))
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing tensor {name}")))?;
            if other.shape() != t.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    other.shape(),
                    t.shape()
                )));
            }
        }
        let ids: Vec<_> = fresh.params.ids().collect();
        for id in ids {
            let name = fresh.params.name(id).to_string();
            let src = params.get(params.id(&name).expect("checked above")).clone();
            *fresh.params.get_mut(id) = src;
        }
        Ok(fresh)
    }

    pub fn trunk(&self) -> &Trunk {
        &self.trunk
    }

    pub fn cast<G: Real>(&self) -> Denoiser<G> {
        Denoiser {
            cfg: self.cfg,
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            heads: self.heads,
        }
    }

    /// Record the forward pass and return per-kind logits.
    pub fn forward(&self, g: &mut Graph<'_, F>, batch: &Batch) -> HeadLogits {
        let h = self.trunk.encode(g, batch);
        let mut logits = [None; 5];
        for kind in AttrKind::ALL {
            let rows = batch.kind_rows(kind);
            if rows.is_empty() {
                continue;
            }
            let hk = g.gather(h, rows.to_vec());
            logits[kind.index()] = Some(linear(g, hk, self.heads[kind.index()]));
        }
        HeadLogits { logits }
    }

    /// Clean-value probabilities of every token in batch order.
    pub fn probs_from_logits(g: &Graph<'_, F>, batch: &Batch, out: &HeadLogits) -> Vec<Vec<f64>> {
        batch
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let var = out.logits[t.kind.index()].expect("kind present in batch");
                let mut row: Vec<f64> = g.value(var).row(batch.slot(i)).iter().map(|v| v.f64()).collect();
                softmax_in_place(&mut row);
                row
            })
            .collect()
    }

    /// Inference-only forward over several sequences.
    pub fn predict(&self, seqs: &[TokenSequence]) -> Result<Vec<DenoiserOutput>> {
        let batch = Batch::new(seqs, &self.cfg)?;
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, &batch);
        let mut probs = Self::probs_from_logits(&g, &batch, &out).into_iter();
        Ok(batch
            .segments
            .iter()
            .map(|&(_, len)| DenoiserOutput {
                probs: probs.by_ref().take(len).collect(),
            })
            .collect())
    }
}
