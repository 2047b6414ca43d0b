use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::{Error, Result};

/// Work below this many multiply-adds stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One attention block: a contiguous run of rows that attend only to each
/// other, with an element id per row and an element-level relation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnSegment {
    pub start: usize,
    pub len: usize,
    /// Local element index of each row.
    pub element: Vec<usize>,
    pub n_elements: usize,
    /// Row-major `n_elements x n_elements` relation indices into the bias tables.
    pub rel: Vec<u8>,
}

impl AttnSegment {
    #[inline]
    fn relation(&self, a: usize, b: usize) -> usize {
        self.rel[self.element[a] * self.n_elements + self.element[b]] as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnSpec {
    pub n_heads: usize,
    pub segments: Vec<AttnSegment>,
}

type RowLossFn<'a> = dyn Fn(usize, &[f64]) -> (f64, Vec<f64>) + Sync + 'a;

enum Op<F> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<(usize, usize)>,
    },
    Softmax(Var),
    Sum(Var),
    RowLoss {
        x: Var,
        grad: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        rq: Var,
        rk: Var,
        spec: Arc<AttnSpec>,
        probs: Vec<Vec<F>>,
    },
}

struct Node<'p, F: Real> {
    value: Cow<'p, Tensor<F>>,
    op: Op<F>,
}

/// A single forward pass recorded for reverse-mode differentiation.
/// Parameters are borrowed, never copied.
pub struct Graph<'p, F: Real> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<'p, F>>,
}

/// Parameter gradients indexed like the store; unreached parameters are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    grads: Vec<Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self {
            grads: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.grads[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: F) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<F>>, op: Op<F>) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced on the tape");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let params = self.params;
        self.push(Cow::Borrowed(params.get(id)), Op::Param(id))
    }

    /// A constant input.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("same shape");
        self.push(Cow::Owned(out), Op::Add(a, b))
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = vx.cols();
        assert_eq!(vb.len(), c, "add_row: bias length");
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(vb.data()) {
                *o += bb;
            }
        }
        self.push(Cow::Owned(out), Op::AddRow(x, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k) = (va.rows(), va.cols());
        assert_eq!(vb.rows(), k, "matmul: inner dimension");
        let m = vb.cols();
        let data = mm(va.data(), vb.data(), n, k, m);
        let out = Tensor::from_vec(&[n, m], data).expect("matmul shape");
        self.push(Cow::Owned(out), Op::MatMul(a, b))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("same shape");
        self.push(Cow::Owned(out), Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(Cow::Owned(out), Op::Scale(x, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(Cow::Owned(out), Op::Gelu(x))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, d) = (vx.rows(), vx.cols());
        assert_eq!(vg.len(), d);
        assert_eq!(vb.len(), d);
        let mut xhat = vec![F::ZERO; n * d];
        let mut rstd = vec![F::ZERO; n];
        let mut out = vec![F::ZERO; n * d];
        let inv_d = F::of(1.0 / d as f64);
        for i in 0..n {
            let row = vx.row(i);
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let r = F::ONE / (var + F::of(LN_EPS)).sqrt();
            rstd[i] = r;
            for c in 0..d {
                let h = (row[c] - mean) * r;
                xhat[i * d + c] = h;
                out[i * d + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let out = Tensor::from_vec(vx.shape(), out).expect("layer norm shape");
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Rows `src[idx[0]], src[idx[1]], ...`; also serves as embedding lookup.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let vs = self.value(src);
        let c = vs.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            assert!(i < vs.rows(), "gather: row {i} out of range");
            data.extend_from_slice(vs.row(i));
        }
        let out = Tensor::from_vec(&[idx.len(), c], data).expect("gather shape");
        self.push(Cow::Owned(out), Op::Gather { src, idx })
    }

    /// Mean of each `(start, len)` row range.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<(usize, usize)>) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let mut data = vec![F::ZERO; segments.len() * c];
        for (s, &(start, len)) in segments.iter().enumerate() {
            let inv = F::of(1.0 / len.max(1) as f64);
            for r in start..start + len {
                for (o, &v) in data[s * c..(s + 1) * c].iter_mut().zip(vx.row(r)) {
                    *o += v * inv;
                }
            }
        }
        let out = Tensor::from_vec(&[segments.len(), c], data).expect("segment mean shape");
        self.push(Cow::Owned(out), Op::SegmentMean { x, segments })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(Cow::Owned(out), Op::Softmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(x))
    }

    /// Scalar `sum_r f(r, x_r).0`, where `f` also returns `d loss / d x_r`.
    /// Rows are evaluated in `f64` and in parallel; the gradient is cached so
    /// the closure never runs during the backward pass.
    pub fn row_loss(&mut self, x: Var, f: &RowLossFn<'_>) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let rows: Vec<(f64, Vec<f64>)> = (0..vx.rows())
            .into_par_iter()
            .map(|r| {
                let row: Vec<f64> = vx.row(r).iter().map(|v| v.f64()).collect();
                let (l, g) = f(r, &row);
                assert_eq!(g.len(), c, "row_loss: gradient length");
                (l, g)
            })
            .collect();
        let total: f64 = rows.iter().map(|(l, _)| l).sum();
        let grad: Vec<F> = rows.iter().flat_map(|(_, g)| g.iter().map(|&v| F::of(v))).collect();
        self.push(Cow::Owned(Tensor::scalar(F::of(total))), Op::RowLoss { x, grad })
    }

    /// Multi-head self-attention restricted to segments, with relation
    /// biases added to queries and keys:
    /// `e_ij = (q_i + RQ[r_ij]) . (k_j + RK[r_ij]) / sqrt(d_head)`.
    /// `rq` and `rk` are `[n_relations, d_head]`, shared by all heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, rq: Var, rk: Var, spec: Arc<AttnSpec>) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (vrq, vrk) = (self.value(rq), self.value(rk));
        let (n, d) = (vq.rows(), vq.cols());
        let h = spec.n_heads;
        assert_eq!(d % h, 0, "attention: width not divisible by heads");
        let dh = d / h;
        assert_eq!(vrq.cols(), dh, "attention: bias width");
        assert_eq!(vrk.cols(), dh, "attention: bias width");
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let results: Vec<(Vec<F>, Vec<F>)> = spec
            .segments
            .par_iter()
            .map(|seg| {
                let len = seg.len;
                let mut out = vec![F::ZERO; len * d];
                let mut probs = vec![F::ZERO; h * len * len];
                let mut e = vec![F::ZERO; len];
                for head in 0..h {
                    let c0 = head * dh;
                    for a in 0..len {
                        let qa = &vq.row(seg.start + a)[c0..c0 + dh];
                        for b in 0..len {
                            let r = seg.relation(a, b);
                            let kb = &vk.row(seg.start + b)[c0..c0 + dh];
                            let (bq, bk) = (vrq.row(r), vrk.row(r));
                            let mut s = F::ZERO;
                            for c in 0..dh {
                                s += (qa[c] + bq[c]) * (kb[c] + bk[c]);
                            }
                            e[b] = s * scale;
                        }
                        softmax_in_place(&mut e);
                        let p = &mut probs[(head * len + a) * len..(head * len + a + 1) * len];
                        p.copy_from_slice(&e);
                        let o = &mut out[a * d + c0..a * d + c0 + dh];
                        for b in 0..len {
                            let vb = &vv.row(seg.start + b)[c0..c0 + dh];
                            for c in 0..dh {
                                o[c] += e[b] * vb[c];
                            }
                        }
                    }
                }
                (out, probs)
            })
            .collect();
        let mut data = vec![F::ZERO; n * d];
        let mut probs = Vec::with_capacity(results.len());
        for (seg, (out, p)) in spec.segments.iter().zip(results) {
            data[seg.start * d..(seg.start + seg.len) * d].copy_from_slice(&out);
            probs.push(p);
        }
        let out = Tensor::from_vec(&[n, d], data).expect("attention shape");
        self.push(
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                rq,
                rk,
                spec,
                probs,
            },
        )
    }

    /// Cached attention probabilities `[head][row][col]` of one segment.
    pub fn attention_probs(&self, attn: Var, segment: usize) -> Option<&[F]> {
        match &self.nodes[attn.0].op {
            Op::Attention { probs, .. } => probs.get(segment).map(Vec::as_slice),
            _ => None,
        }
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(self.value(loss).shape(), vec![F::ONE]).expect("scalar"));
        let mut out = Gradients::zeros_like(self.params);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => out.grads[id.0].add_assign(&g),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(x, b) => {
                    let c = g.cols();
                    let mut gb = vec![F::ZERO; c];
                    for row in g.data().chunks(c) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    accumulate(&mut grads, *b, Tensor::from_vec(&shape, gb).expect("bias grad"));
                    accumulate(&mut grads, *x, g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                    let ga = mm_nt(g.data(), vb.data(), n, m, k);
                    let gb = mm_tn(va.data(), g.data(), n, k, m);
                    accumulate(&mut grads, *a, Tensor::from_vec(va.shape(), ga).expect("matmul grad"));
                    accumulate(&mut grads, *b, Tensor::from_vec(vb.shape(), gb).expect("matmul grad"));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    let gb = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(va.shape(), ga).expect("mul grad"));
                    accumulate(&mut grads, *b, Tensor::from_vec(vb.shape(), gb).expect("mul grad"));
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    accumulate(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    let data = g.data().iter().zip(vx.data()).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(vx.shape(), data).expect("gelu grad"));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let vg = self.value(*gamma);
                    let (n, d) = (g.rows(), g.cols());
                    let mut gg = vec![F::ZERO; d];
                    let mut gbeta = vec![F::ZERO; d];
                    let mut gx = vec![F::ZERO; n * d];
                    let inv_d = F::of(1.0 / d as f64);
                    let mut dxhat = vec![F::ZERO; d];
                    for i in 0..n {
                        let gr = g.row(i);
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut m1 = F::ZERO;
                        let mut m2 = F::ZERO;
                        for c in 0..d {
                            gg[c] += gr[c] * xh[c];
                            gbeta[c] += gr[c];
                            dxhat[c] = gr[c] * vg.data()[c];
                            m1 += dxhat[c];
                            m2 += dxhat[c] * xh[c];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for c in 0..d {
                            gx[i * d + c] = rstd[i] * (dxhat[c] - m1 - xh[c] * m2);
                        }
                    }
                    let gshape = vg.shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    accumulate(&mut grads, *gamma, Tensor::from_vec(&gshape, gg).expect("ln grad"));
                    accumulate(&mut grads, *beta, Tensor::from_vec(&bshape, gbeta).expect("ln grad"));
                    accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), gx).expect("ln grad"));
                }
                Op::Gather { src, idx } => {
                    let vs = self.value(*src);
                    let c = vs.cols();
                    let mut gs = Tensor::zeros(vs.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &v) in gs.row_mut(i).iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::SegmentMean { x, segments } => {
                    let vx = self.value(*x);
                    let mut gx = Tensor::zeros(vx.shape());
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let inv = F::of(1.0 / len.max(1) as f64);
                        for r in start..start + len {
                            for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(s)) {
                                *o += v * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    let y = self.value(Var(i));
                    let c = y.cols();
                    let mut gx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        gx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(y.shape(), gx).expect("softmax grad"));
                }
                Op::Sum(x) => {
                    let s = g.item();
                    let vx = self.value(*x);
                    accumulate(&mut grads, *x, Tensor::from_vec(vx.shape(), vec![s; vx.len()]).expect("sum grad"));
                }
                Op::RowLoss { x, grad } => {
                    let s = g.item();
                    let vx = self.value(*x);
                    let data = grad.iter().map(|&v| v * s).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(vx.shape(), data).expect("row loss grad"));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    rq,
                    rk,
                    spec,
                    probs,
                } => {
                    let parts = self.attention_backward(&g, *q, *k, *v, *rq, *rk, spec, probs);
                    let [gq, gk, gv, grq, grk] = parts;
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                    accumulate(&mut grads, *rq, grq);
                    accumulate(&mut grads, *rk, grk);
                }
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<F>,
        q: Var,
        k: Var,
        v: Var,
        rq: Var,
        rk: Var,
        spec: &AttnSpec,
        probs: &[Vec<F>],
    ) -> [Tensor<F>; 5] {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (vrq, vrk) = (self.value(rq), self.value(rk));
        let (n, d) = (vq.rows(), vq.cols());
        let h = spec.n_heads;
        let dh = d / h;
        let n_rel = vrq.rows();
        let scale = F::of(1.0 / (dh as f64).sqrt());

        struct SegGrad<F> {
            q: Vec<F>,
            k: Vec<F>,
            v: Vec<F>,
            rq: Vec<F>,
            rk: Vec<F>,
        }

        let parts: Vec<SegGrad<F>> = spec
            .segments
            .par_iter()
            .zip(probs.par_iter())
            .map(|(seg, p)| {
                let len = seg.len;
                let mut sg = SegGrad {
                    q: vec![F::ZERO; len * d],
                    k: vec![F::ZERO; len * d],
                    v: vec![F::ZERO; len * d],
                    rq: vec![F::ZERO; n_rel * dh],
                    rk: vec![F::ZERO; n_rel * dh],
                };
                let mut dp = vec![F::ZERO; len];
                for head in 0..h {
                    let c0 = head * dh;
                    for a in 0..len {
                        let pa = &p[(head * len + a) * len..(head * len + a + 1) * len];
                        let ga = &g.row(seg.start + a)[c0..c0 + dh];
                        let mut s = F::ZERO;
                        for b in 0..len {
                            let vb = &vv.row(seg.start + b)[c0..c0 + dh];
                            let mut t = F::ZERO;
                            for c in 0..dh {
                                t += ga[c] * vb[c];
                                sg.v[b * d + c0 + c] += pa[b] * ga[c];
                            }
                            dp[b] = t;
                            s += pa[b] * t;
                        }
                        let qa = &vq.row(seg.start + a)[c0..c0 + dh];
                        for b in 0..len {
                            let de = pa[b] * (dp[b] - s) * scale;
                            if de == F::ZERO {
                                continue;
                            }
                            let r = seg.relation(a, b);
                            let kb = &vk.row(seg.start + b)[c0..c0 + dh];
                            let (bq, bk) = (vrq.row(r), vrk.row(r));
                            for c in 0..dh {
                                let kq = (kb[c] + bk[c]) * de;
                                let qk = (qa[c] + bq[c]) * de;
                                sg.q[a * d + c0 + c] += kq;
                                sg.rq[r * dh + c] += kq;
                                sg.k[b * d + c0 + c] += qk;
                                sg.rk[r * dh + c] += qk;
                            }
                        }
                    }
                }
                sg
            })
            .collect();

        let mut gq = vec![F::ZERO; n * d];
        let mut gk = vec![F::ZERO; n * d];
        let mut gv = vec![F::ZERO; n * d];
        let mut grq = vec![F::ZERO; n_rel * dh];
        let mut grk = vec![F::ZERO; n_rel * dh];
        for (seg, sg) in spec.segments.iter().zip(parts) {
            let range = seg.start * d..(seg.start + seg.len) * d;
            gq[range.clone()].copy_from_slice(&sg.q);
            gk[range.clone()].copy_from_slice(&sg.k);
            gv[range].copy_from_slice(&sg.v);
            for (o, x) in grq.iter_mut().zip(sg.rq) {
                *o += x;
            }
            for (o, x) in grk.iter_mut().zip(sg.rk) {
                *o += x;
            }
        }
        [
            Tensor::from_vec(vq.shape(), gq).expect("attn grad"),
            Tensor::from_vec(vk.shape(), gk).expect("attn grad"),
            Tensor::from_vec(vv.shape(), gv).expect("attn grad"),
            Tensor::from_vec(vrq.shape(), grq).expect("attn grad"),
            Tensor::from_vec(vrk.shape(), grk).expect("attn grad"),
        ]
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let m = row.iter().copied().fold(row[0], Real::max);
    let mut z = F::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

#[inline]
fn gelu<F: Real>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(0.044715) * x * x * x);
    F::of(0.5) * x * (F::ONE + u.tanh())
}

#[inline]
fn gelu_grad<F: Real>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(0.044715) * x * x * x);
    let t = u.tanh();
    let du = F::of(GELU_C) * (F::ONE + F::of(3.0 * 0.044715) * x * x);
    F::of(0.5) * (F::ONE + t) + F::of(0.5) * x * (F::ONE - t * t) * du
}

/// `[n, k] x [k, m]`.
fn mm<F: Real>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; n * m];
    let row = |(i, o): (usize, &mut [F])| {
        let ar = &a[i * k..(i + 1) * k];
        for (l, &x) in ar.iter().enumerate() {
            if x == F::ZERO {
                continue;
            }
            for (oo, &bb) in o.iter_mut().zip(&b[l * m..(l + 1) * m]) {
                *oo += x * bb;
            }
        }
    };
    if n * k * m >= PAR_THRESHOLD {
        out.par_chunks_mut(m.max(1)).enumerate().for_each(row);
    } else {
        out.chunks_mut(m.max(1)).enumerate().for_each(row);
    }
    out
}

/// `[n, m] x [k, m]^T`.
fn mm_nt<F: Real>(a: &[F], b: &[F], n: usize, m: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; n * k];
    let row = |(i, o): (usize, &mut [F])| {
        let ar = &a[i * m..(i + 1) * m];
        for (l, oo) in o.iter_mut().enumerate() {
            let br = &b[l * m..(l + 1) * m];
            *oo = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
        }
    };
    if n * k * m >= PAR_THRESHOLD {
        out.par_chunks_mut(k.max(1)).enumerate().for_each(row);
    } else {
        out.chunks_mut(k.max(1)).enumerate().for_each(row);
    }
    out
}

/// `[n, k]^T x [n, m]`.
fn mm_tn<F: Real>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut at = vec![F::ZERO; k * n];
    for i in 0..n {
        for l in 0..k {
            at[l * n + i] = a[i * k + l];
        }
    }
    mm(&at, b, k, n, m)
}
