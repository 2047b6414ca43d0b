use rand::Rng;

use super::{DecodeStrategy, GenerationRequest};
use crate::denoiser::{Denoiser, Mixture};
use crate::diffusion::StackSet;
use crate::layout::{AttrKind, AttrStatus, AttrValue, AttributeToken, Element, Layout, TokenSequence, ATTRS_PER_ELEMENT};
use crate::numerics::seeded_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Keep committed values fixed instead of re-sampling them.
    pub freeze_on_commit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    /// Loop index, counting down from the number of steps to 1.
    pub step: usize,
    /// Diffusion timestep used for the reverse mixture.
    pub t: usize,
    pub layout: Layout,
    /// Missing attributes committed for the first time at this step.
    pub committed: Vec<(usize, AttrKind)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn first_commit_count(&self) -> usize {
        self.steps.iter().map(|s| s.committed.len()).sum()
    }
}

/// Draw from `q` sharpened by `1 / temperature`; temperature 0 is argmax
/// with ties to the lowest index.
fn sample_index<R: Rng + ?Sized>(q: &[f64], temperature: f64, rng: &mut R) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in q.iter().enumerate() {
            if v > q[best] {
                best = i;
            }
        }
        return best;
    }
    let max_log = q.iter().filter(|&&v| v > 0.0).map(|v| v.ln()).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = q
        .iter()
        .map(|&v| if v > 0.0 { ((v.ln() - max_log) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        if wi > 0.0 {
            if u < wi {
                return i;
            }
            u -= wi;
        }
    }
    w.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

/// The reverse distribution over clean values (MASK excluded) for a token
/// currently holding `x_t`.
fn reverse_clean(p: &[f64], x_t: usize, t: usize, stacks: &StackSet, kind: AttrKind) -> Vec<f64> {
    let stack = stacks.get(kind);
    let k = stack.k();
    let mixture = match Mixture::new(p, x_t, t, stack) {
        Ok(m) => m,
        Err(_) => return p.to_vec(),
    };
    let mass: f64 = mixture.dist[..k].iter().sum();
    if !(mass > 0.0) {
        return p.to_vec();
    }
    mixture.dist[..k].iter().map(|v| v / mass).collect()
}

struct DecodeState {
    kinds: Vec<AttrKind>,
    inputs: Vec<AttrValue>,
    values: Vec<Option<u32>>,
    /// Originally missing and committed at least once.
    committed: Vec<bool>,
}

impl DecodeState {
    fn new(layout: &Layout) -> Self {
        let inputs: Vec<AttrValue> = layout.elements.iter().flat_map(|e| e.attrs).collect();
        Self {
            kinds: (0..inputs.len()).map(|i| AttrKind::ALL[i % ATTRS_PER_ELEMENT]).collect(),
            values: inputs.iter().map(|a| a.bin).collect(),
            committed: vec![false; inputs.len()],
            inputs,
        }
    }

    fn is_open(&self, i: usize) -> bool {
        self.inputs[i].status == AttrStatus::Missing && !self.committed[i]
    }

    fn sequence(&self, layout: &Layout, stacks: &StackSet) -> TokenSequence {
        let tokens = (0..self.values.len())
            .map(|i| AttributeToken {
                element: i / ATTRS_PER_ELEMENT,
                kind: self.kinds[i],
                value: self.values[i].unwrap_or(stacks.get(self.kinds[i]).mask() as u32),
                flag: self.inputs[i].status == AttrStatus::Precise,
            })
            .collect();
        TokenSequence { tokens, relations: layout.relations.clone() }
    }

    fn layout(&self, source: &Layout, finished: bool) -> Layout {
        let elements = self
            .values
            .chunks(ATTRS_PER_ELEMENT)
            .zip(self.inputs.chunks(ATTRS_PER_ELEMENT))
            .map(|(vals, ins)| {
                let mut attrs = [AttrValue::missing(); ATTRS_PER_ELEMENT];
                for (a, (v, input)) in attrs.iter_mut().zip(vals.iter().zip(ins)) {
                    *a = match v {
                        None => AttrValue::missing(),
                        Some(b) if !finished && input.status == AttrStatus::Coarse => AttrValue::coarse(*b),
                        Some(b) => AttrValue::precise(*b),
                    };
                }
                Element { attrs }
            })
            .collect();
        Layout { canvas: source.canvas, elements, relations: source.relations.clone() }
    }
}

/// Decode a request with the strategy it names.
pub fn decode(
    req: &GenerationRequest,
    model: &Denoiser<f32>,
    stacks: &StackSet,
    opts: DecodeOptions,
) -> Result<(Layout, Trajectory)> {
    decode_with_callback(req, model, stacks, opts, &mut |_| {})
}

/// [`decode`], calling `on_step` as soon as each step is done.
pub fn decode_with_callback(
    req: &GenerationRequest,
    model: &Denoiser<f32>,
    stacks: &StackSet,
    opts: DecodeOptions,
    on_step: &mut dyn FnMut(&TrajectoryStep),
) -> Result<(Layout, Trajectory)> {
    req.check()?;
    for kind in AttrKind::ALL {
        if stacks.get(kind).k() != model.cfg.vocab(kind) {
            return Err(Error::Shape(format!(
                "{kind}: transition stack has {} values, model {}",
                stacks.get(kind).k(),
                model.cfg.vocab(kind)
            )));
        }
    }
    let n_m = req.n_missing();
    let n_steps = match req.strategy {
        DecodeStrategy::Autoregressive => req.steps.max(n_m),
        _ => req.steps,
    };
    let k_per_step = n_m.div_ceil(req.steps);
    let t_max = stacks.t_max();
    let mut rng = seeded_rng(req.seed, "decode");
    let mut state = DecodeState::new(&req.layout);
    let mut trajectory = Trajectory::default();

    for step in (1..=n_steps).rev() {
        let t = (step * t_max).div_ceil(n_steps).clamp(1, t_max);
        let seq = state.sequence(&req.layout, stacks);
        let probs = model
            .predict(std::slice::from_ref(&seq))?
            .pop()
            .expect("one output per sequence")
            .probs;
        let mut proposals: Vec<(usize, u32, f64)> = Vec::new();
        for (i, p) in probs.iter().enumerate() {
            let kind = state.kinds[i];
            let frozen = opts.freeze_on_commit && state.committed[i];
            if frozen {
                continue;
            }
            let x_t = seq.tokens[i].value as usize;
            let q = reverse_clean(p, x_t, t, stacks, kind);
            let v = sample_index(&q, req.temperature, &mut rng);
            if state.is_open(i) {
                proposals.push((i, v as u32, q[v]));
            } else if req.clamp_conditions && state.inputs[i].status == AttrStatus::Precise {
                state.values[i] = state.inputs[i].bin;
            } else {
                state.values[i] = Some(v as u32);
            }
        }
        let keep = match req.strategy {
            DecodeStrategy::ConfidenceTopK => k_per_step.min(proposals.len()),
            DecodeStrategy::Autoregressive => proposals.len().min(1),
            DecodeStrategy::NonAutoregressive => proposals.len(),
        };
        if req.strategy == DecodeStrategy::ConfidenceTopK {
            proposals.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        }
        let mut committed = Vec::with_capacity(keep);
        for &(i, v, _) in &proposals[..keep] {
            state.values[i] = Some(v);
            state.committed[i] = true;
            committed.push((i / ATTRS_PER_ELEMENT, state.kinds[i]));
        }
        committed.sort_unstable();
        let record = TrajectoryStep {
            step,
            t,
            layout: state.layout(&req.layout, false),
            committed,
        };
        on_step(&record);
        trajectory.steps.push(record);
    }

    if let Some(i) = (0..state.values.len()).find(|&i| state.values[i].is_none()) {
        return Err(Error::Invariant(format!(
            "attribute {} of element {} is still masked after {n_steps} steps",
            state.kinds[i],
            i / ATTRS_PER_ELEMENT
        )));
    }
    Ok((state.layout(&req.layout, true), trajectory))
}

/// Confidence top-k decoding regardless of the strategy the request names.
pub fn decode_confidence_topk(req: &GenerationRequest, model: &Denoiser<f32>, stacks: &StackSet) -> Result<(Layout, Trajectory)> {
    let req = GenerationRequest { strategy: DecodeStrategy::ConfidenceTopK, ..req.clone() };
    decode(&req, model, stacks, DecodeOptions::default())
}

/// The autoregressive or non-autoregressive baseline.
pub fn decode_baselines(
    req: &GenerationRequest,
    model: &Denoiser<f32>,
    stacks: &StackSet,
    strategy: DecodeStrategy,
) -> Result<Layout> {
    if strategy == DecodeStrategy::ConfidenceTopK {
        return Err(Error::Validation("confidence-topk is not a baseline strategy".into()));
    }
    let req = GenerationRequest { strategy, ..req.clone() };
    decode(&req, model, stacks, DecodeOptions::default()).map(|(l, _)| l)
}
