//! Task construction for the ten generation settings and iterative decoding.

mod decode;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::layout::{
    derive_relations, sample_relations, AttrKind, AttrStatus, AttrValue, CanvasSpec, Element, Layout, QuantizerConfig,
    RelationConfig,
};
use crate::{Error, Result};

pub use decode::{decode, decode_baselines, decode_confidence_topk, decode_with_callback, DecodeOptions, Trajectory, TrajectoryStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "u-gen")]
    UGen,
    #[serde(rename = "gen-t")]
    GenT,
    #[serde(rename = "gen-ts")]
    GenTS,
    #[serde(rename = "gen-tr")]
    GenTR,
    #[serde(rename = "refinement")]
    Refinement,
    #[serde(rename = "completion")]
    Completion,
    #[serde(rename = "gen-pm")]
    GenPM,
    #[serde(rename = "gen-cm")]
    GenCM,
    #[serde(rename = "gen-pc")]
    GenPC,
    #[serde(rename = "gen-pcm")]
    GenPCM,
}

impl Task {
    pub const ALL: [Task; 10] = [
        Task::UGen,
        Task::GenT,
        Task::GenTS,
        Task::GenTR,
        Task::Refinement,
        Task::Completion,
        Task::GenPM,
        Task::GenCM,
        Task::GenPC,
        Task::GenPCM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::UGen => "u-gen",
            Task::GenT => "gen-t",
            Task::GenTS => "gen-ts",
            Task::GenTR => "gen-tr",
            Task::Refinement => "refinement",
            Task::Completion => "completion",
            Task::GenPM => "gen-pm",
            Task::GenCM => "gen-cm",
            Task::GenPC => "gen-pc",
            Task::GenPCM => "gen-pcm",
        }
    }

    /// Status assignment rule of the task.
    pub fn policy(self) -> StatusPolicy {
        use AttrStatus::{Coarse as C, Missing as M, Precise as P};
        match self {
            Task::UGen => StatusPolicy::Fixed([M, M, M, M, M]),
            Task::GenT | Task::GenTR => StatusPolicy::Fixed([P, M, M, M, M]),
            Task::GenTS => StatusPolicy::Fixed([P, M, M, P, P]),
            Task::Refinement => StatusPolicy::Fixed([P, C, C, C, C]),
            Task::Completion => StatusPolicy::WholeElements,
            Task::GenPM => StatusPolicy::Mixed(vec![P, M]),
            Task::GenCM => StatusPolicy::Mixed(vec![C, M]),
            Task::GenPC => StatusPolicy::Mixed(vec![P, C]),
            Task::GenPCM => StatusPolicy::Mixed(vec![P, C, M]),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown task `{s}`")))
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StatusPolicy {
    /// The same status per attribute kind for every element, in `[c, x, y, w, h]` order.
    Fixed([AttrStatus; 5]),
    /// A random non-empty proper subset of elements is fully precise, the rest missing.
    WholeElements,
    /// Every attribute independently takes a status uniformly from the set.
    Mixed(Vec<AttrStatus>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    /// Share of ordered element pairs whose relation is given (Gen-TR).
    pub relation_fraction: f64,
    /// Std of the normal noise on normalized coordinates for coarse values.
    pub coarse_std: f64,
}

impl TaskSpec {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            relation_fraction: 0.10,
            coarse_std: 0.01,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.relation_fraction) {
            return Err(Error::Validation(format!(
                "relation_fraction must be in [0, 1], got {}",
                self.relation_fraction
            )));
        }
        if !(self.coarse_std >= 0.0 && self.coarse_std.is_finite()) {
            return Err(Error::Validation(format!("coarse_std must be >= 0, got {}", self.coarse_std)));
        }
        Ok(())
    }
}

/// What a task is built from: a reference layout, or only an element count.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    Layout(Layout),
    Count { n: usize, canvas: CanvasSpec },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecodeStrategy {
    #[serde(rename = "confidence-topk")]
    ConfidenceTopK,
    #[serde(rename = "autoregressive")]
    Autoregressive,
    #[serde(rename = "non-autoregressive")]
    NonAutoregressive,
}

impl DecodeStrategy {
    pub const ALL: [DecodeStrategy; 3] = [
        DecodeStrategy::ConfidenceTopK,
        DecodeStrategy::Autoregressive,
        DecodeStrategy::NonAutoregressive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecodeStrategy::ConfidenceTopK => "confidence-topk",
            DecodeStrategy::Autoregressive => "autoregressive",
            DecodeStrategy::NonAutoregressive => "non-autoregressive",
        }
    }
}

impl std::str::FromStr for DecodeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecodeStrategy::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown decoding strategy `{s}`")))
    }
}

/// A layout whose statuses mark what to keep, refine and generate, plus how
/// to decode it.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub layout: Layout,
    pub strategy: DecodeStrategy,
    pub steps: usize,
    pub seed: u64,
    pub temperature: f64,
    pub clamp_conditions: bool,
}

impl GenerationRequest {
    pub fn new(layout: Layout, steps: usize, seed: u64) -> Self {
        Self {
            layout,
            strategy: DecodeStrategy::ConfidenceTopK,
            steps,
            seed,
            temperature: 1.0,
            clamp_conditions: false,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation("steps must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Validation(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.layout.is_empty() {
            return Err(Error::Validation("layout has no elements".into()));
        }
        Ok(())
    }

    /// Number of attributes to generate.
    pub fn n_missing(&self) -> usize {
        self.layout.count_status(AttrStatus::Missing)
    }
}

/// Add `N(0, std)` to every normalized coordinate, re-quantize, and mark the
/// geometry coarse. Categories and relations are untouched.
pub fn synthesize_coarse<R: Rng + ?Sized>(layout: &Layout, quant: &QuantizerConfig, std: f64, rng: &mut R) -> Result<Layout> {
    let noise = Normal::new(0.0, std).map_err(|e| Error::Validation(format!("coarse std {std}: {e}")))?;
    let mut out = layout.clone();
    for (i, e) in out.elements.iter_mut().enumerate() {
        for kind in &AttrKind::ALL[1..] {
            let a = e.get_mut(*kind);
            let bin = a
                .bin
                .ok_or_else(|| Error::Data(format!("element {i} has no {kind} to perturb")))?;
            let top = (quant.bins(*kind) - 1) as f64;
            let v = bin as f64 / top + if std > 0.0 { noise.sample(rng) } else { 0.0 };
            *a = AttrValue::coarse((v * top).round().clamp(0.0, top) as u32);
        }
    }
    Ok(out)
}

fn require(layout: &Layout, task: Task, kinds: &[AttrKind]) -> Result<()> {
    for (i, e) in layout.elements.iter().enumerate() {
        for kind in kinds {
            if e.get(*kind).bin.is_none() {
                return Err(Error::Data(format!("{task} needs {kind} of element {i}")));
            }
        }
    }
    Ok(())
}

fn with_status(v: AttrValue, status: AttrStatus) -> AttrValue {
    match status {
        AttrStatus::Missing => AttrValue::missing(),
        _ => AttrValue { bin: v.bin, status },
    }
}

/// Build the generation input of a task from a source.
pub fn build_task<R: Rng + ?Sized>(
    source: &TaskSource,
    spec: &TaskSpec,
    quant: &QuantizerConfig,
    rng: &mut R,
) -> Result<Layout> {
    spec.check()?;
    let task = spec.task;
    let source = match source {
        TaskSource::Layout(l) => l.clone(),
        TaskSource::Count { n, canvas } => {
            if task != Task::UGen {
                return Err(Error::Data(format!("{task} needs a source layout, not only a count")));
            }
            Layout::new(*canvas, vec![Element::all_missing(); *n])
        }
    };
    if source.is_empty() {
        return Err(Error::Validation("source layout has no elements".into()));
    }
    let n = source.len();
    let mut out = Layout::new(source.canvas, Vec::with_capacity(n));
    match task.policy() {
        StatusPolicy::Fixed(statuses) => {
            let needed: Vec<AttrKind> = AttrKind::ALL
                .into_iter()
                .filter(|k| statuses[k.index()] != AttrStatus::Missing)
                .collect();
            require(&source, task, &needed)?;
            let base = if task == Task::Refinement {
                synthesize_coarse(&source, quant, spec.coarse_std, rng)?
            } else {
                source.clone()
            };
            for e in &base.elements {
                let mut attrs = e.attrs;
                for kind in AttrKind::ALL {
                    attrs[kind.index()] = with_status(attrs[kind.index()], statuses[kind.index()]);
                }
                out.elements.push(Element { attrs });
            }
            if task == Task::GenTR {
                require(&source, task, &AttrKind::ALL)?;
                let full = derive_relations(&source, quant, &RelationConfig::default())?;
                out.relations = sample_relations(&full, n, spec.relation_fraction, rng);
            }
        }
        StatusPolicy::WholeElements => {
            require(&source, task, &AttrKind::ALL)?;
            let size = if n >= 2 { rng.random_range(1..n) } else { 0 };
            let mut keep = vec![false; n];
            for i in sample(rng, n, size) {
                keep[i] = true;
            }
            for (e, k) in source.elements.iter().zip(keep) {
                let status = if k { AttrStatus::Precise } else { AttrStatus::Missing };
                out.elements.push(Element { attrs: e.attrs.map(|a| with_status(a, status)) });
            }
        }
        StatusPolicy::Mixed(allowed) => {
            require(&source, task, &AttrKind::ALL)?;
            let coarse = synthesize_coarse(&source, quant, spec.coarse_std, rng)?;
            for (e, c) in source.elements.iter().zip(&coarse.elements) {
                let mut attrs = e.attrs;
                for kind in AttrKind::ALL {
                    let status = allowed[rng.random_range(0..allowed.len())];
                    let v = if kind == AttrKind::Category || status != AttrStatus::Coarse { e.get(kind) } else { c.get(kind) };
                    attrs[kind.index()] = with_status(v, status);
                }
                out.elements.push(Element { attrs });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn quant() -> QuantizerConfig {
        QuantizerConfig::new(5, 128).unwrap()
    }

    fn source(n: usize) -> Layout {
        Layout::new(
            CanvasSpec::new(100, 100).unwrap(),
            (0..n as u32).map(|i| Element::precise(i % 5, 10 * i, 5 * i, 20, 10 + i)).collect(),
        )
    }

    fn build(task: Task, n: usize, seed: u64) -> Layout {
        build_task(&TaskSource::Layout(source(n)), &TaskSpec::new(task), &quant(), &mut seeded_rng(seed, "t")).unwrap()
    }

    #[test]
    fn gen_t_keeps_only_categories() {
        let l = build(Task::GenT, 3, 0);
        let seq = crate::layout::tokenize(&l, &quant());
        assert_eq!(seq.tokens.iter().filter(|t| t.flag).count(), 3);
        assert_eq!(seq.tokens.iter().filter(|t| t.value == quant().mask(t.kind)).count(), 12);
    }

    #[test]
    fn fixed_policies_set_the_declared_statuses() {
        let ts = build(Task::GenTS, 4, 0);
        for e in &ts.elements {
            let s: Vec<AttrStatus> = e.attrs.iter().map(|a| a.status).collect();
            use AttrStatus::*;
            assert_eq!(s, [Precise, Missing, Missing, Precise, Precise]);
        }
        let ugen = build_task(
            &TaskSource::Count { n: 4, canvas: CanvasSpec::new(10, 10).unwrap() },
            &TaskSpec::new(Task::UGen),
            &quant(),
            &mut seeded_rng(0, "t"),
        )
        .unwrap();
        assert_eq!(ugen.count_status(AttrStatus::Missing), 20);
        let refine = build(Task::Refinement, 4, 0);
        assert_eq!(refine.count_status(AttrStatus::Coarse), 16);
        assert_eq!(refine.count_status(AttrStatus::Precise), 4);
    }

    #[test]
    fn gen_tr_samples_a_tenth_of_pairs() {
        for n in [4, 6, 10] {
            let l = build(Task::GenTR, n, 1);
            assert_eq!(l.relations.len(), ((n * (n - 1)) as f64 * 0.1).round() as usize);
        }
    }

    #[test]
    fn completion_keeps_a_proper_subset_of_whole_elements() {
        for seed in 0..20 {
            let l = build(Task::Completion, 5, seed);
            let kept = l.elements.iter().filter(|e| e.is_complete()).count();
            assert!((1..5).contains(&kept));
            for e in &l.elements {
                assert!(e.is_complete() || e.attrs.iter().all(AttrValue::is_missing));
            }
        }
    }

    #[test]
    fn mixed_tasks_draw_only_permitted_statuses() {
        for task in [Task::GenPM, Task::GenCM, Task::GenPC, Task::GenPCM] {
            let StatusPolicy::Mixed(allowed) = task.policy() else { unreachable!() };
            let mut seen = std::collections::HashSet::new();
            for seed in 0..10 {
                for e in &build(task, 6, seed).elements {
                    for a in &e.attrs {
                        assert!(allowed.contains(&a.status), "{task}: {:?}", a.status);
                        seen.insert(a.status);
                    }
                }
            }
            assert_eq!(seen.len(), allowed.len(), "{task}");
        }
    }

    #[test]
    fn count_source_only_serves_unconditional_generation() {
        let src = TaskSource::Count { n: 3, canvas: CanvasSpec::new(10, 10).unwrap() };
        let err = build_task(&src, &TaskSpec::new(Task::GenT), &quant(), &mut seeded_rng(0, "t")).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let mut partial = source(2);
        partial.elements[1].attrs[3] = AttrValue::missing();
        let err = build_task(&TaskSource::Layout(partial), &TaskSpec::new(Task::GenTS), &quant(), &mut seeded_rng(0, "t"))
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn zero_std_coarsening_keeps_bins() {
        let l = source(3);
        let c = synthesize_coarse(&l, &quant(), 0.0, &mut seeded_rng(0, "c")).unwrap();
        for (a, b) in l.elements.iter().zip(&c.elements) {
            assert_eq!(a.attrs[0], b.attrs[0]);
            for k in 1..5 {
                assert_eq!(a.attrs[k].bin, b.attrs[k].bin);
                assert_eq!(b.attrs[k].status, AttrStatus::Coarse);
            }
        }
        assert_eq!(c.relations, l.relations);
    }

    #[test]
    fn coarse_displacement_matches_the_folded_normal_mean() {
        let q = quant();
        let l = Layout::new(CanvasSpec::new(10, 10).unwrap(), vec![Element::precise(0, 64, 64, 64, 64); 2500]);
        let c = synthesize_coarse(&l, &q, 0.01, &mut seeded_rng(3, "c")).unwrap();
        let disp: f64 = c
            .elements
            .iter()
            .flat_map(|e| e.attrs[1..].iter())
            .map(|a| (a.bin.unwrap() as f64 - 64.0).abs())
            .sum::<f64>()
            / 10_000.0;
        let analytic = 0.01 * (2.0 / std::f64::consts::PI).sqrt() * 127.0;
        assert!((disp - analytic).abs() <= 0.1 * analytic, "{disp} vs {analytic}");
    }

    #[test]
    fn names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
            assert_eq!(serde_json::to_value(t).unwrap(), t.name());
        }
        for d in DecodeStrategy::ALL {
            assert_eq!(d.name().parse::<DecodeStrategy>().unwrap(), d);
        }
    }
}
