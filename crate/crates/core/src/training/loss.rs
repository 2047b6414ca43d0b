use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Batch, Denoiser, Mixture};
use crate::diffusion::{CorruptionPlan, PlanEntry, StackSet, TransitionStack};
use crate::layout::{AttrKind, TokenSequence};
use crate::numerics::{softmax_in_place, Graph, Real, Var};
use crate::{Error, Result};

/// Per-batch loss terms. Every token lands in exactly one of the three
/// cases, and each term is a mean over all tokens of the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_vlb: f64,
    pub l_rec: f64,
    pub l_total: f64,
    /// `KL(q(x_T | x_0) || p(x_T))` over selected tokens; constant in the
    /// parameters and reported only.
    pub l_prior: f64,
    /// Unselected tokens (`t = 0`).
    pub n_rec: usize,
    /// Tokens at `t = 1`.
    pub n_first: usize,
    /// Tokens at `t > 1`.
    pub n_kl: usize,
}

impl LossBreakdown {
    pub fn n_tokens(&self) -> usize {
        self.n_rec + self.n_first + self.n_kl
    }
}

/// Supervision for one flattened token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub kind: AttrKind,
    pub clean: usize,
    pub observed: usize,
    pub entry: PlanEntry,
}

/// Line up clean tokens, corrupted tokens and plan entries.
pub fn targets(clean: &TokenSequence, corrupted: &TokenSequence, plan: &CorruptionPlan, stacks: &StackSet) -> Result<Vec<Target>> {
    if clean.len() != corrupted.len() || plan.len() != clean.len() {
        return Err(Error::Shape(format!(
            "clean {} / corrupted {} / plan {} lengths differ",
            clean.len(),
            corrupted.len(),
            plan.len()
        )));
    }
    clean
        .tokens
        .iter()
        .zip(&corrupted.tokens)
        .zip(&plan.entries)
        .map(|((c, x), &entry)| {
            let k = stacks.get(c.kind).k();
            if c.value as usize >= k {
                return Err(Error::Data(format!(
                    "element {} has no ground-truth {} value",
                    c.element, c.kind
                )));
            }
            if entry.t > stacks.t_max() {
                return Err(Error::Domain(format!("plan timestep {} exceeds T", entry.t)));
            }
            Ok(Target {
                kind: c.kind,
                clean: c.value as usize,
                observed: x.value as usize,
                entry,
            })
        })
        .collect()
}

/// Unweighted loss of one token and its gradient with respect to the logits
/// whose softmax is `p`.
pub fn token_loss(p: &[f64], target: &Target, stack: &TransitionStack) -> Result<(f64, Vec<f64>)> {
    if !target.entry.selected || target.entry.t == 0 {
        let loss = -p[target.clean].max(f64::MIN_POSITIVE).ln();
        let mut grad = p.to_vec();
        grad[target.clean] -= 1.0;
        return Ok((loss, grad));
    }
    let t = target.entry.t;
    let q = stack.posterior(target.observed, target.clean, t)?;
    let mix = Mixture::new(p, target.observed, t, stack)?;
    let (kl, gp) = mix.kl_and_grad(&q, stack);
    let dot: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
    let grad = p.iter().zip(&gp).map(|(pi, gi)| pi * (gi - dot)).collect();
    Ok((kl, grad))
}

fn kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b.max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// Marginal of `x_T` under a uniform clean value.
fn prior(stack: &TransitionStack) -> Vec<f64> {
    let k = stack.k();
    let qt = stack.cumulative(stack.t_max());
    (0..=k)
        .map(|i| (0..k).map(|j| qt.get(i, j)).sum::<f64>() / k as f64)
        .collect()
}

struct Accumulator {
    raw: Vec<f64>,
    error: Option<Error>,
}

fn finish(targets: &[Target], raw: &[f64], stacks: &StackSet, lambda: f64) -> LossBreakdown {
    let n = targets.len().max(1) as f64;
    let priors: Vec<Vec<f64>> = AttrKind::ALL.iter().map(|&k| prior(stacks.get(k))).collect();
    let mut out = LossBreakdown::default();
    let (mut vlb, mut rec, mut pr) = (0.0, 0.0, 0.0);
    for (tg, &l) in targets.iter().zip(raw) {
        match tg.entry.t {
            0 => {
                out.n_rec += 1;
                rec += l;
            }
            1 => {
                out.n_first += 1;
                vlb += l;
            }
            _ => {
                out.n_kl += 1;
                vlb += l;
            }
        }
        if tg.entry.t > 0 {
            let stack = stacks.get(tg.kind);
            let marginal = stack.cumulative(stack.t_max()).column(tg.clean);
            pr += kl(&marginal, &priors[tg.kind.index()]);
        }
    }
    out.l_vlb = vlb / n;
    out.l_rec = rec / n;
    out.l_total = out.l_vlb + lambda * out.l_rec;
    out.l_prior = pr / n;
    out
}

/// Loss of a batch given the denoiser's clean-value probabilities.
pub fn compute_loss(
    clean: &TokenSequence,
    corrupted: &TokenSequence,
    plan: &CorruptionPlan,
    probs: &[Vec<f64>],
    stacks: &StackSet,
    lambda: f64,
) -> Result<LossBreakdown> {
    let targets = targets(clean, corrupted, plan, stacks)?;
    if probs.len() != targets.len() {
        return Err(Error::Shape(format!("{} outputs for {} tokens", probs.len(), targets.len())));
    }
    let raw = targets
        .iter()
        .zip(probs)
        .map(|(tg, p)| token_loss(p, tg, stacks.get(tg.kind)).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(&targets, &raw, stacks, lambda))
}

/// Record the forward pass and the loss of a batch; the returned scalar is
/// `l_total`.
pub fn loss_on_graph<F: Real>(
    g: &mut Graph<'_, F>,
    model: &Denoiser<F>,
    batch: &Batch,
    targets: &[Target],
    stacks: &StackSet,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    if targets.len() != batch.len() {
        return Err(Error::Shape(format!("{} targets for {} tokens", targets.len(), batch.len())));
    }
    let out = model.forward(g, batch);
    let n = batch.len() as f64;
    let acc = Mutex::new(Accumulator {
        raw: vec![0.0; batch.len()],
        error: None,
    });
    let mut total: Option<Var> = None;
    for kind in AttrKind::ALL {
        let Some(logits) = out.logits[kind.index()] else { continue };
        let rows = batch.kind_rows(kind);
        let stack = stacks.get(kind);
        let f = |r: usize, z: &[f64]| {
            let i = rows[r];
            let tg = &targets[i];
            let mut p = z.to_vec();
            softmax_in_place(&mut p);
            match token_loss(&p, tg, stack) {
                Ok((l, grad)) => {
                    acc.lock().expect("loss accumulator").raw[i] = l;
                    let w = if tg.entry.t == 0 { lambda } else { 1.0 } / n;
                    (w * l, grad.into_iter().map(|v| w * v).collect())
                }
                Err(e) => {
                    acc.lock().expect("loss accumulator").error.get_or_insert(e);
                    (0.0, vec![0.0; z.len()])
                }
            }
        };
        let l = g.row_loss(logits, &f);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    let acc = acc.into_inner().expect("loss accumulator");
    if let Some(e) = acc.error {
        return Err(e);
    }
    let loss = total.ok_or_else(|| Error::Shape("empty batch".into()))?;
    Ok((loss, finish(targets, &acc.raw, stacks, lambda)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{NoiseAssignment, Schedule};
    use crate::layout::QuantizerConfig;

    fn stacks(k_c: u32, k_g: u32, t_max: usize) -> StackSet {
        let sched = Schedule {
            t_max,
            beta_end: 0.3,
            sigma_end: 0.2,
            gamma_end: 0.4,
        };
        StackSet::build(&NoiseAssignment::default(), &sched, &QuantizerConfig::new(k_c, k_g).unwrap()).unwrap()
    }

    fn target(clean: usize, observed: usize, t: usize) -> Target {
        Target {
            kind: AttrKind::Category,
            clean,
            observed,
            entry: PlanEntry { selected: t > 0, t },
        }
    }

    #[test]
    fn one_hot_output_zeroes_the_first_step_term() {
        let s = stacks(5, 8, 4);
        let stack = s.get(AttrKind::Category);
        for observed in 0..=5 {
            let mut p = vec![0.0; 5];
            p[2] = 1.0;
            if stack.cumulative(1).get(observed, 2) == 0.0 {
                continue;
            }
            let (l, _) = token_loss(&p, &target(2, observed, 1), stack).unwrap();
            assert!(l.abs() < 1e-6);
        }
    }

    #[test]
    fn exact_posterior_output_zeroes_the_kl_term() {
        let s = stacks(5, 8, 4);
        let stack = s.get(AttrKind::Category);
        let mut p = vec![0.0; 5];
        p[3] = 1.0;
        for t in 2..=4 {
            for observed in [3, 5, 1] {
                let (l, _) = token_loss(&p, &target(3, observed, t), stack).unwrap();
                assert!(l.abs() < 1e-8, "{t} {observed}: {l}");
            }
        }
    }

    #[test]
    fn single_token_loss_matches_enumerated_bound() {
        // K = 3, T = 3: the KL term by explicit Bayes over paths.
        let s = stacks(3, 4, 3);
        let stack = s.get(AttrKind::Category);
        let p = [0.5, 0.3, 0.2];
        let (x0, x_t, t) = (1, 3, 3);
        let step = |a: usize, b: usize, tt: usize| stack.step(tt).get(a, b);
        let mut q = [0.0; 4];
        let mut r = [0.0; 4];
        for prev in 0..4 {
            // q(x_2 = prev | x_3, x_0) by summing over x_1
            let joint = |z: usize| -> f64 { (0..4).map(|x1| step(x1, z, 1) * step(prev, x1, 2)).sum::<f64>() * step(x_t, prev, 3) };
            q[prev] = joint(x0);
            for (z, &pz) in p.iter().enumerate() {
                let norm: f64 = (0..4).map(|pp| (0..4).map(|x1| step(x1, z, 1) * step(pp, x1, 2)).sum::<f64>() * step(x_t, pp, 3)).sum();
                r[prev] += pz * joint(z) / norm;
            }
        }
        let zq: f64 = q.iter().sum();
        let want: f64 = (0..4).filter(|&k| q[k] > 0.0).map(|k| q[k] / zq * ((q[k] / zq) / r[k]).ln()).sum();
        let (got, _) = token_loss(&p, &target(x0, x_t, t), stack).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let s = stacks(5, 8, 4);
        let stack = s.get(AttrKind::Category);
        let z = [0.3, -0.2, 0.9, 0.1, -1.0];
        for tg in [target(1, 4, 3), target(2, 5, 4), target(0, 0, 1), target(3, 3, 0)] {
            let f = |z: &[f64]| {
                let mut p = z.to_vec();
                softmax_in_place(&mut p);
                token_loss(&p, &tg, stack).unwrap()
            };
            let (_, grad) = f(&z);
            for i in 0..5 {
                let mut hi = z;
                hi[i] += 1e-6;
                let mut lo = z;
                lo[i] -= 1e-6;
                let num = (f(&hi).0 - f(&lo).0) / 2e-6;
                assert!((num - grad[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lambda_zero_drops_the_reconstruction_term() {
        let s = stacks(5, 8, 4);
        let targets = vec![target(1, 1, 0), target(2, 5, 3), target(0, 0, 1)];
        let raw = vec![0.7, 0.2, 0.4];
        let b = finish(&targets, &raw, &s, 0.0);
        assert_eq!(b.l_total, b.l_vlb);
        assert_eq!((b.n_rec, b.n_first, b.n_kl), (1, 1, 1));
        let b = finish(&targets, &raw, &s, 0.1);
        assert!((b.l_total - (b.l_vlb + 0.1 * b.l_rec)).abs() < 1e-12);
    }
}
