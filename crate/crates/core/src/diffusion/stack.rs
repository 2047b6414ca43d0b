use std::sync::Arc;

use rand::Rng;

use super::{build_transition_matrix, NoiseAssignment, NoiseType, Schedule, TransitionMatrix};
use crate::layout::{AttrKind, QuantizerConfig};
use crate::numerics::rng::sample_categorical;
use crate::{Error, Result};

/// Single-step matrices `Q_1..Q_T` and their cumulative products
/// `Qbar_t = Q_t * Qbar_{t-1}`, `Qbar_0 = I`.
#[derive(Debug, Clone)]
pub struct TransitionStack {
    steps: Vec<TransitionMatrix>,
    cumulative: Vec<TransitionMatrix>,
}

impl TransitionStack {
    /// Accumulate a sequence of one-step matrices.
    pub fn accumulate(steps: Vec<TransitionMatrix>) -> Result<Self> {
        let first = steps
            .first()
            .ok_or_else(|| Error::Shape("need at least one transition matrix".into()))?;
        let k = first.k();
        let mut cumulative = Vec::with_capacity(steps.len() + 1);
        cumulative.push(TransitionMatrix::identity(k));
        for q in &steps {
            let prev = cumulative.last().expect("seeded with identity");
            cumulative.push(q.matmul(prev)?);
        }
        Ok(Self { steps, cumulative })
    }

    pub fn build(noise: NoiseType, sched: &Schedule, k: usize) -> Result<Self> {
        sched.check()?;
        let steps = (1..=sched.t_max)
            .map(|t| build_transition_matrix(noise, t, sched, k))
            .collect::<Result<Vec<_>>>()?;
        Self::accumulate(steps)
    }

    pub fn k(&self) -> usize {
        self.steps[0].k()
    }

    pub fn mask(&self) -> usize {
        self.k()
    }

    pub fn t_max(&self) -> usize {
        self.steps.len()
    }

    /// `Q_t` for `t` in `[1, T]`.
    pub fn step(&self, t: usize) -> &TransitionMatrix {
        &self.steps[t - 1]
    }

    /// `Qbar_t` for `t` in `[0, T]`.
    pub fn cumulative(&self, t: usize) -> &TransitionMatrix {
        &self.cumulative[t]
    }

    fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.t_max() {
            return Err(Error::Domain(format!(
                "timestep {t} outside [{min}, {}]",
                self.t_max()
            )));
        }
        Ok(())
    }

    fn check_clean(&self, x0: usize) -> Result<()> {
        if x0 >= self.k() {
            return Err(Error::Domain(format!(
                "clean value {x0} must be below K = {} (MASK is never clean)",
                self.k()
            )));
        }
        Ok(())
    }

    /// `q(x_t | x_0)`: column `x0` of `Qbar_t`.
    pub fn forward_marginal(&self, x0: usize, t: usize) -> Result<Vec<f64>> {
        self.check_clean(x0)?;
        self.check_t(t, 0)?;
        Ok(self.cumulative[t].column(x0))
    }

    pub fn sample_forward<R: Rng + ?Sized>(&self, x0: usize, t: usize, rng: &mut R) -> Result<usize> {
        let p = self.forward_marginal(x0, t)?;
        Ok(sample_categorical(&p, rng))
    }

    /// `q(x_{t-1} | x_t, x_0) = Q_t[x_t, k] Qbar_{t-1}[k, x_0] / Qbar_t[x_t, x_0]`.
    pub fn posterior(&self, x_t: usize, x0: usize, t: usize) -> Result<Vec<f64>> {
        self.check_clean(x0)?;
        self.check_t(t, 1)?;
        if x_t > self.mask() {
            return Err(Error::Domain(format!("value {x_t} outside [0, K]")));
        }
        let denom = self.cumulative[t].get(x_t, x0);
        if denom <= 0.0 {
            return Err(Error::ImpossibleTransition(format!(
                "q(x_{t} = {x_t} | x_0 = {x0}) is zero"
            )));
        }
        let q_row = self.steps[t - 1].row(x_t);
        let prev = &self.cumulative[t - 1];
        let mut out: Vec<f64> = (0..=self.k()).map(|k| q_row[k] * prev.get(k, x0)).collect();
        let total: f64 = out.iter().sum();
        if total <= 0.0 {
            return Err(Error::ImpossibleTransition(format!(
                "no path from x_0 = {x0} to x_{t} = {x_t}"
            )));
        }
        for v in &mut out {
            *v /= total;
        }
        Ok(out)
    }
}

/// One shared transition stack per attribute kind.
#[derive(Debug, Clone)]
pub struct StackSet {
    stacks: [Arc<TransitionStack>; 5],
}

impl StackSet {
    pub fn build(noise: &NoiseAssignment, sched: &Schedule, quant: &QuantizerConfig) -> Result<Self> {
        let mut built: Vec<((NoiseType, u32), Arc<TransitionStack>)> = Vec::new();
        let mut stacks = Vec::with_capacity(5);
        for kind in AttrKind::ALL {
            let key = (noise.for_kind(kind), quant.bins(kind));
            let stack = match built.iter().find(|(k, _)| *k == key) {
                Some((_, s)) => s.clone(),
                None => {
                    let s = Arc::new(TransitionStack::build(key.0, sched, key.1 as usize)?);
                    built.push((key, s.clone()));
                    s
                }
            };
            stacks.push(stack);
        }
        Ok(Self {
            stacks: stacks.try_into().expect("five kinds"),
        })
    }

    pub fn get(&self, kind: AttrKind) -> &Arc<TransitionStack> {
        &self.stacks[kind.index()]
    }

    pub fn t_max(&self) -> usize {
        self.stacks[0].t_max()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn stack(k: usize, t: usize, noise: NoiseType) -> TransitionStack {
        TransitionStack::build(noise, &Schedule::with_steps(t), k).unwrap()
    }

    #[test]
    fn first_cumulative_equals_first_step() {
        let s = stack(5, 4, NoiseType::DiscretizedGaussian);
        assert_eq!(s.cumulative(1), s.step(1));
        assert_eq!(s.cumulative(0), &TransitionMatrix::identity(5));
    }

    #[test]
    fn two_step_product_matches_path_enumeration() {
        let sched = Schedule {
            t_max: 2,
            beta_end: 0.6,
            sigma_end: 0.5,
            gamma_end: 0.3,
        };
        let s = TransitionStack::build(NoiseType::Uniform, &sched, 3).unwrap();
        for x0 in 0..4 {
            for x2 in 0..4 {
                let brute: f64 = (0..4).map(|x1| s.step(2).get(x2, x1) * s.step(1).get(x1, x0)).sum();
                assert!((brute - s.cumulative(2).get(x2, x0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_size_cumulative_stays_stochastic() {
        let s = stack(128, 100, NoiseType::DiscretizedGaussian);
        assert!(s.cumulative(100).max_column_sum_error() < 1e-8);
    }

    #[test]
    fn marginal_at_zero_is_one_hot_and_mask_mass_is_monotone() {
        for noise in NoiseType::ALL {
            let s = stack(8, 10, noise);
            for x0 in 0..8 {
                let p0 = s.forward_marginal(x0, 0).unwrap();
                assert_eq!(p0[x0], 1.0);
                assert_eq!(p0.iter().sum::<f64>(), 1.0);
                let mut last = 0.0;
                for t in 0..=10 {
                    let m = s.forward_marginal(x0, t).unwrap()[8];
                    assert!(m >= last);
                    last = m;
                }
            }
        }
    }

    #[test]
    fn mask_is_not_a_clean_value() {
        let s = stack(4, 3, NoiseType::Uniform);
        assert!(matches!(s.forward_marginal(4, 1), Err(Error::Domain(_))));
        assert!(matches!(s.posterior(0, 4, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_degenerate_cases_hold() {
        let s = stack(6, 5, NoiseType::DiscretizedGaussian);
        let draw = |seed| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| s.sample_forward(3, 5, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        assert!((0..100).all(|_| s.sample_forward(3, 0, &mut rng).unwrap() == 3));

        let forced = Schedule {
            t_max: 1,
            beta_end: 0.0,
            sigma_end: 0.0,
            gamma_end: 1.0,
        };
        let s = TransitionStack::build(NoiseType::Uniform, &forced, 6).unwrap();
        assert!((0..100).all(|_| s.sample_forward(2, 1, &mut rng).unwrap() == 6));
    }

    #[test]
    fn posterior_at_first_step_is_delta_at_x0() {
        let s = stack(5, 3, NoiseType::Uniform);
        for x_t in 0..=5 {
            let p = s.posterior(x_t, 2, 1).unwrap();
            assert!((p[2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_support_is_within_step_row_support() {
        let s = stack(12, 5, NoiseType::BandDiagonal(Some(1)));
        for t in 1..=5 {
            for x0 in 0..12 {
                for x_t in 0..=12 {
                    if let Ok(p) = s.posterior(x_t, x0, t) {
                        for (k, &v) in p.iter().enumerate() {
                            if s.step(t).get(x_t, k) == 0.0 {
                                assert_eq!(v, 0.0);
                            }
                        }
                        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn unreachable_posterior_is_an_error() {
        let s = stack(12, 2, NoiseType::BandDiagonal(Some(1)));
        assert!(matches!(s.posterior(11, 0, 1), Err(Error::ImpossibleTransition(_))));
    }

    /// Joint probability of a full path `x_0 -> x_1 -> ... -> x_T`.
    fn path_prob(s: &TransitionStack, x0: usize, path: &[usize]) -> f64 {
        let mut prev = x0;
        let mut p = 1.0;
        for (i, &x) in path.iter().enumerate() {
            p *= s.step(i + 1).get(x, prev);
            prev = x;
        }
        p
    }

    fn enumerate_paths(dim: usize, len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..len {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..dim).map(move |x| {
                        let mut q = p.clone();
                        q.push(x);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn posterior_matches_bayes_over_enumerated_paths() {
        let sched = Schedule {
            t_max: 3,
            beta_end: 0.5,
            sigma_end: 0.3,
            gamma_end: 0.4,
        };
        let s = TransitionStack::build(NoiseType::Uniform, &sched, 2).unwrap();
        let paths = enumerate_paths(3, 3);
        for x0 in 0..2 {
            for t in 1..=3 {
                for x_t in 0..3 {
                    let mut joint = [0.0; 3];
                    for p in &paths {
                        if p[t - 1] != x_t {
                            continue;
                        }
                        let prev = if t == 1 { x0 } else { p[t - 2] };
                        joint[prev] += path_prob(&s, x0, p);
                    }
                    let z: f64 = joint.iter().sum();
                    let post = s.posterior(x_t, x0, t).unwrap();
                    for k in 0..3 {
                        assert!((post[k] - joint[k] / z).abs() < 1e-10, "{x0} {t} {x_t}");
                    }
                }
            }
        }
    }

    #[test]
    fn chained_one_step_samples_match_cumulative_column() {
        let s = stack(6, 5, NoiseType::DiscretizedGaussian);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = [0usize; 7];
        for _ in 0..n {
            let mut x = 2;
            for t in 1..=5 {
                x = sample_categorical(&s.step(t).column(x), &mut rng);
            }
            counts[x] += 1;
        }
        let exact = s.forward_marginal(2, 5).unwrap();
        let tv: f64 = 0.5
            * counts
                .iter()
                .zip(&exact)
                .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
                .sum::<f64>();
        assert!(tv <= 0.02, "{tv}");
    }

    #[test]
    fn stack_set_shares_identical_geometry_stacks() {
        let quant = QuantizerConfig::new(5, 16).unwrap();
        let set = StackSet::build(&NoiseAssignment::default(), &Schedule::with_steps(4), &quant).unwrap();
        assert!(Arc::ptr_eq(set.get(AttrKind::X), set.get(AttrKind::H)));
        assert_eq!(set.get(AttrKind::Category).k(), 5);
        assert_eq!(set.t_max(), 4);
    }
}
