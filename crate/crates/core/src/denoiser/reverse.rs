use crate::diffusion::TransitionStack;
use crate::{Error, Result};

/// Floor applied to mixture mass where the target posterior is positive,
/// so an underflowed prediction yields a large finite loss.
const MASS_FLOOR: f64 = 1e-300;

/// `p_theta(x_{t-1} | x_t)` as a mixture of analytic posteriors weighted by
/// the predicted clean distribution. Clean values that cannot reach `x_t`
/// are dropped and the remaining weights renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub x_t: usize,
    pub t: usize,
    /// Normalized reverse distribution over `K + 1` values.
    pub dist: Vec<f64>,
    /// Unnormalized mixture mass `u_k`.
    unnorm: Vec<f64>,
    /// `D_j = sum_k Q_t[x_t, k] Qbar_{t-1}[k, j]`, zero for impossible `j`.
    denom: Vec<f64>,
    /// Predicted mass on possible clean values.
    support: f64,
}

impl Mixture {
    pub fn new(p_x0: &[f64], x_t: usize, t: usize, stack: &TransitionStack) -> Result<Self> {
        let k = stack.k();
        if p_x0.len() != k {
            return Err(Error::Shape(format!("expected {k} clean probabilities, got {}", p_x0.len())));
        }
        if x_t > k || t == 0 || t > stack.t_max() {
            return Err(Error::Domain(format!("x_t = {x_t}, t = {t} outside the chain")));
        }
        let q_row = stack.step(t).row(x_t);
        let prev = stack.cumulative(t - 1);
        let mut denom = vec![0.0; k];
        for (kk, &q) in q_row.iter().enumerate() {
            if q == 0.0 {
                continue;
            }
            for (j, d) in denom.iter_mut().enumerate() {
                *d += q * prev.get(kk, j);
            }
        }
        let support: f64 = p_x0.iter().zip(&denom).filter(|(_, &d)| d > 0.0).map(|(p, _)| p).sum();
        if support <= 0.0 {
            return Err(Error::Degenerate(format!(
                "no predicted clean value can reach x_{t} = {x_t}"
            )));
        }
        let mut unnorm = vec![0.0; k + 1];
        for (kk, u) in unnorm.iter_mut().enumerate() {
            let q = q_row[kk];
            if q == 0.0 {
                continue;
            }
            let prev_row = prev.row(kk);
            let mut acc = 0.0;
            for j in 0..k {
                if denom[j] > 0.0 && prev_row[j] != 0.0 {
                    acc += prev_row[j] * p_x0[j] / denom[j];
                }
            }
            *u = q * acc;
        }
        let dist = unnorm.iter().map(|u| u / support).collect();
        Ok(Self {
            x_t,
            t,
            dist,
            unnorm,
            denom,
            support,
        })
    }

    /// `KL(q || p_theta)` and its gradient with respect to the clean
    /// probabilities that produced this mixture.
    pub fn kl_and_grad(&self, q: &[f64], stack: &TransitionStack) -> (f64, Vec<f64>) {
        let k = stack.k();
        let q_row = stack.step(self.t).row(self.x_t);
        let prev = stack.cumulative(self.t - 1);
        let mut kl = 0.0;
        // w_k = q_k / u_k, the only factor of the gradient that depends on k
        let mut w = vec![0.0; k + 1];
        for kk in 0..=k {
            if q[kk] > 0.0 {
                let u = self.unnorm[kk].max(MASS_FLOOR);
                kl += q[kk] * (q[kk] * self.support / u).ln();
                w[kk] = q[kk] / u * q_row[kk];
            }
        }
        let inv_s = 1.0 / self.support;
        let mut grad = vec![0.0; k];
        for (kk, &wk) in w.iter().enumerate() {
            if wk == 0.0 {
                continue;
            }
            let prev_row = prev.row(kk);
            for j in 0..k {
                if self.denom[j] > 0.0 {
                    grad[j] -= wk * prev_row[j];
                }
            }
        }
        for j in 0..k {
            if self.denom[j] > 0.0 {
                grad[j] = grad[j] / self.denom[j] + inv_s;
            }
        }
        (kl.max(0.0), grad)
    }
}

/// Reverse one step from `x_t` given a predicted clean distribution.
pub fn reverse_distribution(p_x0: &[f64], x_t: usize, t: usize, stack: &TransitionStack) -> Result<Vec<f64>> {
    Mixture::new(p_x0, x_t, t, stack).map(|m| m.dist)
}
