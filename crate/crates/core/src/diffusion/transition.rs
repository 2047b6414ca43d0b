use super::{NoiseType, Schedule};
use crate::{Error, Result};

/// A `(K+1) x (K+1)` column-stochastic matrix, stored row-major. Index `K`
/// is the absorbing MASK state.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    k: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(k: usize) -> Self {
        let n = k + 1;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { k, data }
    }

    /// Wrap raw row-major data; used by tests and by `accumulate`.
    pub fn from_rows(k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != (k + 1) * (k + 1) {
            return Err(Error::Shape(format!(
                "expected {} entries for K = {k}, got {}",
                (k + 1) * (k + 1),
                data.len()
            )));
        }
        Ok(Self { k, data })
    }

    /// Number of clean values; the matrix has one extra MASK row/column.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.k + 1
    }

    pub fn mask(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.k + 1) + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.k + 1;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.dim()).map(|i| self.get(i, j)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &TransitionMatrix) -> Result<TransitionMatrix> {
        if self.k != rhs.k {
            return Err(Error::Shape(format!(
                "cannot multiply K = {} by K = {}",
                self.k, rhs.k
            )));
        }
        let n = self.dim();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for l in 0..n {
                let a = self.data[i * n + l];
                if a == 0.0 {
                    continue;
                }
                let r = &rhs.data[l * n..(l + 1) * n];
                let o = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o.iter_mut().zip(r) {
                    *o += a * b;
                }
            }
        }
        Ok(TransitionMatrix { k: self.k, data: out })
    }

    /// Largest deviation of a column sum from one.
    pub fn max_column_sum_error(&self) -> f64 {
        (0..self.dim())
            .map(|j| ((0..self.dim()).map(|i| self.get(i, j)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Fill the non-mask block from `off(i, j)`, put `gamma` on the mask row,
    /// make the mask column absorbing and set each diagonal to the residual
    /// that makes its column sum to one.
    fn assemble(k: usize, gamma: f64, off: impl Fn(usize, usize) -> f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Schedule(format!("gamma {gamma} outside [0, 1]")));
        }
        let n = k + 1;
        let mut data = vec![0.0; n * n];
        for j in 0..k {
            let mut off_sum = 0.0;
            for i in 0..k {
                if i != j {
                    let v = off(i, j);
                    data[i * n + j] = v;
                    off_sum += v;
                }
            }
            let diag = 1.0 - gamma - off_sum;
            if diag < -1e-12 {
                return Err(Error::Schedule(format!(
                    "negative diagonal {diag} in column {j}; shrink beta or sigma"
                )));
            }
            data[j * n + j] = diag.max(0.0);
            data[k * n + j] = gamma;
        }
        data[k * n + k] = 1.0;
        Ok(Self { k, data })
    }

    /// Uniform replacement: every off-diagonal clean entry equals `beta`.
    pub fn uniform(k: usize, beta: f64, gamma: f64) -> Result<Self> {
        check_k(k)?;
        if beta < 0.0 {
            return Err(Error::Schedule(format!("negative beta {beta}")));
        }
        Self::assemble(k, gamma, |_, _| beta)
    }

    /// Discretized Gaussian replacement: off-diagonal mass proportional to
    /// `exp(-4 (i-j)^2 / ((K-1)^2 sigma))`, normalized over all offsets
    /// `-(K-1)..=(K-1)` and scaled by `1 - gamma`.
    pub fn gaussian(k: usize, sigma: f64, gamma: f64) -> Result<Self> {
        check_k(k)?;
        if !(sigma > 0.0) {
            return Err(Error::Schedule(format!(
                "gaussian noise needs sigma > 0, got {sigma}"
            )));
        }
        let scale = ((k - 1) * (k - 1)) as f64 * sigma;
        let weights: Vec<f64> = (0..k)
            .map(|d| (-4.0 * (d * d) as f64 / scale).exp())
            .collect();
        let z = weights[0] + 2.0 * weights[1..].iter().sum::<f64>();
        Self::assemble(k, gamma, |i, j| (1.0 - gamma) * weights[i.abs_diff(j)] / z)
    }

    /// Band-diagonal replacement: `sigma / K` for `0 < |i - j| <= v`, else zero.
    pub fn band(k: usize, half_width: usize, sigma: f64, gamma: f64) -> Result<Self> {
        check_k(k)?;
        if half_width == 0 {
            return Err(Error::Schedule("band half-width must be at least 1".into()));
        }
        let v = sigma / k as f64;
        Self::assemble(k, gamma, |i, j| if i.abs_diff(j) <= half_width { v } else { 0.0 })
    }
}

fn check_k(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Schedule(format!("vocabulary size must be at least 2, got {k}")));
    }
    Ok(())
}

/// Single-step matrix `Q_t` for one attribute vocabulary of size `k`.
pub fn build_transition_matrix(
    noise: NoiseType,
    t: usize,
    sched: &Schedule,
    k: usize,
) -> Result<TransitionMatrix> {
    if t == 0 || t > sched.t_max {
        return Err(Error::Domain(format!(
            "timestep {t} outside [1, {}]",
            sched.t_max
        )));
    }
    let gamma = sched.gamma(t);
    match noise {
        NoiseType::Uniform => TransitionMatrix::uniform(k, sched.beta(k, t), gamma),
        NoiseType::DiscretizedGaussian => TransitionMatrix::gaussian(k, sched.sigma(t), gamma),
        NoiseType::BandDiagonal(_) => {
            let v = noise.band_width(k).expect("band noise has a width");
            TransitionMatrix::band(k, v, sched.sigma(t), gamma)
        }
    }
}
