use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Linear noise schedules evaluated at integer timesteps `t` in `[1, T]` as
/// `end * t / T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub t_max: usize,
    /// Replacement probability at `T` is `beta_end / K`.
    pub beta_end: f64,
    pub sigma_end: f64,
    pub gamma_end: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            t_max: 100,
            beta_end: 0.02,
            sigma_end: 0.02,
            gamma_end: 0.032,
        }
    }
}

impl Schedule {
    pub fn with_steps(t_max: usize) -> Self {
        Self {
            t_max,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::Schedule("T must be at least 1".into()));
        }
        for (name, v) in [
            ("beta_end", self.beta_end),
            ("sigma_end", self.sigma_end),
            ("gamma_end", self.gamma_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Schedule(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn ramp(&self, end: f64, t: usize) -> f64 {
        end * t as f64 / self.t_max as f64
    }

    pub fn beta(&self, k: usize, t: usize) -> f64 {
        self.ramp(self.beta_end / k as f64, t)
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.ramp(self.sigma_end, t)
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.ramp(self.gamma_end, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_ramp_linearly_to_their_end_values() {
        let s = Schedule::default();
        assert_eq!(s.t_max, 100);
        assert!((s.beta(5, 100) - 0.004).abs() < 1e-15);
        assert!((s.sigma(100) - 0.02).abs() < 1e-15);
        assert!((s.gamma(100) - 0.032).abs() < 1e-15);
        assert!((s.gamma(50) - 0.016).abs() < 1e-15);
        assert!(s.sigma(1) > 0.0);
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let s = Schedule {
            gamma_end: 1.5,
            ..Schedule::default()
        };
        assert!(s.check().is_err());
        assert!(Schedule::with_steps(0).check().is_err());
    }
}
