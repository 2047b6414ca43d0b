use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps of linear warmup; 0 disables warmup.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            max_grad_norm: None,
        }
    }
}

impl AdamWConfig {
    /// Effective learning rate at 1-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// First and second moments plus the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub cfg: AdamWConfig,
    pub state: OptimizerState<F>,
}

impl<F: Real> AdamW<F> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<F>) -> Self {
        Self {
            cfg,
            state: OptimizerState::new(params),
        }
    }

    /// Apply one update and return the learning rate used.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>) -> f64 {
        self.state.step += 1;
        let t = self.state.step;
        let lr = self.cfg.lr_at(t);
        let clip = match self.cfg.max_grad_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let (fb1, fb2, fclip) = (F::of(b1), F::of(b2), F::of(clip));
        let (lr_f, wd, eps) = (F::of(lr), F::of(self.cfg.weight_decay), F::of(self.cfg.eps));
        let (fbc1, fbc2) = (F::of(bc1), F::of(bc2));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let m = &mut self.state.m[id.index()];
            let v = &mut self.state.v[id.index()];
            let p = params.get_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv * fclip;
                *mv = fb1 * *mv + (F::ONE - fb1) * gv;
                *vv = fb2 * *vv + (F::ONE - fb2) * gv * gv;
                let mhat = *mv / fbc1;
                let vhat = *vv / fbc2;
                *pv -= lr_f * (mhat / (vhat.sqrt() + eps) + wd * *pv);
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_vec(&[1], vec![v]).unwrap());
        s
    }

    #[test]
    fn warmup_starts_below_base() {
        let cfg = AdamWConfig {
            lr: 1e-3,
            warmup_steps: 10,
            ..AdamWConfig::default()
        };
        assert!(cfg.lr_at(1) < cfg.lr);
        assert!((cfg.lr_at(1) - 1e-4).abs() < 1e-15);
        assert_eq!(cfg.lr_at(10), cfg.lr);
        assert_eq!(cfg.lr_at(500), cfg.lr);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut params = scalar_store(2.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &params);
        let grads = Gradients::zeros_like(&params);
        opt.step(&mut params, &grads);
        let id = params.id("p").unwrap();
        assert!((params.get(id).item() - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_decreases_monotonically_after_warmup() {
        let mut params = scalar_store(0.0);
        let id = params.id("p").unwrap();
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            warmup_steps: 20,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &params);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let (loss, grads) = {
                let mut g = Graph::new(&params);
                let p = g.param(id);
                let target = g.leaf(Tensor::from_vec(&[1], vec![-3.0]).unwrap());
                let d = g.add(p, target);
                let sq = g.mul(d, d);
                let l = g.sum(sq);
                (g.value(l).item(), g.backward(l).unwrap())
            };
            losses.push(loss);
            opt.step(&mut params, &grads);
        }
        assert!(losses[20..].windows(2).all(|w| w[1] < w[0]));
        assert!(losses[199] < losses[0]);
    }

    #[test]
    fn clipping_bounds_the_update_input() {
        let mut params = scalar_store(0.0);
        let id = params.id("p").unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &params);
        let mut grads = Gradients::zeros_like(&params);
        grads.get_mut(id).data_mut()[0] = 100.0;
        opt.step(&mut params, &grads);
        assert!((opt.state.m[0].item() - 0.1).abs() < 1e-12);
    }
}
