use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::denoiser::{Batch, ModelConfig, Trunk};
use crate::layout::{tokenize, AttrKind, Layout, QuantizerConfig};
use crate::numerics::{seeded_rng, softmax_in_place, AdamW, AdamWConfig, Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Covariance shrinkage used when there are fewer samples than `dim + 1`.
pub const COV_SHRINKAGE: f64 = 1e-6;

fn moments(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Err(Error::Degenerate("empty feature set".into()));
    }
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("feature rows differ in length".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite feature".into()));
    }
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let mut cov = if n > 1 {
        centered.transpose() * &centered / (n - 1) as f64
    } else {
        DMatrix::zeros(d, d)
    };
    if n < d + 1 {
        for i in 0..d {
            cov[(i, i)] += COV_SHRINKAGE;
        }
    }
    Ok((mean, cov))
}

fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, clamped at 0.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = moments(a)?;
    let (mu_b, cov_b) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Shape(format!("feature dims {} and {}", mu_a.len(), mu_b.len())));
    }
    let root_a = sqrt_psd(cov_a.clone());
    let inner = &root_a * &cov_b * &root_a;
    let cross = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum::<f64>();
    let d = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FeatureTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

pub const FEATURE_DIM: usize = 256;

/// Real-vs-corrupted classifier whose penultimate activations serve as
/// layout features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub quant: QuantizerConfig,
    pub params: ParamStore<f32>,
    cfg: ModelConfig,
    trunk: Trunk,
    proj: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

impl FeatureExtractor {
    pub fn new(quant: QuantizerConfig, seed: u64) -> Result<Self> {
        let mut cfg = ModelConfig::standard(&quant);
        cfg.d_model = 128;
        cfg.n_layers = 2;
        cfg.d_ffn = 256;
        let mut rng = seeded_rng(seed, "feature-init");
        let mut params = ParamStore::new();
        let trunk = Trunk::register(&mut params, "fx.", &cfg, &mut rng);
        let mut dense = |name: &str, i: usize, o: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let dist = rand_distr::Normal::new(0.0, 0.02).expect("std");
            let w = (0..i * o).map(|_| rand_distr::Distribution::sample(&dist, rng) as f32).collect();
            (
                params.add(format!("fx.{name}.w"), Tensor::from_vec(&[i, o], w).expect("shape")),
                params.add(format!("fx.{name}.b"), Tensor::zeros(&[o])),
            )
        };
        let proj = dense("proj", cfg.d_model, FEATURE_DIM, &mut rng);
        let head = dense("head", FEATURE_DIM, 2, &mut rng);
        Ok(Self {
            quant,
            params,
            cfg,
            trunk,
            proj,
            head,
        })
    }

    fn batch(&self, layouts: &[&Layout]) -> Result<Batch> {
        let seqs: Vec<_> = layouts
            .iter()
            .map(|l| {
                if !l.is_complete() {
                    return Err(Error::IncompleteLayout("features need complete layouts".into()));
                }
                let mut s = tokenize(l, &self.quant);
                s.relations.clear();
                for t in &mut s.tokens {
                    t.flag = true;
                }
                Ok(s)
            })
            .collect::<Result<_>>()?;
        Batch::new(&seqs, &self.cfg)
    }

    fn forward(&self, g: &mut Graph<'_, f32>, batch: &Batch) -> (Var, Var) {
        let h = self.trunk.encode(g, batch);
        let pooled = g.segment_mean(h, batch.segments.clone());
        let (w, b) = (g.param(self.proj.0), g.param(self.proj.1));
        let f = g.linear(pooled, w, b);
        let f = g.gelu(f);
        let (w, b) = (g.param(self.head.0), g.param(self.head.1));
        let logits = g.linear(f, w, b);
        (f, logits)
    }

    /// Penultimate activations, one `FEATURE_DIM` row per layout.
    pub fn features(&self, layouts: &[Layout]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(layouts.len());
        for chunk in layouts.chunks(256) {
            let refs: Vec<&Layout> = chunk.iter().collect();
            let batch = self.batch(&refs)?;
            let mut g = Graph::new(&self.params);
            let (f, _) = self.forward(&mut g, &batch);
            let v = g.value(f);
            out.extend((0..v.rows()).map(|r| v.row(r).iter().map(|&x| x as f64).collect()));
        }
        Ok(out)
    }

    /// Probability that each layout is corrupted.
    pub fn predict(&self, layouts: &[Layout]) -> Result<Vec<f64>> {
        let refs: Vec<&Layout> = layouts.iter().collect();
        let batch = self.batch(&refs)?;
        let mut g = Graph::new(&self.params);
        let (_, logits) = self.forward(&mut g, &batch);
        let v = g.value(logits);
        Ok((0..v.rows())
            .map(|r| {
                let mut p: Vec<f64> = v.row(r).iter().map(|&x| x as f64).collect();
                softmax_in_place(&mut p);
                p[1]
            })
            .collect())
    }

    /// Train on real layouts against perturbed copies; returns the model and
    /// its accuracy on a held-out tenth of the corpus.
    pub fn train(real: &[Layout], quant: QuantizerConfig, cfg: FeatureTrainConfig) -> Result<(Self, f64)> {
        if real.len() < 4 {
            return Err(Error::Degenerate("feature training needs at least 4 layouts".into()));
        }
        if real.iter().all(|l| *l == real[0]) {
            return Err(Error::Degenerate("all training layouts are identical".into()));
        }
        let n_hold = (real.len() / 10).max(1);
        let (hold, train) = real.split_at(n_hold);
        let batch_size = cfg.batch_size.min(train.len()).max(1);
        let mut model = Self::new(quant, cfg.seed)?;
        let adam = AdamWConfig {
            lr: cfg.lr,
            warmup_steps: (cfg.steps as f64 * 0.1).ceil() as u64,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(adam, &model.params);
        for step in 1..=cfg.steps {
            let mut rng = seeded_rng(cfg.seed, &format!("feature-batch/{step}"));
            let mut items = Vec::with_capacity(2 * batch_size);
            let mut labels = Vec::with_capacity(2 * batch_size);
            for _ in 0..batch_size {
                let l = &train[rng.random_range(0..train.len())];
                items.push(l.clone());
                labels.push(0usize);
                items.push(perturb(l, &quant, &mut rng));
                labels.push(1);
            }
            let refs: Vec<&Layout> = items.iter().collect();
            let batch = model.batch(&refs)?;
            let grads = {
                let mut g = Graph::new(&model.params);
                let (_, logits) = model.forward(&mut g, &batch);
                let n = labels.len() as f64;
                let labels = &labels;
                let loss = g.row_loss(logits, &|r, z| {
                    let mut p = z.to_vec();
                    softmax_in_place(&mut p);
                    let l = -p[labels[r]].max(f64::MIN_POSITIVE).ln() / n;
                    p[labels[r]] -= 1.0;
                    (l, p.into_iter().map(|v| v / n).collect())
                });
                g.backward(loss)?
            };
            opt.step(&mut model.params, &grads);
        }
        let mut rng = seeded_rng(cfg.seed, "feature-holdout");
        let mut eval = Vec::with_capacity(2 * hold.len());
        for l in hold {
            eval.push(l.clone());
            eval.push(perturb(l, &quant, &mut rng));
        }
        let probs = model.predict(&eval)?;
        let correct = probs
            .iter()
            .enumerate()
            .filter(|(i, &p)| (p > 0.5) == (i % 2 == 1))
            .count();
        Ok((model, correct as f64 / probs.len() as f64))
    }
}

/// A status-preserving random corruption: re-draw some geometry bins, shift
/// boxes, or swap categories. The result always differs from the input.
pub fn perturb<R: Rng + ?Sized>(layout: &Layout, quant: &QuantizerConfig, rng: &mut R) -> Layout {
    for _ in 0..16 {
        let mut out = layout.clone();
        let n = out.len();
        let hits = rng.random_range(1..=n.div_ceil(2));
        for _ in 0..hits {
            let e = &mut out.elements[rng.random_range(0..n)];
            match rng.random_range(0..3) {
                0 => {
                    let kind = AttrKind::ALL[rng.random_range(1..5)];
                    e.get_mut(kind).bin = Some(rng.random_range(0..quant.bins(kind)));
                }
                1 => {
                    for kind in [AttrKind::X, AttrKind::Y] {
                        let k = quant.bins(kind) as i64;
                        let span = (k / 8).max(1);
                        let a = e.get_mut(kind);
                        let shifted = a.bin.unwrap_or(0) as i64 + rng.random_range(-span..=span);
                        a.bin = Some(shifted.clamp(0, k - 1) as u32);
                    }
                }
                _ => {
                    let k = quant.bins(AttrKind::Category);
                    e.get_mut(AttrKind::Category).bin = Some(rng.random_range(0..k));
                }
            }
        }
        if out != *layout {
            return out;
        }
    }
    let mut out = layout.clone();
    let a = out.elements[0].get_mut(AttrKind::X);
    let k = quant.bins(AttrKind::X);
    a.bin = a.bin.map(|b| (b + 1) % k);
    out
}
