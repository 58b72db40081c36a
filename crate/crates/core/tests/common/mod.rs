//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use alt_core::model::{loss_gradients, ModelDims, ModelParams, ObjectiveBatch, ObjectiveOptions};
use alt_core::numerics::{softmax, Matrix};
use alt_core::objectives::Neighborhood;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_simplex(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
    softmax(&logits).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Brute-force KNN over unit rows: every other row scored by its dot
/// product, sorted by (similarity desc, index asc), first `k` kept.
pub fn brute_knn(unit_features: &Matrix, query: usize, k: usize) -> Vec<(usize, f64)> {
    let q = unit_features.row(query);
    let mut all: Vec<(usize, f64)> = Vec::new();
    for j in 0..unit_features.rows() {
        if j == query {
            continue;
        }
        let mut d = 0.0;
        for (a, b) in q.iter().zip(unit_features.row(j)) {
            d += a * b;
        }
        if d == 0.0 {
            d = 0.0;
        }
        all.push((j, d.clamp(-1.0, 1.0)));
    }
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Unrolled EMA: `alpha^t tau0 + (1 - alpha) sum_s alpha^(t-s) m_s`.
pub fn tau_closed_form(tau0: f64, alpha: f64, ms: &[f64]) -> f64 {
    let t = ms.len() as i32;
    let tail: f64 = ms
        .iter()
        .enumerate()
        .map(|(s, m)| alpha.powi(t - 1 - s as i32) * m)
        .sum();
    alpha.powi(t) * tau0 + (1.0 - alpha) * tail
}

/// Owned inputs for one objective evaluation.
pub struct GradFixture {
    pub params: ModelParams,
    pub clean: Matrix,
    pub strong: Matrix,
    pub weak_probs: Matrix,
    pub inner: Vec<usize>,
    pub neighbors: Vec<Neighborhood>,
    pub outliers: Vec<usize>,
    pub lambda: f64,
}

impl GradFixture {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let c = r.random_range(2..5);
        let dims = ModelDims {
            input_dim: r.random_range(2..5),
            hidden_dim: r.random_range(3..8),
            feature_dim: r.random_range(3..6),
            bottleneck_dim: if seed.is_multiple_of(2) {
                Some(r.random_range(2..5))
            } else {
                None
            },
            num_classes: c,
        };
        let params = ModelParams::init(dims, seed).unwrap();
        let n = r.random_range(3..8);
        let clean = random_matrix(&mut r, n, dims.input_dim, 1.5);
        let strong = random_matrix(&mut r, n, dims.input_dim, 1.5);
        let weak_rows: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut r, c)).collect();
        let weak_probs = Matrix::from_rows(&weak_rows).unwrap();
        let mut inner = Vec::new();
        let mut outliers = Vec::new();
        for i in 0..n {
            if r.random_bool(0.6) {
                inner.push(i);
            } else {
                outliers.push(i);
            }
        }
        let k = 3;
        let neighbors = inner
            .iter()
            .map(|_| Neighborhood {
                probs: (0..k).map(|_| random_simplex(&mut r, c)).collect(),
                weights: (0..k).map(|_| r.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        GradFixture {
            params,
            clean,
            strong,
            weak_probs,
            inner,
            neighbors,
            outliers,
            lambda: r.random_range(0.1..1.0),
        }
    }

    pub fn batch(&self, lambda: f64) -> ObjectiveBatch<'_> {
        ObjectiveBatch {
            clean: &self.clean,
            strong: &self.strong,
            weak_probs: &self.weak_probs,
            inner: &self.inner,
            neighbors: &self.neighbors,
            outliers: &self.outliers,
            lambda,
        }
    }
}

/// Largest per-tensor relative error `|a - n| / max(|a|, |n|)` (2-norms)
/// between analytic and central-difference gradients of `report.total`.
pub fn fd_relative_error(fx: &GradFixture, lambda: f64, opts: &ObjectiveOptions, step: f64) -> f64 {
    let batch = fx.batch(lambda);
    let (_, analytic) = loss_gradients(&fx.params, &batch, opts).unwrap();
    let mut worst = 0.0f64;
    let mut p = fx.params.clone();
    for t in 0..p.tensors().len() {
        let len = p.tensors()[t].data.len();
        let mut num = vec![0.0; len];
        for (k, slot) in num.iter_mut().enumerate() {
            let orig = p.tensors()[t].data[k];
            p.tensors_mut()[t].data[k] = orig + step;
            let plus = loss_gradients(&p, &batch, opts).unwrap().0.total;
            p.tensors_mut()[t].data[k] = orig - step;
            let minus = loss_gradients(&p, &batch, opts).unwrap().0.total;
            p.tensors_mut()[t].data[k] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let a = &analytic.tensors[t];
        let diff: f64 = a
            .iter()
            .zip(&num)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let an: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = an.max(nn);
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        } else {
            worst = worst.max(diff);
        }
    }
    worst
}

/// Objective options isolating one term. `lambda` is the value to pass with
/// the batch.
pub fn isolate(term: &str) -> (ObjectiveOptions, Option<f64>) {
    let base = ObjectiveOptions::default();
    match term {
        "alr" => (
            ObjectiveOptions {
                air_scale: 0.0,
                ..base
            },
            Some(0.0),
        ),
        "sep" => (
            ObjectiveOptions {
                alr_scale: 0.0,
                air_scale: 0.0,
                ..base
            },
            Some(1.0),
        ),
        "air" => (
            ObjectiveOptions {
                alr_scale: 0.0,
                ..base
            },
            Some(0.0),
        ),
        "total" => (base, None),
        _ => panic!("unknown term {term}"),
    }
}
