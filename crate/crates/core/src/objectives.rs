//! The adaptation objective: neighbor-weighted local consistency on inner
//! samples, prediction dispersion across the batch, and weak-to-strong
//! input consistency on outliers.
//!
//! Each term comes as a value function plus its gradient with respect to the
//! predictions it depends on. Backpropagation into network weights lives in
//! [`crate::model`].

use serde::{Deserialize, Serialize};

use crate::error::{AltError, Result};
use crate::numerics::{argmax, cross_entropy, dot, Target, LOG_FLOOR};

/// Sign applied to the dispersion term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SepSign {
    /// `+sum p_i . p_m`: penalizes overlapping predictions, pushing them apart.
    #[default]
    Dispersion,
    /// `-sum p_i . p_m`. Attracts all batch predictions;
    /// kept for auditing only.
    Literal,
}

impl SepSign {
    pub fn factor(self) -> f64 {
        match self {
            SepSign::Dispersion => 1.0,
            SepSign::Literal => -1.0,
        }
    }
}

/// How the weak-view prediction is turned into a consistency target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AirTarget {
    /// One-hot on the weak view's argmax.
    #[default]
    Hard,
    /// The full weak-view distribution.
    Soft,
}

/// Neighbors of one inner sample, read from the feature bank. Treated as
/// constants when differentiating.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub probs: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Per-iteration loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub alr: f64,
    /// Signed dispersion term as it enters the total.
    pub sep: f64,
    pub air: f64,
    pub lambda: f64,
    pub total: f64,
    pub inner_count: usize,
    pub outlier_count: usize,
}

/// `-sum_i sum_j w_ij (p_i . p_j)` over inner samples and their bank neighbors.
pub fn alr_loss(
    inner_probs: &[&[f64]],
    neighbors: &[Neighborhood],
    expected_k: Option<usize>,
) -> Result<f64> {
    check_neighbors(inner_probs.len(), neighbors, expected_k)?;
    let mut total = 0.0;
    for (p, nb) in inner_probs.iter().zip(neighbors) {
        for (q, w) in nb.probs.iter().zip(&nb.weights) {
            total -= w * dot(p, q);
        }
    }
    Ok(total)
}

/// Gradient of [`alr_loss`] with respect to one inner prediction.
pub fn alr_grad(nb: &Neighborhood, out: &mut [f64]) {
    for (q, w) in nb.probs.iter().zip(&nb.weights) {
        for (o, qc) in out.iter_mut().zip(q) {
            *o -= w * qc;
        }
    }
}

fn check_neighbors(
    n_inner: usize,
    neighbors: &[Neighborhood],
    expected_k: Option<usize>,
) -> Result<()> {
    if neighbors.len() != n_inner {
        return Err(AltError::DimensionMismatch {
            context: "neighborhoods per inner sample",
            expected: n_inner,
            got: neighbors.len(),
        });
    }
    for nb in neighbors {
        if nb.probs.len() != nb.weights.len() {
            return Err(AltError::DimensionMismatch {
                context: "neighbor weights",
                expected: nb.probs.len(),
                got: nb.weights.len(),
            });
        }
        if let Some(k) = expected_k {
            if nb.probs.len() != k {
                return Err(AltError::DimensionMismatch {
                    context: "neighbor count vs configured K",
                    expected: k,
                    got: nb.probs.len(),
                });
            }
        }
    }
    Ok(())
}

/// Unsigned overlap `sum_{i in inner} sum_{m != i} p_i . p_m`, with `m`
/// ranging over the whole batch.
pub fn sep_overlap(batch_probs: &[&[f64]], inner: &[usize]) -> f64 {
    if batch_probs.len() < 2 {
        return 0.0;
    }
    let total: Vec<f64> = column_sums(batch_probs);
    inner
        .iter()
        .map(|&i| {
            let p = batch_probs[i];
            dot(p, &total) - dot(p, p)
        })
        .sum()
}

/// Dispersion term with the configured sign.
pub fn sep_loss(batch_probs: &[&[f64]], inner: &[usize], sign: SepSign) -> f64 {
    sign.factor() * sep_overlap(batch_probs, inner)
}

/// Gradient of the unsigned overlap with respect to every batch prediction.
/// Row `k` of the result is `[k inner] * sum_{m != k} p_m + sum_{i inner, i != k} p_i`.
pub fn sep_overlap_grad(batch_probs: &[&[f64]], inner: &[usize]) -> Vec<Vec<f64>> {
    let c = batch_probs.first().map_or(0, |p| p.len());
    let mut grads = vec![vec![0.0; c]; batch_probs.len()];
    if batch_probs.len() < 2 {
        return grads;
    }
    let all = column_sums(batch_probs);
    let inner_rows: Vec<&[f64]> = inner.iter().map(|&i| batch_probs[i]).collect();
    let inner_sum = column_sums_or_zero(&inner_rows, c);
    let mut is_inner = vec![false; batch_probs.len()];
    inner.iter().for_each(|&i| is_inner[i] = true);
    for (k, g) in grads.iter_mut().enumerate() {
        let p = batch_probs[k];
        for j in 0..c {
            let mut v = inner_sum[j];
            if is_inner[k] {
                v -= p[j];
                v += all[j] - p[j];
            }
            g[j] = v;
        }
    }
    grads
}

fn column_sums(rows: &[&[f64]]) -> Vec<f64> {
    column_sums_or_zero(rows, rows.first().map_or(0, |p| p.len()))
}

fn column_sums_or_zero(rows: &[&[f64]], c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for r in rows {
        for (a, b) in s.iter_mut().zip(r.iter()) {
            *a += b;
        }
    }
    s
}

/// Mean cross-entropy between weak-view targets and strong-view predictions
/// over the outlier set. Zero for an empty set.
pub fn air_loss(pseudo: &[&[f64]], strong: &[&[f64]], target: AirTarget) -> Result<f64> {
    if pseudo.len() != strong.len() {
        return Err(AltError::DimensionMismatch {
            context: "weak/strong outlier views",
            expected: pseudo.len(),
            got: strong.len(),
        });
    }
    if pseudo.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (p_hat, q) in pseudo.iter().zip(strong) {
        sum += match target {
            AirTarget::Hard => cross_entropy(Target::Hard(argmax(p_hat)), q)?,
            AirTarget::Soft => cross_entropy(Target::Soft(p_hat), q)?,
        };
    }
    Ok(sum / pseudo.len() as f64)
}

/// Gradient of one outlier's contribution to [`air_loss`] with respect to `q`,
/// already divided by the outlier count `n`.
pub fn air_grad(p_hat: &[f64], q: &[f64], target: AirTarget, n: usize, out: &mut [f64]) {
    let scale = 1.0 / n as f64;
    let mut add = |c: usize, t: f64| {
        // Below the floor the loss is constant in q.
        if q[c] > LOG_FLOOR {
            out[c] -= scale * t / q[c];
        }
    };
    match target {
        AirTarget::Hard => add(argmax(p_hat), 1.0),
        AirTarget::Soft => {
            for (c, &t) in p_hat.iter().enumerate() {
                add(c, t);
            }
        }
    }
}

/// Composes the three terms. `sep` is the already-signed dispersion value.
pub fn total_loss(
    alr: f64,
    sep: f64,
    air: f64,
    lambda: f64,
    inner_count: usize,
    outlier_count: usize,
) -> Result<LossReport> {
    for (term, v) in [("alr", alr), ("sep", sep), ("air", air), ("lambda", lambda)] {
        if !v.is_finite() {
            return Err(AltError::NonFiniteLoss { term });
        }
    }
    let total = alr + air + lambda * sep;
    if !total.is_finite() {
        return Err(AltError::NonFiniteLoss { term: "total" });
    }
    Ok(LossReport {
        alr,
        sep,
        air,
        lambda,
        total,
        inner_count,
        outlier_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nb(probs: Vec<Vec<f64>>, weights: Vec<f64>) -> Neighborhood {
        Neighborhood { probs, weights }
    }

    #[test]
    fn alr_examples() {
        let p = [1.0, 0.0];
        let v = alr_loss(&[&p], &[nb(vec![vec![1.0, 0.0]], vec![1.0])], Some(1)).unwrap();
        assert_eq!(v, -1.0);

        let p = [0.3, 0.7];
        let v = alr_loss(
            &[&p],
            &[nb(vec![vec![0.5, 0.5], vec![0.9, 0.1]], vec![0.0, 0.0])],
            None,
        )
        .unwrap();
        assert_eq!(v, 0.0);

        let p = [0.7, 0.3];
        let v = alr_loss(
            &[&p],
            &[nb(vec![vec![0.6, 0.4], vec![0.2, 0.8]], vec![0.9, 0.5])],
            Some(2),
        )
        .unwrap();
        assert!((v - (-0.676)).abs() < 1e-12);
    }

    #[test]
    fn alr_rejects_wrong_k() {
        let p = [0.5, 0.5];
        let err = alr_loss(&[&p], &[nb(vec![vec![0.5, 0.5]], vec![1.0])], Some(3)).unwrap_err();
        assert!(matches!(
            err,
            AltError::DimensionMismatch {
                expected: 3,
                got: 1,
                ..
            }
        ));
    }

    #[test]
    fn alr_is_linear_in_each_weight() {
        let p = [0.2, 0.5, 0.3];
        let probs = vec![vec![0.1, 0.1, 0.8], vec![0.6, 0.3, 0.1]];
        let base = alr_loss(&[&p], &[nb(probs.clone(), vec![0.4, 0.0])], None).unwrap();
        let doubled = alr_loss(&[&p], &[nb(probs, vec![0.8, 0.0])], None).unwrap();
        assert!((doubled - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn sep_examples() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert_eq!(sep_loss(&[&a, &b], &[0, 1], SepSign::Dispersion), 0.0);
        assert_eq!(sep_loss(&[&a, &a], &[0, 1], SepSign::Dispersion), 2.0);
        let u = [0.5, 0.5];
        assert!((sep_loss(&[&u, &u], &[0, 1], SepSign::Dispersion) - 1.0).abs() < 1e-15);
        assert_eq!(sep_loss(&[&u, &u], &[0, 1], SepSign::Literal), -1.0);
        assert_eq!(sep_loss(&[&u], &[0], SepSign::Dispersion), 0.0);
    }

    #[test]
    fn sep_only_counts_inner_rows_as_anchors() {
        let a = [1.0, 0.0];
        // Anchor 0 only: pairs (0,1) and (0,2).
        assert_eq!(sep_overlap(&[&a, &a, &a], &[0]), 2.0);
        assert_eq!(sep_overlap(&[&a, &a, &a], &[]), 0.0);
    }

    #[test]
    fn sep_permutation_symmetric() {
        let rows = [[0.2, 0.8], [0.6, 0.4], [0.5, 0.5], [0.9, 0.1]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let fwd = sep_overlap(&refs, &[0, 1, 2, 3]);
        let rev: Vec<&[f64]> = refs.iter().rev().copied().collect();
        assert!((fwd - sep_overlap(&rev, &[0, 1, 2, 3])).abs() < 1e-12);
    }

    #[test]
    fn air_examples() {
        let p = [0.0, 1.0];
        let q = [0.0, 1.0];
        assert_eq!(air_loss(&[&p], &[&q], AirTarget::Hard).unwrap(), 0.0);
        let p = [0.9, 0.1];
        let q = [0.8, 0.2];
        let v = air_loss(&[&p], &[&q], AirTarget::Hard).unwrap();
        assert!((v - 0.223_143_551_314_209_7).abs() < 1e-12);
        assert_eq!(air_loss(&[], &[], AirTarget::Hard).unwrap(), 0.0);
    }

    #[test]
    fn air_hard_invariant_to_relabeling() {
        let p = [0.1, 0.7, 0.2];
        let q = [0.3, 0.5, 0.2];
        let perm = [2, 0, 1];
        let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let qp: Vec<f64> = perm.iter().map(|&i| q[i]).collect();
        let a = air_loss(&[&p], &[&q], AirTarget::Hard).unwrap();
        let b = air_loss(&[&pp], &[&qp], AirTarget::Hard).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn total_examples() {
        let r = total_loss(-0.5, 1.0, 0.2, 0.1, 3, 1).unwrap();
        assert!((r.total - (-0.2)).abs() < 1e-12);
        let r = total_loss(-0.5, 7.0, 0.2, 0.0, 3, 1).unwrap();
        assert_eq!(r.total, -0.5 + 0.2);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.3, 0, 0).unwrap().total, 0.0);
        let err = total_loss(0.0, f64::NAN, 0.0, 1.0, 0, 0).unwrap_err();
        assert!(matches!(err, AltError::NonFiniteLoss { term: "sep" }));
    }
}
