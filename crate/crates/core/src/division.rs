//! Learning-state driven split of target samples into inner and outlier sets.
//!
//! A running confidence threshold `tau` tracks the model's top confidence;
//! each class's learning effect counts bank rows confidently predicted as
//! that class; per-class thresholds `T(c) = (1/C)(1 - beta/ln beta)` with
//! `beta = sigma(c) / max sigma` decide which samples are outliers.

use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::error::{AltError, Result};
use crate::numerics::{argmax, max_value, Matrix};

/// How a batch's per-sample top confidences are reduced before the EMA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TauAggregate {
    #[default]
    Max,
    Mean,
}

/// Which side of the threshold is the outlier set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DivisionMode {
    /// `max p >= T[argmax p]` goes to the outlier set.
    #[default]
    Literal,
    /// Swapped: confident samples are inner.
    Prose,
    /// No division; every sample is inner.
    Off,
}

impl std::str::FromStr for DivisionMode {
    type Err = AltError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(DivisionMode::Literal),
            "prose" => Ok(DivisionMode::Prose),
            "off" => Ok(DivisionMode::Off),
            other => Err(AltError::invalid(format!(
                "unknown division mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningState {
    pub tau: f64,
    pub alpha: f64,
    pub aggregate: TauAggregate,
    pub sigma: Vec<usize>,
    /// `f64::INFINITY` marks an unreachable threshold.
    pub thresholds: Vec<f64>,
    pub iteration: usize,
}

impl LearningState {
    pub fn new(num_classes: usize, alpha: f64, aggregate: TauAggregate) -> Result<Self> {
        if num_classes < 2 {
            return Err(AltError::invalid("need at least two classes"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(AltError::invalid(format!(
                "EMA momentum {alpha} outside (0, 1)"
            )));
        }
        let c = num_classes as f64;
        Ok(LearningState {
            tau: 1.0 / c,
            alpha,
            aggregate,
            sigma: vec![0; num_classes],
            thresholds: vec![1.0 / c; num_classes],
            iteration: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.sigma.len()
    }

    /// Advances the EMA by one step. An empty batch leaves the state
    /// untouched.
    pub fn update_tau(&mut self, confidences: &[f64]) -> Result<f64> {
        if confidences.is_empty() {
            log::warn!("update_tau called with an empty batch; state unchanged");
            return Ok(self.tau);
        }
        let floor = 1.0 / self.num_classes() as f64;
        for (i, &m) in confidences.iter().enumerate() {
            // small slack for softmax rounding
            if !(m >= floor - 1e-12 && m <= 1.0 + 1e-12) {
                return Err(AltError::invalid(format!(
                    "confidence {m} at position {i} outside [1/C, 1]"
                )));
            }
        }
        let m = match self.aggregate {
            TauAggregate::Max => max_value(confidences),
            TauAggregate::Mean => confidences.iter().sum::<f64>() / confidences.len() as f64,
        };
        self.tau = self.alpha * self.tau + (1.0 - self.alpha) * m;
        self.iteration += 1;
        Ok(self.tau)
    }

    /// Recomputes `sigma` and the thresholds from the bank predictions.
    pub fn refresh(&mut self, bank_probs: &Matrix) -> Result<()> {
        self.sigma = class_learning_effect(bank_probs, self.tau);
        self.thresholds = division_thresholds(&self.sigma)?;
        Ok(())
    }
}

/// Per-class count of rows with `max p > tau` and that class as argmax.
pub fn class_learning_effect(probs: &Matrix, tau: f64) -> Vec<usize> {
    let mut sigma = vec![0; probs.cols()];
    for row in probs.iter_rows() {
        if max_value(row) > tau {
            sigma[argmax(row)] += 1;
        }
    }
    sigma
}

static ALL_ZERO_WARNED: AtomicBool = AtomicBool::new(false);

/// `beta` at or above this is treated as 1.
const BETA_ONE: f64 = 1.0 - 1e-12;

/// Threshold for one class from its normalized learning effect.
pub fn threshold_for_beta(beta: f64, num_classes: usize) -> f64 {
    let c = num_classes as f64;
    if beta <= 0.0 {
        // beta / ln beta -> 0
        1.0 / c
    } else if beta >= BETA_ONE {
        f64::INFINITY
    } else {
        (1.0 - beta / beta.ln()) / c
    }
}

/// Per-class thresholds from the learning effects. All classes fall back to
/// `1/C` when no class has any confident sample.
pub fn division_thresholds(sigma: &[usize]) -> Result<Vec<f64>> {
    let c = sigma.len();
    if c < 2 {
        return Err(AltError::invalid("need at least two classes"));
    }
    let max = sigma.iter().copied().max().unwrap_or(0);
    if max == 0 {
        // Common early in training; warn once per process, then at debug level.
        if ALL_ZERO_WARNED.swap(true, AtomicOrdering::Relaxed) {
            log::debug!("no class exceeds the confidence threshold; all thresholds at 1/C");
        } else {
            log::warn!("no class exceeds the confidence threshold; all thresholds at 1/C");
        }
        return Ok(vec![1.0 / c as f64; c]);
    }
    Ok(sigma
        .iter()
        .map(|&s| threshold_for_beta(s as f64 / max as f64, c))
        .collect())
}

/// Signed-count variant for callers holding integer data of unknown sign.
pub fn division_thresholds_signed(sigma: &[i64]) -> Result<Vec<f64>> {
    if let Some(&neg) = sigma.iter().find(|&&s| s < 0) {
        return Err(AltError::invalid(format!("negative learning effect {neg}")));
    }
    let unsigned: Vec<usize> = sigma.iter().map(|&s| s as usize).collect();
    division_thresholds(&unsigned)
}

/// Batch positions split into inner and outlier sets.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Partition {
    pub inner: Vec<usize>,
    pub outliers: Vec<usize>,
}

/// Splits rows of `probs` (batch positions `0..n`) by the per-class thresholds.
pub fn partition(probs: &Matrix, thresholds: &[f64], mode: DivisionMode) -> Result<Partition> {
    if thresholds.len() != probs.cols() {
        return Err(AltError::DimensionMismatch {
            context: "thresholds per class",
            expected: probs.cols(),
            got: thresholds.len(),
        });
    }
    let mut part = Partition::default();
    for (i, row) in probs.iter_rows().enumerate() {
        let confident = max_value(row) >= thresholds[argmax(row)];
        let outlier = match mode {
            DivisionMode::Literal => confident,
            DivisionMode::Prose => !confident,
            DivisionMode::Off => false,
        };
        if outlier {
            part.outliers.push(i);
        } else {
            part.inner.push(i);
        }
    }
    Ok(part)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_starts_at_uniform_and_follows_recurrence() {
        let mut s = LearningState::new(4, 0.9, TauAggregate::Max).unwrap();
        assert_eq!(s.tau, 0.25);
        let t = s.update_tau(&[0.5, 0.85, 0.3]).unwrap();
        assert!((t - 0.31).abs() < 1e-15);
        assert_eq!(s.iteration, 1);
    }

    #[test]
    fn tau_mean_aggregate() {
        let mut s = LearningState::new(2, 0.5, TauAggregate::Mean).unwrap();
        s.update_tau(&[0.6, 0.8]).unwrap();
        assert!((s.tau - (0.25 + 0.35)).abs() < 1e-15);
    }

    #[test]
    fn tau_empty_batch_is_noop() {
        let mut s = LearningState::new(3, 0.9, TauAggregate::Max).unwrap();
        let before = s.clone();
        s.update_tau(&[]).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn tau_converges_geometrically() {
        let mut s = LearningState::new(4, 0.9, TauAggregate::Max).unwrap();
        let m = 0.7;
        for t in 1..=50 {
            s.update_tau(&[m]).unwrap();
            let expect = 0.9_f64.powi(t) * (0.25 - m).abs();
            assert!(((s.tau - m).abs() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tau_rejects_out_of_range_confidence() {
        let mut s = LearningState::new(4, 0.9, TauAggregate::Max).unwrap();
        assert!(s.update_tau(&[0.1]).is_err());
        assert!(LearningState::new(4, 1.0, TauAggregate::Max).is_err());
    }

    #[test]
    fn learning_effect_examples() {
        let p = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        assert_eq!(class_learning_effect(&p, 0.65), vec![1, 1]);
        assert_eq!(class_learning_effect(&p, 1.0), vec![0, 0]);
        assert_eq!(class_learning_effect(&p, 0.0).iter().sum::<usize>(), 3);
    }

    #[test]
    fn threshold_examples() {
        let t = division_thresholds(&[10, 0, 5]).unwrap();
        assert_eq!(t[0], f64::INFINITY);
        assert_eq!(t[1], 1.0 / 3.0);
        assert!(t[2] > 1.0 / 3.0 && t[2].is_finite());
        let t = threshold_for_beta(0.5, 10);
        assert!((t - 0.172_134_752_044_448_18).abs() < 1e-12);
        assert_eq!(division_thresholds(&[0, 0]).unwrap(), vec![0.5, 0.5]);
        assert!(division_thresholds_signed(&[3, -1]).is_err());
    }

    #[test]
    fn partition_examples() {
        let p = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.55, 0.45], vec![0.2, 0.8]]).unwrap();
        let part = partition(&p, &[0.6, f64::INFINITY], DivisionMode::Literal).unwrap();
        assert_eq!(part.outliers, vec![0]);
        assert_eq!(part.inner, vec![1, 2]);
        let prose = partition(&p, &[0.6, f64::INFINITY], DivisionMode::Prose).unwrap();
        assert_eq!(prose.inner, vec![0]);
        assert_eq!(prose.outliers, vec![1, 2]);

        let all_inf = partition(&p, &[f64::INFINITY; 2], DivisionMode::Literal).unwrap();
        assert!(all_inf.outliers.is_empty());
        let floor = partition(&p, &[0.5; 2], DivisionMode::Literal).unwrap();
        assert_eq!(floor.outliers, vec![0, 1, 2]);
        let off = partition(&p, &[0.5; 2], DivisionMode::Off).unwrap();
        assert_eq!(off.inner, vec![0, 1, 2]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "prose".parse::<DivisionMode>().unwrap(),
            DivisionMode::Prose
        );
        assert!("sideways".parse::<DivisionMode>().is_err());
    }
}
