//! Diagnostics over a trained model and its feature bank: neighbor label
//! agreement, class-wise cosine statistics, the augmentation-consistency
//! regularizer, the expansion-based error bound, and accuracy reporting.
//!
//! Nothing here feeds back into training. This is the only module that
//! reads target labels.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::FeatureBank;
use crate::data::{Augmenter, Dataset};
use crate::error::{AltError, Result};
use crate::model::ModelParams;
use crate::numerics::{argmax, cosine_similarity, spearman_rank_corr, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AgreementMode {
    /// A sample counts when all K neighbors share its reference label.
    #[default]
    All,
    /// Mean fraction of the K neighbors sharing the reference label.
    Fraction,
}

/// Agreement ratio for each `K` in `k_list`.
pub fn knn_label_agreement(
    bank: &FeatureBank,
    labels: &[usize],
    k_list: &[usize],
    mode: AgreementMode,
) -> Result<Vec<f64>> {
    let n = bank.len();
    if labels.len() != n {
        return Err(AltError::DimensionMismatch {
            context: "reference labels",
            expected: n,
            got: labels.len(),
        });
    }
    let Some(&k_max) = k_list.iter().max() else {
        return Ok(Vec::new());
    };
    if let Some(&bad) = k_list.iter().find(|&&k| k == 0 || k >= n) {
        return Err(AltError::invalid(format!(
            "K = {bad} outside [1, {}]",
            n.saturating_sub(1)
        )));
    }
    let mut sums = vec![0.0; k_list.len()];
    for i in 0..n {
        let nb = bank.knn(i, k_max)?;
        let hits: Vec<bool> = nb.indices.iter().map(|&j| labels[j] == labels[i]).collect();
        for (s, &k) in sums.iter_mut().zip(k_list) {
            let prefix = &hits[..k];
            *s += match mode {
                AgreementMode::All => f64::from(u8::from(prefix.iter().all(|&h| h))),
                AgreementMode::Fraction => prefix.iter().filter(|&&h| h).count() as f64 / k as f64,
            };
        }
    }
    Ok(sums.into_iter().map(|s| s / n as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineStats {
    pub same_class: f64,
    pub across_class: f64,
}

impl CosineStats {
    pub fn ratio(&self) -> f64 {
        self.same_class / self.across_class
    }
}

/// Mean cosine similarity over unordered same-class pairs and across-class
/// pairs.
pub fn class_cosine_stats(features: &Matrix, labels: &[usize]) -> Result<CosineStats> {
    if labels.len() != features.rows() {
        return Err(AltError::DimensionMismatch {
            context: "labels per feature row",
            expected: features.rows(),
            got: labels.len(),
        });
    }
    let (mut same, mut n_same, mut across, mut n_across) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..features.rows() {
        for j in i + 1..features.rows() {
            let c = cosine_similarity(features.row(i), features.row(j))?;
            if labels[i] == labels[j] {
                same += c;
                n_same += 1;
            } else {
                across += c;
                n_across += 1;
            }
        }
    }
    if n_same == 0 {
        return Err(AltError::invalid(
            "no class has two samples; same-class mean undefined",
        ));
    }
    if n_across == 0 {
        return Err(AltError::invalid(
            "need at least two classes for across-class mean",
        ));
    }
    Ok(CosineStats {
        same_class: same / n_same as f64,
        across_class: across / n_across as f64,
    })
}

/// Which augmentation generates candidate neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AugmentView {
    #[default]
    Weak,
    Strong,
}

/// Monte-Carlo estimate of `E_x[max over sampled neighbors 1(pred(x') != pred(x))]`.
pub fn consistency_regularizer_estimate(
    params: &ModelParams,
    inputs: &Matrix,
    augmenter: &Augmenter,
    view: AugmentView,
    samples_per_point: usize,
    seed: u64,
) -> Result<f64> {
    if samples_per_point == 0 {
        return Err(AltError::invalid("samples_per_point must be at least 1"));
    }
    if inputs.rows() == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flips = 0usize;
    for x in inputs.iter_rows() {
        let y = argmax(&params.forward(x)?.p);
        let mut differs = false;
        for _ in 0..samples_per_point {
            let cand = match view {
                AugmentView::Weak => augmenter.weak(x, &mut rng)?,
                AugmentView::Strong => augmenter.strong(x, &mut rng)?,
            };
            // keep drawing so the rng stream is independent of outcomes
            differs |= argmax(&params.forward(&cand)?.p) != y;
        }
        flips += usize::from(differs);
    }
    Ok(flips as f64 / inputs.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub target_error: f64,
    pub mu: f64,
    pub xi: f64,
    /// `max{xi / (xi - 1), 2}`.
    pub constant: f64,
    /// `constant * mu`.
    pub bound: f64,
    pub holds: bool,
}

/// Checks `target_error <= max{xi/(xi-1), 2} * mu`.
pub fn verify_error_bound(target_error: f64, mu: f64, xi: f64) -> Result<BoundReport> {
    if xi == 1.0 {
        return Err(AltError::invalid("xi = 1 makes xi/(xi-1) undefined"));
    }
    for (name, v) in [("target_error", target_error), ("mu", mu), ("xi", xi)] {
        if !v.is_finite() {
            return Err(AltError::invalid(format!("{name} must be finite")));
        }
    }
    let constant = (xi / (xi - 1.0)).max(2.0);
    let bound = constant * mu;
    Ok(BoundReport {
        target_error,
        mu,
        xi,
        constant,
        bound,
        holds: target_error <= bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate_predictions(
    predicted: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Evaluation {
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[c] as f64 / n as f64
            }
        })
        .collect();
    Evaluation {
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        per_class,
        confusion,
    }
}

pub fn predict(params: &ModelParams, inputs: &Matrix) -> Result<Vec<usize>> {
    inputs
        .iter_rows()
        .map(|x| params.forward(x).map(|f| argmax(&f.p)))
        .collect()
}

pub fn evaluate(params: &ModelParams, dataset: &Dataset) -> Result<Evaluation> {
    let pred = predict(params, dataset.inputs())?;
    Ok(evaluate_predictions(
        &pred,
        dataset.labels(),
        dataset.num_classes(),
    ))
}

/// Spearman correlation between same/across similarity ratios and accuracies
/// over a set of runs.
pub fn similarity_accuracy_spearman(ratios: &[f64], accuracies: &[f64]) -> Result<f64> {
    spearman_rank_corr(ratios, accuracies)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub k_list: Vec<usize>,
    pub agreement: Vec<f64>,
    pub cosine: CosineStats,
    pub similarity_ratio: f64,
    pub evaluation: Evaluation,
    pub regularizer: f64,
    pub spearman: Option<f64>,
}

impl DiagnosticsReport {
    /// One `metric,value` pair per line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, a) in self.k_list.iter().zip(&self.agreement) {
            let _ = writeln!(s, "agreement_k{k},{a}");
        }
        let _ = writeln!(s, "same_class_cosine,{}", self.cosine.same_class);
        let _ = writeln!(s, "across_class_cosine,{}", self.cosine.across_class);
        let _ = writeln!(s, "similarity_ratio,{}", self.similarity_ratio);
        let _ = writeln!(s, "accuracy,{}", self.evaluation.accuracy);
        for (c, a) in self.evaluation.per_class.iter().enumerate() {
            let _ = writeln!(s, "class_{c}_accuracy,{a}");
        }
        let _ = writeln!(s, "regularizer_estimate,{}", self.regularizer);
        if let Some(r) = self.spearman {
            let _ = writeln!(s, "spearman,{r}");
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy: {:.4}", self.evaluation.accuracy);
        let _ = writeln!(
            s,
            "cosine same/across: {:.4} / {:.4} (ratio {:.4})",
            self.cosine.same_class, self.cosine.across_class, self.similarity_ratio
        );
        for (k, a) in self.k_list.iter().zip(&self.agreement) {
            let _ = writeln!(s, "neighbor agreement K={k}: {a:.4}");
        }
        let _ = writeln!(s, "consistency regularizer: {:.4}", self.regularizer);
        s
    }
}

pub fn confusion_csv(e: &Evaluation) -> String {
    let c = e.confusion.len();
    let mut s = String::from("true");
    for j in 0..c {
        let _ = write!(s, ",pred_{j}");
    }
    s.push('\n');
    for (i, row) in e.confusion.iter().enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit2(deg: f64) -> Vec<f64> {
        let r = deg.to_radians();
        vec![r.cos(), r.sin()]
    }

    #[test]
    fn cosine_stats_ideal_and_collapsed() {
        let f = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 3.0],
        ])
        .unwrap();
        let s = class_cosine_stats(&f, &[0, 0, 1, 1]).unwrap();
        assert_eq!((s.same_class, s.across_class), (1.0, 0.0));
        let f = Matrix::from_rows(&vec![vec![1.0, 1.0]; 4]).unwrap();
        let s = class_cosine_stats(&f, &[0, 0, 1, 1]).unwrap();
        assert!((s.same_class - 1.0).abs() < 1e-15 && (s.across_class - 1.0).abs() < 1e-15);
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(class_cosine_stats(&f, &[0, 1]).is_err());
    }

    #[test]
    fn bound_examples() {
        let r = verify_error_bound(0.1, 0.1, 2.0).unwrap();
        assert!((r.bound - 0.2).abs() < 1e-15);
        assert!(r.holds);
        assert!(verify_error_bound(0.0, 0.0, 0.5).unwrap().holds);
        assert!(!verify_error_bound(0.01, 0.0, 0.5).unwrap().holds);
        let v = verify_error_bound(0.5, 0.1, 0.5).unwrap();
        assert!(!v.holds);
        assert_eq!(v.target_error, 0.5);
        assert!(verify_error_bound(0.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn evaluation_examples() {
        let e = evaluate_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3);
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(
            e.confusion,
            vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]
        );
        let e = evaluate_predictions(&[1; 6], &[0, 1, 2, 0, 1, 2], 3);
        assert!((e.accuracy - 1.0 / 3.0).abs() < 1e-15);
        let e = evaluate_predictions(&[0, 1, 1, 0, 2], &[0, 0, 1, 2, 2], 3);
        assert_eq!(
            e.confusion,
            vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 1]]
        );
        assert_eq!(e.per_class, vec![0.5, 1.0, 0.5]);
        let trace: usize = (0..3).map(|c| e.confusion[c][c]).sum();
        assert_eq!(e.accuracy, trace as f64 / 5.0);
    }

    #[test]
    fn agreement_rejects_large_k() {
        let f = Matrix::from_rows(&[unit2(0.0), unit2(10.0), unit2(90.0)]).unwrap();
        let p = Matrix::from_vec(3, 2, vec![0.5; 6]).unwrap();
        let bank = FeatureBank::from_parts(f, p).unwrap();
        assert!(knn_label_agreement(&bank, &[0, 0, 1], &[3], AgreementMode::All).is_err());
        let r = knn_label_agreement(&bank, &[0, 0, 1], &[1, 2], AgreementMode::Fraction).unwrap();
        // 0 -> [1, 2]; 1 -> [0, 2]; 2 -> [1, 0]
        assert_eq!(r[0], 2.0 / 3.0);
        assert!((r[1] - (0.5 + 0.5 + 0.0) / 3.0).abs() < 1e-15);
    }
}
