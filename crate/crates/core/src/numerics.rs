//! Dense double-precision kernels shared by the rest of the crate.
//!
//! Everything here is a pure function of its arguments.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{AltError, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AltError::DimensionMismatch {
                context: "matrix buffer",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(AltError::DimensionMismatch {
                    context: "matrix row",
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn max_value(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn check_finite(v: &[f64], what: &'static str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(AltError::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits, "softmax logits")?;
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax without the finiteness check, for hot loops that validate upstream.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = max_value(v);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    l2_normalize_row(v, 0)
}

/// Like [`l2_normalize`], reporting `row` in the error for matrix callers.
pub fn l2_normalize_row(v: &[f64], row: usize) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > NORM_EPS) {
        return Err(AltError::ZeroVector { row, norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(AltError::DimensionMismatch {
            context: "cosine similarity",
            expected: u.len(),
            got: v.len(),
        });
    }
    let nu = norm(u);
    if !(nu > NORM_EPS) {
        return Err(AltError::ZeroVector { row: 0, norm: nu });
    }
    let nv = norm(v);
    if !(nv > NORM_EPS) {
        return Err(AltError::ZeroVector { row: 1, norm: nv });
    }
    // (u.v)/(|u||v|) is symmetric in floating point since each factor commutes.
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Target of a cross-entropy evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Hard(usize),
    Soft(&'a [f64]),
}

pub fn cross_entropy(target: Target<'_>, probs: &[f64]) -> Result<f64> {
    match target {
        Target::Hard(y) => {
            if y >= probs.len() {
                return Err(AltError::DimensionMismatch {
                    context: "cross entropy class index",
                    expected: probs.len(),
                    got: y,
                });
            }
            Ok(-probs[y].max(LOG_FLOOR).ln())
        }
        Target::Soft(t) => {
            if t.len() != probs.len() {
                return Err(AltError::DimensionMismatch {
                    context: "cross entropy soft target",
                    expected: probs.len(),
                    got: t.len(),
                });
            }
            Ok(-t
                .iter()
                .zip(probs)
                .map(|(ti, pi)| ti * pi.max(LOG_FLOOR).ln())
                .sum::<f64>())
        }
    }
}

/// Ranks starting at 1, ties receive the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation, computed as the Pearson correlation of average ranks.
pub fn spearman_rank_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AltError::DimensionMismatch {
            context: "spearman sequences",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(AltError::invalid(
            "spearman needs at least two observations",
        ));
    }
    check_finite(a, "spearman input a")?;
    check_finite(b, "spearman input b")?;
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(AltError::invalid(
            "spearman correlation undefined for a constant sequence",
        ));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Result of a two-component PCA.
#[derive(Debug, Clone)]
pub struct Projection2d {
    /// N x 2 scores.
    pub coords: Matrix,
    /// Variance along each returned component, descending.
    pub variances: [f64; 2],
    /// Fraction of total variance captured by each component.
    pub explained_ratio: [f64; 2],
}

pub fn pca_project_2d(x: &Matrix) -> Result<Projection2d> {
    let (n, d) = (x.rows(), x.cols());
    if d < 2 {
        return Err(AltError::invalid(format!(
            "pca needs at least 2 columns, got {d}"
        )));
    }
    if n < 2 {
        return Err(AltError::invalid(format!(
            "pca needs at least 2 rows, got {n}"
        )));
    }
    check_finite(x.as_slice(), "pca input")?;
    let mut mean = vec![0.0; d];
    for r in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x.get(i, j) - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut coords = Matrix::zeros(n, 2);
    let mut variances = [0.0; 2];
    for (k, &c) in order.iter().take(2).enumerate() {
        let mut axis: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        // Sign convention: largest-magnitude loading positive.
        let lead = axis
            .iter()
            .copied()
            .fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        for i in 0..n {
            let s: f64 = (0..d).map(|j| centered[(i, j)] * axis[j]).sum();
            coords.set(i, k, s);
        }
        variances[k] = eig.eigenvalues[c].max(0.0);
    }
    let explained_ratio = if total > 0.0 {
        [variances[0] / total, variances[1] / total]
    } else {
        [0.0, 0.0]
    };
    Ok(Projection2d {
        coords,
        variances,
        explained_ratio,
    })
}
