//! Memory bank of unit-norm target features and their predictions, with
//! exact cosine K-nearest-neighbor retrieval.

use std::cmp::Ordering;
use std::path::Path;

use crate::container::{Container, ContainerKind, Entry};
use crate::error::{AltError, Result};
use crate::model::ModelParams;
use crate::numerics::{dot, l2_normalize_row, norm, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    features: Matrix,
    probs: Matrix,
}

/// Neighbors of one query, sorted by descending similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

impl FeatureBank {
    /// One forward pass over `inputs`; row `i` of the bank is sample `i`.
    pub fn init(params: &ModelParams, inputs: &Matrix) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(AltError::invalid(
                "cannot build a bank from an empty dataset",
            ));
        }
        let (z, p) = params.forward_batch(inputs)?;
        Self::from_parts(z, p)
    }

    /// Builds a bank from raw features (normalized here) and predictions.
    pub fn from_parts(mut features: Matrix, probs: Matrix) -> Result<Self> {
        if features.rows() != probs.rows() {
            return Err(AltError::DimensionMismatch {
                context: "bank feature/prediction rows",
                expected: features.rows(),
                got: probs.rows(),
            });
        }
        for i in 0..features.rows() {
            let unit = l2_normalize_row(features.row(i), i)?;
            features.row_mut(i).copy_from_slice(&unit);
        }
        Ok(FeatureBank { features, probs })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    /// Replaces the addressed rows; `z_batch` rows are normalized on write.
    pub fn update(&mut self, indices: &[usize], z_batch: &Matrix, p_batch: &Matrix) -> Result<()> {
        if z_batch.rows() != indices.len() || p_batch.rows() != indices.len() {
            return Err(AltError::DimensionMismatch {
                context: "bank update batch",
                expected: indices.len(),
                got: z_batch.rows().min(p_batch.rows()),
            });
        }
        if z_batch.cols() != self.feature_dim() || p_batch.cols() != self.num_classes() {
            return Err(AltError::DimensionMismatch {
                context: "bank update width",
                expected: self.feature_dim(),
                got: z_batch.cols(),
            });
        }
        let mut seen = std::collections::HashSet::with_capacity(indices.len());
        let mut units = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(AltError::IndexOutOfRange {
                    index: i,
                    len: self.len(),
                });
            }
            if !seen.insert(i) {
                return Err(AltError::invalid(format!(
                    "duplicate bank index {i} in update"
                )));
            }
            units.push(l2_normalize_row(z_batch.row(k), i)?);
        }
        for (k, (&i, unit)) in indices.iter().zip(units).enumerate() {
            self.features.row_mut(i).copy_from_slice(&unit);
            self.probs.row_mut(i).copy_from_slice(p_batch.row(k));
        }
        Ok(())
    }

    /// The `k` rows most cosine-similar to row `query`, excluding `query`.
    /// Ties go to the smaller index.
    pub fn knn(&self, query: usize, k: usize) -> Result<Neighbors> {
        let n = self.len();
        if query >= n {
            return Err(AltError::IndexOutOfRange {
                index: query,
                len: n,
            });
        }
        if k == 0 || k >= n {
            return Err(AltError::invalid(format!(
                "K = {k} outside [1, {}]",
                n.saturating_sub(1)
            )));
        }
        let q = self.features.row(query);
        let mut scored: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != query)
            // + 0.0 folds -0.0 into +0.0 so signed zeros tie under total_cmp
            .map(|j| (dot(q, self.features.row(j)).clamp(-1.0, 1.0) + 0.0, j))
            .collect();
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        Ok(Neighbors {
            indices: scored.iter().map(|s| s.1).collect(),
            similarities: scored.iter().map(|s| s.0).collect(),
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(ContainerKind::Bank);
        c.push(Entry::new(
            "features",
            vec![self.len(), self.feature_dim()],
            self.features.as_slice().to_vec(),
        ));
        c.push(Entry::new(
            "probs",
            vec![self.len(), self.num_classes()],
            self.probs.as_slice().to_vec(),
        ));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ContainerKind::Bank {
            return Err(AltError::Format("container is not a feature bank".into()));
        }
        let f = c.get("features")?;
        let p = c.get("probs")?;
        if f.dims.len() != 2 || p.dims.len() != 2 {
            return Err(AltError::Format("bank entries must be matrices".into()));
        }
        let features = Matrix::from_vec(f.dims[0], f.dims[1], f.data.clone())?;
        let probs = Matrix::from_vec(p.dims[0], p.dims[1], p.data.clone())?;
        if features.rows() != probs.rows() {
            return Err(AltError::Format(
                "bank feature and prediction row counts differ".into(),
            ));
        }
        // Stored rows are already unit; renormalizing would perturb the last bits.
        for (i, row) in features.iter_rows().enumerate() {
            let n = norm(row);
            if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
                return Err(AltError::Format(format!(
                    "stored feature row {i} has norm {n}"
                )));
            }
        }
        Ok(FeatureBank { features, probs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
