//! Synthetic domain pairs, vector-space augmentation, and the brute-force
//! expansion checker.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AltError, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Labeled point cloud. Adaptation code only ever receives
/// [`Dataset::inputs`]; labels are for pretraining and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    pub domain: Domain,
    pub seed: u64,
}

impl Dataset {
    pub fn new(
        inputs: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        domain: Domain,
        seed: u64,
    ) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(AltError::DimensionMismatch {
                context: "labels per sample",
                expected: inputs.rows(),
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(AltError::invalid(format!(
                "label {bad} not below {num_classes}"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            domain,
            seed,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-column standard deviation (population).
    pub fn feature_sd(&self) -> Vec<f64> {
        column_sd(&self.inputs)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for j in 0..self.input_dim() {
            let _ = write!(s, "x{j},");
        }
        s.push_str("label,domain\n");
        for (row, y) in self.inputs.iter_rows().zip(&self.labels) {
            for v in row {
                let _ = write!(s, "{v},");
            }
            let _ = writeln!(s, "{y},{}", self.domain.as_str());
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub fn column_sd(x: &Matrix) -> Vec<f64> {
    let n = x.rows().max(1) as f64;
    (0..x.cols())
        .map(|j| {
            let mean = x.iter_rows().map(|r| r[j]).sum::<f64>() / n;
            (x.iter_rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

fn rotate_about_centroid(x: &mut Matrix, degrees: f64) {
    let n = x.rows() as f64;
    let cx = x.iter_rows().map(|r| r[0]).sum::<f64>() / n;
    let cy = x.iter_rows().map(|r| r[1]).sum::<f64>() / n;
    rotate_about(x, degrees, cx, cy);
}

fn rotate_about(x: &mut Matrix, degrees: f64, cx: f64, cy: f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    for i in 0..x.rows() {
        let r = x.row_mut(i);
        let (dx, dy) = (r[0] - cx, r[1] - cy);
        r[0] = cx + c * dx - s * dy;
        r[1] = cy + s * dx + c * dy;
    }
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite, non-negative standard deviation")
}

/// Two interleaved half circles, class 0 on the upper arc
/// `(cos t, sin t)` and class 1 on the lower arc `(1 - cos t, 0.5 - sin t)`,
/// `t ~ U[0, pi]`, plus isotropic noise, then rotated by `rotation_degrees`
/// about the sample centroid.
pub fn gen_two_moons(
    n_per_class: usize,
    noise_sd: f64,
    rotation_degrees: f64,
    seed: u64,
    domain: Domain,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(AltError::invalid("n_per_class must be at least 1"));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(AltError::invalid("noise_sd must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal(noise_sd);
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let class = i % 2;
        let t = rng.random_range(0.0..=PI);
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        data.push(x + noise.sample(&mut rng));
        data.push(y + noise.sample(&mut rng));
        labels.push(class);
    }
    let mut inputs = Matrix::from_vec(2 * n_per_class, 2, data)?;
    if rotation_degrees != 0.0 {
        rotate_about_centroid(&mut inputs, rotation_degrees);
    }
    Dataset::new(inputs, labels, 2, domain, seed)
}

/// Parameters of the Gaussian-mixture domain pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    /// Radius of the circle the class means sit on (unit per-class variance).
    pub class_separation: f64,
    /// Added to every target point; length `dim` or empty for none.
    pub target_shift: Vec<f64>,
    /// Rotation of the target in the first two coordinates, about the origin.
    pub target_rotation_degrees: f64,
}

/// Class `c` has mean `separation * (cos 2 pi c / C, sin 2 pi c / C, 0, ...)`
/// and identity covariance. Source and target draw from independent streams
/// derived from `seed`; the target is then rotated and shifted.
pub fn gen_gaussian_mixture(spec: &MixtureSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.num_classes < 2 {
        return Err(AltError::invalid("mixture needs at least 2 classes"));
    }
    if spec.dim < 2 {
        return Err(AltError::invalid("mixture needs at least 2 dimensions"));
    }
    if spec.n_per_class == 0 {
        return Err(AltError::invalid("n_per_class must be at least 1"));
    }
    if !spec.target_shift.is_empty() && spec.target_shift.len() != spec.dim {
        return Err(AltError::DimensionMismatch {
            context: "target shift",
            expected: spec.dim,
            got: spec.target_shift.len(),
        });
    }
    let draw = |stream: u64, domain: Domain| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let std = normal(1.0);
        let n = spec.num_classes * spec.n_per_class;
        let mut data = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.num_classes;
            let angle = 2.0 * PI * c as f64 / spec.num_classes as f64;
            for j in 0..spec.dim {
                let mean = match j {
                    0 => spec.class_separation * angle.cos(),
                    1 => spec.class_separation * angle.sin(),
                    _ => 0.0,
                };
                data.push(mean + std.sample(&mut rng));
            }
            labels.push(c);
        }
        let inputs = Matrix::from_vec(n, spec.dim, data)?;
        Dataset::new(inputs, labels, spec.num_classes, domain, seed)
    };
    let source = draw(0, Domain::Source)?;
    let mut target = draw(1, Domain::Target)?;
    let mut x = target.inputs.clone();
    if spec.target_rotation_degrees != 0.0 {
        rotate_about(&mut x, spec.target_rotation_degrees, 0.0, 0.0);
    }
    if !spec.target_shift.is_empty() {
        for i in 0..x.rows() {
            for (v, s) in x.row_mut(i).iter_mut().zip(&spec.target_shift) {
                *v += s;
            }
        }
    }
    target.inputs = x;
    Ok((source, target))
}

/// Weak/strong augmentation magnitudes, expressed in units of the
/// per-feature standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub weak_sd: f64,
    pub strong_sd: f64,
    pub mask_fraction: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            weak_sd: 0.05,
            strong_sd: 0.15,
            mask_fraction: 0.1,
            scale_min: 0.9,
            scale_max: 1.1,
        }
    }
}

impl AugmentSpec {
    /// Everything zeroed; strong augmentation becomes the identity.
    pub fn identity() -> Self {
        AugmentSpec {
            weak_sd: 0.0,
            strong_sd: 0.0,
            mask_fraction: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weak_sd >= 0.0 && self.strong_sd >= 0.0) {
            return Err(AltError::invalid("augmentation magnitudes must be >= 0"));
        }
        if self.weak_sd > self.strong_sd {
            return Err(AltError::invalid(format!(
                "weak magnitude {} exceeds strong magnitude {}",
                self.weak_sd, self.strong_sd
            )));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(AltError::invalid(format!(
                "masking fraction {} outside [0, 1)",
                self.mask_fraction
            )));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(AltError::invalid("scale range must satisfy 0 < min <= max"));
        }
        Ok(())
    }

    /// Number of coordinates the strong view zeroes for `dim` inputs.
    pub fn masked_count(&self, dim: usize) -> usize {
        (self.mask_fraction * dim as f64).round() as usize
    }
}

/// Applies an [`AugmentSpec`] with per-feature scales.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmenter {
    spec: AugmentSpec,
    feature_sd: Vec<f64>,
}

impl Augmenter {
    pub fn new(spec: AugmentSpec, feature_sd: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        Ok(Augmenter { spec, feature_sd })
    }

    pub fn spec(&self) -> &AugmentSpec {
        &self.spec
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_sd.len() {
            return Err(AltError::DimensionMismatch {
                context: "augmentation input",
                expected: self.feature_sd.len(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn jitter<R: Rng>(&self, x: &[f64], magnitude: f64, rng: &mut R) -> Vec<f64> {
        if magnitude == 0.0 {
            return x.to_vec();
        }
        let std = normal(1.0);
        x.iter()
            .zip(&self.feature_sd)
            .map(|(v, sd)| v + magnitude * sd * std.sample(rng))
            .collect()
    }

    pub fn weak<R: Rng>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.jitter(x, self.spec.weak_sd, rng))
    }

    pub fn strong<R: Rng>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut out = self.jitter(x, self.spec.strong_sd, rng);
        let scale = if self.spec.scale_min == self.spec.scale_max {
            self.spec.scale_min
        } else {
            rng.random_range(self.spec.scale_min..self.spec.scale_max)
        };
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let k = self.spec.masked_count(x.len());
        if k > 0 {
            for j in sample(rng, x.len(), k) {
                out[j] = 0.0;
            }
        }
        Ok(out)
    }
}

/// Outcome of one expansion query on a finite point set with uniform mass.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionReport {
    /// Indices in `N(S) \ S`, ascending.
    pub exterior: Vec<usize>,
    pub exterior_mass: f64,
    pub subset_mass: f64,
    /// `exterior_mass / subset_mass`.
    pub ratio: f64,
}

impl ExpansionReport {
    /// Whether this subset meets `(q, xi)`-constant-expansion: subsets with
    /// mass below `q` pass vacuously.
    pub fn satisfies(&self, q: f64, xi: f64) -> bool {
        self.subset_mass < q || self.exterior_mass >= xi.min(self.subset_mass)
    }
}

/// Whether the radius-`r` balls around `a` and `b` intersect.
pub fn balls_intersect(a: &[f64], b: &[f64], r: f64) -> bool {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    d2 <= 4.0 * r * r
}

/// Mass of `N(S) \ S`, where `N(x)` holds every point whose `r`-ball meets
/// the `r`-ball of `x`.
pub fn expansion_check(inputs: &Matrix, subset: &[usize], r: f64) -> Result<ExpansionReport> {
    if subset.is_empty() {
        return Err(AltError::invalid(
            "expansion check needs a non-empty subset",
        ));
    }
    let n = inputs.rows();
    let mut in_s = vec![false; n];
    for &i in subset {
        if i >= n {
            return Err(AltError::IndexOutOfRange { index: i, len: n });
        }
        in_s[i] = true;
    }
    let exterior: Vec<usize> = (0..n)
        .filter(|&j| !in_s[j])
        .filter(|&j| {
            subset
                .iter()
                .any(|&i| balls_intersect(inputs.row(i), inputs.row(j), r))
        })
        .collect();
    let mass = 1.0 / n as f64;
    let subset_mass = in_s.iter().filter(|&&b| b).count() as f64 * mass;
    let exterior_mass = exterior.len() as f64 * mass;
    Ok(ExpansionReport {
        exterior,
        exterior_mass,
        subset_mass,
        ratio: exterior_mass / subset_mass,
    })
}

/// Checks `(q, xi)`-constant-expansion over every non-empty proper subset.
/// Returns the first violating subset, if any. Limited to 20 points.
pub fn check_constant_expansion(
    inputs: &Matrix,
    r: f64,
    q: f64,
    xi: f64,
) -> Result<Option<Vec<usize>>> {
    let n = inputs.rows();
    if n == 0 || n > 20 {
        return Err(AltError::invalid(format!(
            "exhaustive expansion check supports 1..=20 points, got {n}"
        )));
    }
    for mask in 1u32..(1u32 << n) - 1 {
        let subset: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let rep = expansion_check(inputs, &subset, r)?;
        if !rep.satisfies(q, xi) {
            return Ok(Some(subset));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_zero_rotation_and_periodicity() {
        let a = gen_two_moons(50, 0.1, 0.0, 7, Domain::Source).unwrap();
        let b = gen_two_moons(50, 0.1, 0.0, 7, Domain::Target).unwrap();
        assert_eq!(a.inputs(), b.inputs());
        let c = gen_two_moons(50, 0.1, 360.0, 7, Domain::Target).unwrap();
        for (x, y) in a.inputs().as_slice().iter().zip(c.inputs().as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn moons_noiseless_points_on_arcs() {
        let d = gen_two_moons(40, 0.0, 0.0, 3, Domain::Source).unwrap();
        for (row, &y) in d.inputs().iter_rows().zip(d.labels()) {
            let (cx, cy) = if y == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((row[0] - cx).powi(2) + (row[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
            if y == 0 {
                assert!(row[1] >= -1e-12);
            } else {
                assert!(row[1] <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn mixture_is_deterministic() {
        let spec = MixtureSpec {
            num_classes: 3,
            n_per_class: 100,
            dim: 4,
            class_separation: 3.0,
            target_shift: vec![0.5, 0.0, 0.0, 0.0],
            target_rotation_degrees: 20.0,
        };
        let (s1, t1) = gen_gaussian_mixture(&spec, 11).unwrap();
        let (s2, t2) = gen_gaussian_mixture(&spec, 11).unwrap();
        assert_eq!(s1.to_csv(), s2.to_csv());
        assert_eq!(t1.to_csv(), t2.to_csv());
        assert_ne!(s1.inputs(), t1.inputs());
    }

    #[test]
    fn null_shift_matches_source_distribution() {
        let spec = MixtureSpec {
            num_classes: 2,
            n_per_class: 4000,
            dim: 2,
            class_separation: 2.0,
            target_shift: vec![],
            target_rotation_degrees: 0.0,
        };
        let (s, t) = gen_gaussian_mixture(&spec, 1).unwrap();
        for c in 0..2 {
            for j in 0..2 {
                let mean = |d: &Dataset| {
                    let v: Vec<f64> = d
                        .inputs()
                        .iter_rows()
                        .zip(d.labels())
                        .filter(|(_, &y)| y == c)
                        .map(|(r, _)| r[j])
                        .collect();
                    v.iter().sum::<f64>() / v.len() as f64
                };
                assert!((mean(&s) - mean(&t)).abs() < 0.1);
            }
        }
    }

    #[test]
    fn augment_identity_and_masking() {
        let aug = Augmenter::new(AugmentSpec::identity(), vec![1.0; 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = [1.0, -2.0, 3.0, 0.5, 7.0];
        assert_eq!(aug.weak(&x, &mut rng).unwrap(), x.to_vec());
        assert_eq!(aug.strong(&x, &mut rng).unwrap(), x.to_vec());

        let spec = AugmentSpec {
            mask_fraction: 0.4,
            ..AugmentSpec::identity()
        };
        let aug = Augmenter::new(spec, vec![1.0; 5]).unwrap();
        let out = aug.strong(&x, &mut rng).unwrap();
        assert_eq!(out.iter().filter(|v| **v == 0.0).count(), 2);

        let bad = AugmentSpec {
            mask_fraction: 1.0,
            ..AugmentSpec::default()
        };
        assert!(Augmenter::new(bad, vec![1.0]).is_err());
    }

    #[test]
    fn augment_is_seeded() {
        let aug = Augmenter::new(AugmentSpec::default(), vec![0.5, 2.0, 1.0]).unwrap();
        let x = [0.1, 0.2, 0.3];
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (
                aug.weak(&x, &mut rng).unwrap(),
                aug.strong(&x, &mut rng).unwrap(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn expansion_examples() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let rep = expansion_check(&x, &[0], 0.5).unwrap();
        assert_eq!(rep.exterior, vec![1]);
        assert_eq!(rep.exterior_mass, 0.25);
        let all = expansion_check(&x, &[0, 1, 2, 3], 0.5).unwrap();
        assert!(all.exterior.is_empty());
        let isolated = expansion_check(&x, &[1, 2], 0.49).unwrap();
        assert_eq!(isolated.exterior_mass, 0.0);
        assert!(expansion_check(&x, &[], 1.0).is_err());
    }

    #[test]
    fn neighbor_relation_is_symmetric() {
        let d = gen_two_moons(10, 0.2, 0.0, 5, Domain::Source).unwrap();
        let x = d.inputs();
        for i in 0..x.rows() {
            for j in 0..x.rows() {
                assert_eq!(
                    balls_intersect(x.row(i), x.row(j), 0.3),
                    balls_intersect(x.row(j), x.row(i), 0.3)
                );
            }
        }
    }
}
