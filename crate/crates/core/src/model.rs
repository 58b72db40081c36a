//! The network `p(x) = softmax(g(h(x)))` with hand-written reverse mode.
//!
//! The extractor `h` is two affine layers with `tanh`, optionally followed by
//! an affine bottleneck; the classifier `g` is one affine layer. The feature
//! `z` stored in the bank is the classifier's input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AltError, Result};
use crate::numerics::{softmax_in_place, Matrix};
use crate::objectives::{
    air_grad, air_loss, alr_grad, alr_loss, sep_overlap, sep_overlap_grad, total_loss, AirTarget,
    LossReport, Neighborhood, SepSign,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// Width of the bottleneck layer; `None` feeds the extractor output
    /// straight into the classifier.
    pub bottleneck_dim: Option<usize>,
    pub num_classes: usize,
}

impl ModelDims {
    /// Dimension of `z`, i.e. the bank's column count.
    pub fn embedding_dim(&self) -> usize {
        self.bottleneck_dim.unwrap_or(self.feature_dim)
    }

    fn layer_shapes(&self) -> Vec<(usize, usize, Activation, ParamGroup)> {
        let mut v = vec![
            (
                self.input_dim,
                self.hidden_dim,
                Activation::Tanh,
                ParamGroup::Backbone,
            ),
            (
                self.hidden_dim,
                self.feature_dim,
                Activation::Tanh,
                ParamGroup::Backbone,
            ),
        ];
        if let Some(b) = self.bottleneck_dim {
            v.push((self.feature_dim, b, Activation::Identity, ParamGroup::Head));
        }
        v.push((
            self.embedding_dim(),
            self.num_classes,
            Activation::Identity,
            ParamGroup::Head,
        ));
        v
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("feature_dim", self.feature_dim),
            ("bottleneck_dim", self.bottleneck_dim.unwrap_or(1)),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(AltError::invalid(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(AltError::invalid("num_classes must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Tanh,
    Identity,
}

/// Learning-rate group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// The two extractor layers.
    Backbone,
    /// Bottleneck and classifier.
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    act: Activation,
}

/// Network weights. Tensors are stored as `[w_0, b_0, w_1, b_1, ...]`, with
/// each weight matrix row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    layers: Vec<Layer>,
    tensors: Vec<Tensor>,
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Raw, un-normalized feature.
    pub z: Vec<f64>,
    pub p: Vec<f64>,
}

/// Gradients aligned with [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            tensors: params
                .tensors
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`
    /// (post-activation; logits for the last layer).
    acts: Vec<Vec<f64>>,
    p: Vec<f64>,
}

const LAYER_NAMES: [&str; 2] = ["hidden", "feature"];

impl ModelParams {
    /// Glorot-uniform weights and zero biases from a seeded stream.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(dims)?;
        for (l, layer) in params.layers.clone().iter().enumerate() {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in params.tensors[2 * l].data.iter_mut() {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(params)
    }

    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let shapes = dims.layer_shapes();
        let n_layers = shapes.len();
        let mut layers = Vec::new();
        let mut tensors = Vec::new();
        for (l, (inputs, outputs, act, group)) in shapes.into_iter().enumerate() {
            let name = if l + 1 == n_layers {
                "classifier"
            } else if l < 2 {
                LAYER_NAMES[l]
            } else {
                "bottleneck"
            };
            tensors.push(Tensor {
                name: format!("{name}.weight"),
                shape: vec![outputs, inputs],
                group,
                data: vec![0.0; outputs * inputs],
            });
            tensors.push(Tensor {
                name: format!("{name}.bias"),
                shape: vec![outputs],
                group,
                data: vec![0.0; outputs],
            });
            layers.push(Layer {
                inputs,
                outputs,
                act,
            });
        }
        Ok(ModelParams {
            dims,
            layers,
            tensors,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims.input_dim {
            return Err(AltError::DimensionMismatch {
                context: "model input",
                expected: self.dims.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &self.tensors[2 * l].data;
            let b = &self.tensors[2 * l + 1].data;
            let input = &acts[l];
            let mut out = b.clone();
            for (o, row) in out.iter_mut().zip(w.chunks_exact(layer.inputs)) {
                *o += row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
                if layer.act == Activation::Tanh {
                    *o = o.tanh();
                }
            }
            acts.push(out);
        }
        let mut p = acts.last().cloned().unwrap_or_default();
        softmax_in_place(&mut p);
        Trace { acts, p }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x)?;
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(AltError::NonFinite {
                what: "model input",
                index,
            });
        }
        let t = self.trace(x);
        let z = t.acts[self.layers.len() - 1].clone();
        Ok(Forward { z, p: t.p })
    }

    /// Classifier logits, before the softmax.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).acts.pop().unwrap_or_default())
    }

    /// Forward pass over every row; returns `(Z, P)`.
    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut z = Matrix::zeros(x.rows(), self.dims.embedding_dim());
        let mut p = Matrix::zeros(x.rows(), self.dims.num_classes);
        for i in 0..x.rows() {
            let f = self.forward(x.row(i))?;
            z.row_mut(i).copy_from_slice(&f.z);
            p.row_mut(i).copy_from_slice(&f.p);
        }
        Ok((z, p))
    }

    /// Accumulates `d loss / d theta` into `grads` given `d loss / d p`.
    fn backward(&self, trace: &Trace, grad_p: &[f64], grads: &mut Gradients) {
        let gp_dot_p: f64 = grad_p.iter().zip(&trace.p).map(|(g, p)| g * p).sum();
        let mut delta: Vec<f64> = trace
            .p
            .iter()
            .zip(grad_p)
            .map(|(p, g)| p * (g - gp_dot_p))
            .collect();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if layer.act == Activation::Tanh {
                for (d, a) in delta.iter_mut().zip(&trace.acts[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let input = &trace.acts[l];
            let gw = &mut grads.tensors[2 * l];
            for (o, d) in delta.iter().enumerate() {
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            for (g, d) in grads.tensors[2 * l + 1].iter_mut().zip(&delta) {
                *g += d;
            }
            if l > 0 {
                let w = &self.tensors[2 * l].data;
                let mut next = vec![0.0; layer.inputs];
                for (o, d) in delta.iter().enumerate() {
                    for (n, wv) in next
                        .iter_mut()
                        .zip(&w[o * layer.inputs..(o + 1) * layer.inputs])
                    {
                        *n += d * wv;
                    }
                }
                delta = next;
            }
        }
    }

    /// Gradient of `sum_i loss_i` for supervised cross-entropy with optional
    /// label smoothing. Returns the mean loss and mean gradient.
    pub fn supervised_gradients(
        &self,
        x: &Matrix,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<(f64, Gradients)> {
        let c = self.dims.num_classes;
        let mut grads = Gradients::zeros_like(self);
        let mut loss = 0.0;
        let n = x.rows();
        for (row, &y) in x.iter_rows().zip(labels) {
            self.check_input(row)?;
            let t = self.trace(row);
            let mut target = vec![smoothing / c as f64; c];
            target[y] += 1.0 - smoothing;
            let mut gp = vec![0.0; c];
            for k in 0..c {
                let pk = t.p[k].max(crate::numerics::LOG_FLOOR);
                loss -= target[k] * pk.ln();
                if t.p[k] > crate::numerics::LOG_FLOOR {
                    gp[k] = -target[k] / t.p[k] / n as f64;
                }
            }
            self.backward(&t, &gp, &mut grads);
        }
        if !loss.is_finite() {
            return Err(AltError::NonFiniteLoss { term: "supervised" });
        }
        Ok((loss / n as f64, grads))
    }
}

/// Everything needed to evaluate the adaptation objective on one batch.
///
/// Bank-derived neighbor predictions and weak-view targets are constants;
/// gradients flow only through the clean and strong forward passes.
#[derive(Debug, Clone)]
pub struct ObjectiveBatch<'a> {
    /// Clean view of the batch, one row per sample.
    pub clean: &'a Matrix,
    /// Strong view of the batch, rows aligned with `clean`.
    pub strong: &'a Matrix,
    /// Weak-view predictions, rows aligned with `clean`.
    pub weak_probs: &'a Matrix,
    /// Batch positions of inner samples.
    pub inner: &'a [usize],
    /// Neighbors of each inner sample, aligned with `inner`.
    pub neighbors: &'a [Neighborhood],
    /// Batch positions of outlier samples.
    pub outliers: &'a [usize],
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOptions {
    pub sep_sign: SepSign,
    pub air_target: AirTarget,
    /// When set, every neighborhood must have exactly this many entries.
    pub expected_k: Option<usize>,
    /// Multiplier on the ALR term; 0 disables it.
    pub alr_scale: f64,
    /// Multiplier on the AIR term; 0 disables it.
    pub air_scale: f64,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions {
            sep_sign: SepSign::Dispersion,
            air_target: AirTarget::Hard,
            expected_k: None,
            alr_scale: 1.0,
            air_scale: 1.0,
        }
    }
}

/// Loss report and parameter gradients of `alr + air + lambda * sep`.
pub fn loss_gradients(
    params: &ModelParams,
    batch: &ObjectiveBatch<'_>,
    opts: &ObjectiveOptions,
) -> Result<(LossReport, Gradients)> {
    let n = batch.clean.rows();
    let c = params.dims.num_classes;
    for (what, m) in [
        ("strong view", batch.strong),
        ("weak predictions", batch.weak_probs),
    ] {
        if m.rows() != n {
            return Err(AltError::DimensionMismatch {
                context: what,
                expected: n,
                got: m.rows(),
            });
        }
    }
    if batch.weak_probs.cols() != c {
        return Err(AltError::DimensionMismatch {
            context: "weak prediction width",
            expected: c,
            got: batch.weak_probs.cols(),
        });
    }
    for &i in batch.inner.iter().chain(batch.outliers) {
        if i >= n {
            return Err(AltError::IndexOutOfRange { index: i, len: n });
        }
    }
    for i in 0..n {
        params.check_input(batch.clean.row(i))?;
    }

    let traces: Vec<Trace> = (0..n).map(|i| params.trace(batch.clean.row(i))).collect();
    let probs: Vec<&[f64]> = traces.iter().map(|t| t.p.as_slice()).collect();
    let inner_probs: Vec<&[f64]> = batch.inner.iter().map(|&i| probs[i]).collect();

    let alr = opts.alr_scale * alr_loss(&inner_probs, batch.neighbors, opts.expected_k)?;
    let sep = opts.sep_sign.factor() * sep_overlap(&probs, batch.inner);

    let strong_traces: Vec<Trace> = batch
        .outliers
        .iter()
        .map(|&i| {
            params.check_input(batch.strong.row(i))?;
            Ok(params.trace(batch.strong.row(i)))
        })
        .collect::<Result<_>>()?;
    let pseudo: Vec<&[f64]> = batch
        .outliers
        .iter()
        .map(|&i| batch.weak_probs.row(i))
        .collect();
    let strong_probs: Vec<&[f64]> = strong_traces.iter().map(|t| t.p.as_slice()).collect();
    let air = opts.air_scale * air_loss(&pseudo, &strong_probs, opts.air_target)?;

    let report = total_loss(
        alr,
        sep,
        air,
        batch.lambda,
        batch.inner.len(),
        batch.outliers.len(),
    )?;

    let mut grads = Gradients::zeros_like(params);
    let mut grad_p = vec![vec![0.0; c]; n];
    if opts.alr_scale != 0.0 {
        for (&i, nb) in batch.inner.iter().zip(batch.neighbors) {
            let mut g = vec![0.0; c];
            alr_grad(nb, &mut g);
            for (a, b) in grad_p[i].iter_mut().zip(&g) {
                *a += opts.alr_scale * b;
            }
        }
    }
    let sep_scale = batch.lambda * opts.sep_sign.factor();
    if sep_scale != 0.0 {
        for (gp, gs) in grad_p.iter_mut().zip(sep_overlap_grad(&probs, batch.inner)) {
            for (a, b) in gp.iter_mut().zip(&gs) {
                *a += sep_scale * b;
            }
        }
    }
    for (t, gp) in traces.iter().zip(&grad_p) {
        if gp.iter().any(|v| *v != 0.0) {
            params.backward(t, gp, &mut grads);
        }
    }
    if opts.air_scale != 0.0 {
        let m = batch.outliers.len();
        for (t, p_hat) in strong_traces.iter().zip(&pseudo) {
            let mut g = vec![0.0; c];
            air_grad(p_hat, &t.p, opts.air_target, m, &mut g);
            g.iter_mut().for_each(|v| *v *= opts.air_scale);
            params.backward(t, &g, &mut grads);
        }
    }
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(bottleneck: Option<usize>) -> ModelDims {
        ModelDims {
            input_dim: 3,
            hidden_dim: 5,
            feature_dim: 4,
            bottleneck_dim: bottleneck,
            num_classes: 3,
        }
    }

    #[test]
    fn layout() {
        let p = ModelParams::init(dims(Some(2)), 1).unwrap();
        let names: Vec<&str> = p.tensors().iter().map(|t| t.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "hidden.weight",
                "hidden.bias",
                "feature.weight",
                "feature.bias",
                "bottleneck.weight",
                "bottleneck.bias",
                "classifier.weight",
                "classifier.bias"
            ]
        );
        assert_eq!(p.tensor("classifier.weight").unwrap().shape, vec![3, 2]);
        let p = ModelParams::init(dims(None), 1).unwrap();
        assert_eq!(p.tensors().len(), 6);
        assert_eq!(p.tensor("classifier.weight").unwrap().shape, vec![3, 4]);
    }

    #[test]
    fn zero_classifier_gives_uniform() {
        let mut p = ModelParams::init(dims(Some(2)), 4).unwrap();
        for name in ["classifier.weight", "classifier.bias"] {
            p.tensor_mut(name)
                .unwrap()
                .data
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let f = p.forward(&[0.3, -1.0, 2.0]).unwrap();
        assert!(f.p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(f.z.len(), 2);
    }

    #[test]
    fn forward_is_deterministic_and_order_preserving() {
        let p = ModelParams::init(dims(None), 9).unwrap();
        let x = [0.5, 0.25, -0.75];
        assert_eq!(p.forward(&x).unwrap(), p.forward(&x).unwrap());
        let logits = p.logits(&x).unwrap();
        let f = p.forward(&x).unwrap();
        assert_eq!(
            crate::numerics::argmax(&logits),
            crate::numerics::argmax(&f.p)
        );
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = ModelParams::init(dims(None), 0).unwrap();
        assert!(matches!(
            p.forward(&[1.0, 2.0]),
            Err(AltError::DimensionMismatch {
                expected: 3,
                got: 2,
                ..
            })
        ));
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(dims(Some(2)), 11).unwrap();
        let b = ModelParams::init(dims(Some(2)), 11).unwrap();
        let c = ModelParams::init(dims(Some(2)), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
