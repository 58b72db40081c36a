//! Source pretraining, the adaptation loop, and the four CLI commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{
    class_cosine_stats, confusion_csv, consistency_regularizer_estimate, evaluate,
    knn_label_agreement, predict, DiagnosticsReport, Evaluation,
};
use crate::bank::FeatureBank;
use crate::checkpoint::{load_checkpoint, load_meta, save_checkpoint, CheckpointMeta};
use crate::config::{AdaptConfig, AgreementReference, DatasetConfig, NeighborWeighting, Preset};
use crate::data::{gen_gaussian_mixture, gen_two_moons, Augmenter, Dataset, Domain};
use crate::division::{partition, LearningState};
use crate::error::{AltError, Result};
use crate::model::{loss_gradients, ModelParams, ObjectiveBatch, ObjectiveOptions};
use crate::numerics::{max_value, pca_project_2d, Matrix};
use crate::objectives::{LossReport, Neighborhood};
use crate::optim::{lambda_schedule, sgd_update, LrMultipliers, OptimizerState};

// rng stream ids, so each consumer has an independent sequence per seed
const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_REGULARIZER: u64 = 3;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Source and target datasets for a config.
pub fn build_datasets(cfg: &AdaptConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::TwoMoons {
            n_per_class,
            noise_sd,
            rotation_degrees,
        } => {
            let source = gen_two_moons(*n_per_class, *noise_sd, 0.0, cfg.seed, Domain::Source)?;
            let target = gen_two_moons(
                *n_per_class,
                *noise_sd,
                *rotation_degrees,
                cfg.seed.wrapping_add(1),
                Domain::Target,
            )?;
            Ok((source, target))
        }
        DatasetConfig::GaussianMixture(spec) => gen_gaussian_mixture(spec, cfg.seed),
    }
}

/// Seeded epoch-wise shuffling into fixed-size batches; the last batch of an
/// epoch may be short.
struct BatchSampler {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        BatchSampler {
            n,
            batch: batch.min(n),
            order: Vec::new(),
            pos: n,
            epoch: 0,
            rng,
        }
    }

    /// Next batch and whether it starts a new epoch.
    fn next_batch(&mut self) -> (Vec<usize>, bool) {
        let mut fresh = false;
        if self.pos >= self.n {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
            fresh = true;
        }
        let end = (self.pos + self.batch).min(self.n);
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        (b, fresh)
    }
}

pub fn batches_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.min(n).max(1))
}

pub struct Pretrained {
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub source_eval: Evaluation,
    pub target_eval: Evaluation,
    pub final_loss: f64,
}

/// Supervised training on the labeled source domain.
pub fn pretrain(cfg: &AdaptConfig) -> Result<Pretrained> {
    cfg.validate()?;
    let (source, target) = build_datasets(cfg)?;
    let mut params = ModelParams::init(cfg.model_dims(), cfg.seed)?;
    let p = &cfg.pretrain;
    let flat = LrMultipliers {
        backbone: 1.0,
        head: 1.0,
    };
    let mut opt = OptimizerState::new(&params, p.max_iter, p.lr, p.momentum, p.weight_decay, flat);
    let mut sampler = BatchSampler::new(source.len(), p.batch_size, rng(cfg.seed, STREAM_SHUFFLE));
    let mut final_loss = f64::NAN;
    for iter in 0..p.max_iter {
        let (idx, _) = sampler.next_batch();
        let x = source.inputs().select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| source.labels()[i]).collect();
        let (loss, grads) = params
            .supervised_gradients(&x, &y, p.label_smoothing)
            .map_err(|_| AltError::Diverged { iter })?;
        if !loss.is_finite() {
            return Err(AltError::Diverged { iter });
        }
        final_loss = loss;
        sgd_update(&mut params, &grads, &mut opt)?;
        if !params.is_finite() {
            return Err(AltError::Diverged { iter });
        }
    }
    Ok(Pretrained {
        source_eval: evaluate(&params, &source)?,
        target_eval: evaluate(&params, &target)?,
        params,
        opt,
        final_loss,
    })
}

/// State of one adaptation iteration, one metrics row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: LossReport,
    pub tau: f64,
    pub sigma: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub batch_size: usize,
}

pub struct Adapted {
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub records: Vec<IterRecord>,
    pub bank: FeatureBank,
}

pub fn adapt_max_iter(cfg: &AdaptConfig, n: usize) -> usize {
    cfg.adapt
        .max_iter
        .unwrap_or(cfg.adapt.epochs * batches_per_epoch(n, cfg.adapt.batch_size))
}

/// Everything the loop needs to build one objective batch.
pub struct PreparedBatch {
    pub indices: Vec<usize>,
    pub clean: Matrix,
    pub strong: Matrix,
    pub weak_probs: Matrix,
    pub z: Matrix,
    pub probs: Matrix,
}

/// Clean, weak and strong views for the batch. Both augmented views are
/// drawn for every sample so the rng stream does not depend on the split.
pub fn prepare_batch(
    params: &ModelParams,
    inputs: &Matrix,
    indices: &[usize],
    augmenter: &Augmenter,
    aug_rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch> {
    let clean = inputs.select_rows(indices);
    let (z, probs) = params.forward_batch(&clean)?;
    let mut weak = Matrix::zeros(indices.len(), inputs.cols());
    let mut strong = Matrix::zeros(indices.len(), inputs.cols());
    for k in 0..indices.len() {
        let x = clean.row(k);
        let w = augmenter.weak(x, aug_rng)?;
        let s = augmenter.strong(x, aug_rng)?;
        weak.row_mut(k).copy_from_slice(&w);
        strong.row_mut(k).copy_from_slice(&s);
    }
    let (_, weak_probs) = params.forward_batch(&weak)?;
    Ok(PreparedBatch {
        indices: indices.to_vec(),
        clean,
        strong,
        weak_probs,
        z,
        probs,
    })
}

/// Neighbor predictions and weights for each inner sample.
pub fn gather_neighbors(
    bank: &FeatureBank,
    dataset_indices: &[usize],
    k: usize,
    weighting: NeighborWeighting,
) -> Result<Vec<Neighborhood>> {
    dataset_indices
        .iter()
        .map(|&i| {
            let nb = bank.knn(i, k)?;
            Ok(Neighborhood {
                probs: nb
                    .indices
                    .iter()
                    .map(|&j| bank.probs().row(j).to_vec())
                    .collect(),
                weights: match weighting {
                    NeighborWeighting::Cosine => nb.similarities,
                    NeighborWeighting::Uniform => vec![1.0; k],
                },
            })
        })
        .collect()
}

pub fn objective_options(cfg: &AdaptConfig) -> ObjectiveOptions {
    ObjectiveOptions {
        sep_sign: cfg.adapt.sep_sign,
        air_target: cfg.adapt.air_target,
        expected_k: Some(cfg.adapt.k),
        alr_scale: 1.0,
        air_scale: if cfg.adapt.air_enabled { 1.0 } else { 0.0 },
    }
}

/// The adaptation loop over unlabeled target inputs.
pub fn adapt(cfg: &AdaptConfig, source: &ModelParams, target_inputs: &Matrix) -> Result<Adapted> {
    cfg.validate()?;
    let dims = source.dims();
    if dims != cfg.model_dims() {
        return Err(AltError::Config(format!(
            "checkpoint dims {dims:?} do not match config dims {:?}",
            cfg.model_dims()
        )));
    }
    if target_inputs.cols() != dims.input_dim {
        return Err(AltError::DimensionMismatch {
            context: "target inputs",
            expected: dims.input_dim,
            got: target_inputs.cols(),
        });
    }
    let n = target_inputs.rows();
    let a = &cfg.adapt;
    if a.k >= n {
        return Err(AltError::Config(format!(
            "K = {} needs more than {n} target samples",
            a.k
        )));
    }
    let mut params = source.clone();
    let mut bank = FeatureBank::init(&params, target_inputs)?;
    if bank.feature_dim() != dims.embedding_dim() {
        return Err(AltError::DimensionMismatch {
            context: "bank width vs model embedding",
            expected: dims.embedding_dim(),
            got: bank.feature_dim(),
        });
    }
    let max_iter = adapt_max_iter(cfg, n);
    let o = &cfg.optimizer;
    let mut opt = OptimizerState::new(
        &params,
        max_iter,
        o.lr,
        o.momentum,
        o.weight_decay,
        o.multipliers(),
    );
    let mut state = LearningState::new(dims.num_classes, a.alpha, a.tau_aggregate)?;
    let augmenter = Augmenter::new(cfg.augment, crate::data::column_sd(target_inputs))?;
    let mut sampler = BatchSampler::new(n, a.batch_size, rng(cfg.seed, STREAM_SHUFFLE));
    let mut aug_rng = rng(cfg.seed, STREAM_AUGMENT);
    let opts = objective_options(cfg);
    let mut records = Vec::with_capacity(max_iter);

    for iter in 0..max_iter {
        let (indices, new_epoch) = sampler.next_batch();
        if let Some(e) = a.bank_refresh_epochs {
            if new_epoch && e > 0 && sampler.epoch > 1 && (sampler.epoch - 1).is_multiple_of(e) {
                bank = FeatureBank::init(&params, target_inputs)?;
            }
        }
        let b = prepare_batch(&params, target_inputs, &indices, &augmenter, &mut aug_rng)?;
        let confidences: Vec<f64> = b.probs.iter_rows().map(max_value).collect();
        state.update_tau(&confidences)?;
        state.refresh(bank.probs())?;
        let part = partition(&b.probs, &state.thresholds, a.division)?;
        let inner_ids: Vec<usize> = part.inner.iter().map(|&k| indices[k]).collect();
        let neighbors = gather_neighbors(&bank, &inner_ids, a.k, a.weighting)?;
        let lambda = lambda_schedule(iter, max_iter, a.beta_sched)?;
        let batch = ObjectiveBatch {
            clean: &b.clean,
            strong: &b.strong,
            weak_probs: &b.weak_probs,
            inner: &part.inner,
            neighbors: &neighbors,
            outliers: &part.outliers,
            lambda,
        };
        let (report, grads) = loss_gradients(&params, &batch, &opts).map_err(|e| match e {
            AltError::NonFiniteLoss { .. } => AltError::Diverged { iter },
            other => other,
        })?;
        sgd_update(&mut params, &grads, &mut opt)?;
        if !params.is_finite() {
            return Err(AltError::Diverged { iter });
        }
        bank.update(&indices, &b.z, &b.probs)?;
        records.push(IterRecord {
            iter,
            loss: report,
            tau: state.tau,
            sigma: state.sigma.clone(),
            thresholds: state.thresholds.clone(),
            batch_size: indices.len(),
        });
    }
    Ok(Adapted {
        params,
        opt,
        records,
        bank,
    })
}

pub fn metrics_header(num_classes: usize) -> String {
    let mut s = String::from("iter,alr,sep,air,lambda,total,inner_count,outlier_count,tau");
    for c in 0..num_classes {
        let _ = write!(s, ",sigma_{c}");
    }
    for c in 0..num_classes {
        let _ = write!(s, ",threshold_{c}");
    }
    s
}

pub fn metrics_csv(records: &[IterRecord], num_classes: usize) -> String {
    let mut s = metrics_header(num_classes);
    s.push('\n');
    for r in records {
        let l = &r.loss;
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.iter, l.alr, l.sep, l.air, l.lambda, l.total, l.inner_count, l.outlier_count, r.tau
        );
        for v in &r.sigma {
            let _ = write!(s, ",{v}");
        }
        for v in &r.thresholds {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn write_effective_config(cfg: &AdaptConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    Ok(())
}

fn meta_for(cfg: &AdaptConfig, iteration: usize) -> CheckpointMeta {
    CheckpointMeta {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        iteration,
        config_json: Some(serde_json::to_string(cfg).expect("config serializes")),
    }
}

fn eval_line(name: &str, e: &Evaluation) -> String {
    let per: Vec<String> = e.per_class.iter().map(|a| format!("{a:.4}")).collect();
    format!(
        "{name}_accuracy={:.6}\n{name}_per_class={}\n",
        e.accuracy,
        per.join(",")
    )
}

pub fn source_checkpoint_path(out: &Path) -> PathBuf {
    out.join("source.altc")
}

pub fn adapted_checkpoint_path(out: &Path) -> PathBuf {
    out.join("adapted.altc")
}

/// Pretrains on the source domain and writes `source.altc` plus a summary.
pub fn cmd_pretrain(cfg: &AdaptConfig) -> Result<PathBuf> {
    let out = &cfg.out_dir;
    write_effective_config(cfg, out)?;
    let p = pretrain(cfg)?;
    let path = source_checkpoint_path(out);
    save_checkpoint(&path, &p.params, &p.opt, &meta_for(cfg, p.opt.iteration))?;
    let mut s = String::from("command=pretrain\n");
    let _ = writeln!(s, "iterations={}", p.opt.iteration);
    let _ = writeln!(s, "final_loss={}", p.final_loss);
    s += &eval_line("source", &p.source_eval);
    s += &eval_line("target_source_only", &p.target_eval);
    fs::write(out.join("pretrain_summary.txt"), s)?;
    Ok(path)
}

pub struct AdaptRun {
    pub adapted: Adapted,
    pub source_only: Evaluation,
    pub target_eval: Evaluation,
    pub metrics: String,
}

/// Adapts a source model on the target domain of `cfg` without writing files.
pub fn run_adapt(cfg: &AdaptConfig, source: &ModelParams) -> Result<AdaptRun> {
    let (_, target) = build_datasets(cfg)?;
    let source_only = evaluate(source, &target)?;
    let adapted = adapt(cfg, source, target.inputs())?;
    let target_eval = evaluate(&adapted.params, &target)?;
    let metrics = metrics_csv(&adapted.records, cfg.num_classes());
    Ok(AdaptRun {
        adapted,
        source_only,
        target_eval,
        metrics,
    })
}

/// Adapts the checkpoint at `source_ckpt`, writing `adapted.altc`,
/// `metrics.csv` and `summary.txt` under the output directory.
pub fn cmd_adapt(cfg: &AdaptConfig, source_ckpt: &Path) -> Result<AdaptRun> {
    let out = &cfg.out_dir;
    let (source, _) = load_checkpoint(source_ckpt)?;
    write_effective_config(cfg, out)?;
    let run = run_adapt(cfg, &source)?;
    fs::write(out.join("metrics.csv"), &run.metrics)?;
    save_checkpoint(
        &adapted_checkpoint_path(out),
        &run.adapted.params,
        &run.adapted.opt,
        &meta_for(cfg, run.adapted.opt.iteration),
    )?;
    let mut s = String::from("command=adapt\n");
    let _ = writeln!(s, "iterations={}", run.adapted.records.len());
    s += &eval_line("source_only", &run.source_only);
    s += &eval_line("adapted", &run.target_eval);
    fs::write(out.join("summary.txt"), s)?;
    fs::write(out.join("confusion.csv"), confusion_csv(&run.target_eval))?;
    Ok(run)
}

/// Config embedded in a checkpoint's sidecar, if any.
pub fn embedded_config(ckpt: &Path) -> Result<Option<AdaptConfig>> {
    match load_meta(ckpt)?.and_then(|m| m.config_json) {
        Some(json) => Ok(Some(AdaptConfig::from_json(&json)?)),
        None => Ok(None),
    }
}

/// Diagnostics for `params` on the target domain of `cfg`.
pub fn diagnose(
    cfg: &AdaptConfig,
    params: &ModelParams,
    reference_model: Option<&ModelParams>,
) -> Result<(DiagnosticsReport, FeatureBank, Matrix)> {
    let (_, target) = build_datasets(cfg)?;
    let bank = FeatureBank::init(params, target.inputs())?;
    let reference = match (cfg.analysis.reference, reference_model) {
        (AgreementReference::Source, Some(src)) => predict(src, target.inputs())?,
        (AgreementReference::Source, None) => predict(params, target.inputs())?,
        (AgreementReference::Truth, _) => target.labels().to_vec(),
    };
    let k_list: Vec<usize> = cfg
        .analysis
        .k_list
        .iter()
        .copied()
        .filter(|&k| k < target.len())
        .collect();
    let agreement = knn_label_agreement(&bank, &reference, &k_list, cfg.analysis.agreement)?;
    let (z, _) = params.forward_batch(target.inputs())?;
    let cosine = class_cosine_stats(&z, target.labels())?;
    let augmenter = Augmenter::new(cfg.augment, target.feature_sd())?;
    let regularizer = consistency_regularizer_estimate(
        params,
        target.inputs(),
        &augmenter,
        cfg.analysis.regularizer_view,
        cfg.analysis.regularizer_samples,
        cfg.seed.wrapping_add(STREAM_REGULARIZER),
    )?;
    let report = DiagnosticsReport {
        k_list,
        agreement,
        similarity_ratio: cosine.ratio(),
        cosine,
        evaluation: evaluate(params, &target)?,
        regularizer,
        spearman: None,
    };
    Ok((report, bank, z))
}

/// Writes `report.csv`, `report_summary.txt`, `confusion.csv`, `pca.csv` and
/// `bank.altc` for the checkpoint under the output directory. Reports from
/// different checkpoints share one schema.
pub fn cmd_analyze(cfg: &AdaptConfig, ckpt: &Path) -> Result<DiagnosticsReport> {
    let (params, _) = load_checkpoint(ckpt)?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let (report, bank, z) = diagnose(cfg, &params, None)?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    fs::write(out.join("report_summary.txt"), report.summary())?;
    fs::write(out.join("confusion.csv"), confusion_csv(&report.evaluation))?;
    let (_, target) = build_datasets(cfg)?;
    let mut pca = String::from("pc1,pc2,label\n");
    if z.cols() >= 2 {
        let proj = pca_project_2d(&z)?;
        for (i, y) in target.labels().iter().enumerate() {
            let _ = writeln!(
                pca,
                "{},{},{y}",
                proj.coords.get(i, 0),
                proj.coords.get(i, 1)
            );
        }
    }
    fs::write(out.join("pca.csv"), pca)?;
    bank.save(&out.join("bank.altc"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub preset: Preset,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub source_only: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

impl AblationTable {
    pub fn row(&self, p: Preset) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.preset == p)
    }

    pub fn source_only_mean(&self) -> f64 {
        mean_sd(&self.source_only).0
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("preset,mean_accuracy,sd_accuracy,runs");
        for seed in &self.seeds {
            let _ = write!(s, ",seed_{seed}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{},{}",
                r.preset.name(),
                r.mean,
                r.sd,
                r.accuracies.len()
            );
            for a in &r.accuracies {
                let _ = write!(s, ",{a}");
            }
            s.push('\n');
        }
        s
    }
}

/// Runs `presets` over the given seeds; one source model per seed is shared
/// by all presets.
pub fn run_ablation(cfg: &AdaptConfig, presets: &[Preset], seeds: &[u64]) -> Result<AblationTable> {
    let mut acc = vec![Vec::with_capacity(seeds.len()); presets.len()];
    let mut source_only = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut base = cfg.clone();
        base.seed = seed;
        let src = pretrain(&base)?;
        source_only.push(src.target_eval.accuracy);
        for (k, &p) in presets.iter().enumerate() {
            let mut c = base.clone();
            c.apply_preset(p);
            let run = run_adapt(&c, &src.params)?;
            log::info!(
                "seed {seed} preset {} accuracy {:.4}",
                p.name(),
                run.target_eval.accuracy
            );
            acc[k].push(run.target_eval.accuracy);
        }
    }
    let rows = presets
        .iter()
        .zip(acc)
        .map(|(&preset, accuracies)| {
            let (mean, sd) = mean_sd(&accuracies);
            AblationRow {
                preset,
                accuracies,
                mean,
                sd,
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        source_only,
        rows,
    })
}

/// Writes `ablation.csv` and `ablation_summary.txt`.
pub fn cmd_ablate(cfg: &AdaptConfig) -> Result<AblationTable> {
    let out = &cfg.out_dir;
    write_effective_config(cfg, out)?;
    let table = run_ablation(cfg, &Preset::ALL, &cfg.ablate.seeds)?;
    fs::write(out.join("ablation.csv"), table.to_csv())?;
    let (m, sd) = mean_sd(&table.source_only);
    let mut s = format!("source_only mean={m:.6} sd={sd:.6}\n");
    for r in &table.rows {
        let _ = writeln!(s, "{} mean={:.6} sd={:.6}", r.preset.name(), r.mean, r.sd);
    }
    fs::write(out.join("ablation_summary.txt"), s)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 4, rng(0, STREAM_SHUFFLE));
        let mut seen = Vec::new();
        let mut fresh_count = 0;
        for _ in 0..3 {
            let (b, fresh) = s.next_batch();
            fresh_count += usize::from(fresh);
            seen.extend(b);
        }
        assert_eq!(fresh_count, 1);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batches_per_epoch(10, 4), 3);
    }

    #[test]
    fn metrics_header_schema() {
        assert_eq!(
            metrics_header(2),
            "iter,alr,sep,air,lambda,total,inner_count,outlier_count,tau,sigma_0,sigma_1,threshold_0,threshold_1"
        );
    }
}
