//! Run configuration. Every field has a default, so `{}` is a complete
//! config file; CLI `--set path=value` overrides are applied on the JSON
//! form before deserializing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::analysis::{AgreementMode, AugmentView};
use crate::data::{AugmentSpec, MixtureSpec};
use crate::division::{DivisionMode, TauAggregate};
use crate::error::{AltError, Result};
use crate::model::ModelDims;
use crate::objectives::{AirTarget, SepSign};
use crate::optim::LrMultipliers;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    TwoMoons {
        n_per_class: usize,
        noise_sd: f64,
        /// Rotation of the target domain; the source is unrotated.
        rotation_degrees: f64,
    },
    GaussianMixture(MixtureSpec),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::TwoMoons {
            n_per_class: 300,
            noise_sd: 0.1,
            rotation_degrees: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// `null` removes the bottleneck.
    pub bottleneck_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            feature_dim: 32,
            bottleneck_dim: Some(16),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrPreset {
    /// Added layers at a tenth of the backbone rate.
    #[default]
    HeadSlower,
    /// Added layers at ten times the backbone rate.
    HeadFaster,
    /// Use `lr_mult` as given.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_preset: LrPreset,
    pub lr_mult: LrMultipliers,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            // The adaptation losses are batch sums, so the step is scaled down
            // relative to a mean-reduced objective.
            lr: 1e-5,
            momentum: 0.9,
            weight_decay: 0.005,
            lr_preset: LrPreset::HeadSlower,
            lr_mult: LrMultipliers::HEAD_SLOWER,
        }
    }
}

impl OptimizerConfig {
    pub fn multipliers(&self) -> LrMultipliers {
        match self.lr_preset {
            LrPreset::HeadSlower => LrMultipliers::HEAD_SLOWER,
            LrPreset::HeadFaster => LrMultipliers::HEAD_FASTER,
            LrPreset::Custom => self.lr_mult,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub max_iter: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 0 disables smoothing.
    pub label_smoothing: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            max_iter: 600,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            label_smoothing: 0.1,
        }
    }
}

/// Neighbor weights in the local-consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NeighborWeighting {
    /// Cosine similarity from the bank.
    #[default]
    Cosine,
    /// Every neighbor weighted 1.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptSection {
    pub k: usize,
    pub alpha: f64,
    pub beta_sched: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_iter: Option<usize>,
    pub division: DivisionMode,
    pub air_target: AirTarget,
    pub air_enabled: bool,
    pub sep_sign: SepSign,
    pub tau_aggregate: TauAggregate,
    pub weighting: NeighborWeighting,
    /// Rebuild the whole bank every this many epochs; `null` never.
    pub bank_refresh_epochs: Option<usize>,
}

impl Default for AdaptSection {
    fn default() -> Self {
        AdaptSection {
            k: 3,
            alpha: 0.9,
            beta_sched: 0.0,
            batch_size: 64,
            epochs: 30,
            max_iter: None,
            division: DivisionMode::Literal,
            air_target: AirTarget::Hard,
            air_enabled: true,
            sep_sign: SepSign::Dispersion,
            tau_aggregate: TauAggregate::Max,
            weighting: NeighborWeighting::Cosine,
            bank_refresh_epochs: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AgreementReference {
    /// Ground-truth target labels.
    #[default]
    Truth,
    /// Predictions of the source model.
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub k_list: Vec<usize>,
    pub agreement: AgreementMode,
    pub reference: AgreementReference,
    pub regularizer_samples: usize,
    pub regularizer_view: AugmentView,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            k_list: (1..=7).collect(),
            agreement: AgreementMode::All,
            reference: AgreementReference::Truth,
            regularizer_samples: 8,
            regularizer_view: AugmentView::Weak,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: (0..5).collect(),
        }
    }
}

/// Method variants compared in the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Uniform neighbor weights, no division, no input consistency.
    Baseline,
    /// Cosine neighbor weights, no division.
    Alr,
    /// Uniform neighbor weights with division and input consistency on outliers.
    Air,
    /// Cosine weights, division and input consistency.
    Full,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Baseline, Preset::Alr, Preset::Air, Preset::Full];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Alr => "alr",
            Preset::Air => "air",
            Preset::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptSection,
    pub augment: AugmentSpec,
    pub analysis: AnalysisConfig,
    pub ablate: AblateConfig,
    pub out_dir: PathBuf,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptSection::default(),
            augment: AugmentSpec::default(),
            analysis: AnalysisConfig::default(),
            ablate: AblateConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl AdaptConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Loads `path` (or defaults) and applies `key.path=value` overrides;
    /// values parse as JSON, falling back to a bare string.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => serde_json::from_str::<Value>(&std::fs::read_to_string(p)?)?,
            None => Value::Object(Default::default()),
        };
        let mut full = serde_json::to_value(serde_json::from_value::<AdaptConfig>(base)?)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| AltError::Config(format!("override `{o}` is not key=value")))?;
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut full, key, value)?;
        }
        let cfg: AdaptConfig = serde_json::from_value(full)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 over the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        let a = &mut self.adapt;
        match preset {
            Preset::Baseline => {
                a.weighting = NeighborWeighting::Uniform;
                a.division = DivisionMode::Off;
                a.air_enabled = false;
            }
            Preset::Alr => {
                a.weighting = NeighborWeighting::Cosine;
                a.division = DivisionMode::Off;
                a.air_enabled = false;
            }
            Preset::Air => {
                a.weighting = NeighborWeighting::Uniform;
                if a.division == DivisionMode::Off {
                    a.division = DivisionMode::Literal;
                }
                a.air_enabled = true;
            }
            Preset::Full => {
                a.weighting = NeighborWeighting::Cosine;
                if a.division == DivisionMode::Off {
                    a.division = DivisionMode::Literal;
                }
                a.air_enabled = true;
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.dataset {
            DatasetConfig::TwoMoons { .. } => 2,
            DatasetConfig::GaussianMixture(m) => m.num_classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.dataset {
            DatasetConfig::TwoMoons { .. } => 2,
            DatasetConfig::GaussianMixture(m) => m.dim,
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.input_dim(),
            hidden_dim: self.model.hidden_dim,
            feature_dim: self.model.feature_dim,
            bottleneck_dim: self.model.bottleneck_dim,
            num_classes: self.num_classes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_dims().validate()?;
        self.augment.validate()?;
        let a = &self.adapt;
        if a.k == 0 {
            return Err(AltError::Config("adapt.k must be at least 1".into()));
        }
        if a.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(AltError::Config("batch sizes must be positive".into()));
        }
        if !(a.alpha > 0.0 && a.alpha < 1.0) {
            return Err(AltError::Config("adapt.alpha must lie in (0, 1)".into()));
        }
        if !(a.beta_sched >= 0.0) {
            return Err(AltError::Config("adapt.beta_sched must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.pretrain.label_smoothing) {
            return Err(AltError::Config(
                "pretrain.label_smoothing must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            AltError::Config(format!("`{key}`: `{part}` is not inside an object"))
        })?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(AltError::Config(format!("unknown config key `{key}`")));
            }
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| AltError::Config(format!("unknown config key `{key}`")))?;
    }
    Ok(())
}
