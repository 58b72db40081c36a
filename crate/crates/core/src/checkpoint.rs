//! Model checkpoints: a tensor container plus a plain-text `.meta` sidecar.
//!
//! Container entries: `dims` `[input, hidden, feature, bottleneck (0 = none),
//! classes]`, `lr_mult` `[backbone, head]`, `optim` `[iteration, max_iter,
//! base_lr, momentum, weight_decay]`, then one entry per parameter tensor
//! under its own name and one `momentum/<name>` entry per buffer.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::container::{Container, ContainerKind, Entry};
use crate::error::{AltError, Result};
use crate::model::{ModelDims, ModelParams};
use crate::optim::{LrMultipliers, OptimizerState};

/// Contents of the sidecar next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    pub iteration: usize,
    /// Effective config as a single-line JSON document.
    pub config_json: Option<String>,
}

impl CheckpointMeta {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format_version={}", crate::container::CONTAINER_VERSION);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "config_hash={}", self.config_hash);
        let _ = writeln!(s, "iteration={}", self.iteration);
        if let Some(c) = &self.config_json {
            let _ = writeln!(s, "config={c}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = CheckpointMeta::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AltError::Format(format!("bad sidecar line `{line}`")))?;
            let bad = |_| AltError::Format(format!("bad value for `{k}`"));
            match k {
                "format_version" => {}
                "seed" => meta.seed = v.parse().map_err(bad)?,
                "config_hash" => meta.config_hash = v.to_string(),
                "iteration" => meta.iteration = v.parse().map_err(bad)?,
                "config" => meta.config_json = Some(v.to_string()),
                _ => log::warn!("ignoring unknown sidecar key `{k}`"),
            }
        }
        Ok(meta)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn encode_checkpoint(params: &ModelParams, opt: &OptimizerState) -> Container {
    let d = params.dims();
    let mut c = Container::new(ContainerKind::Checkpoint);
    c.push(Entry::scalars(
        "dims",
        &[
            d.input_dim as f64,
            d.hidden_dim as f64,
            d.feature_dim as f64,
            d.bottleneck_dim.unwrap_or(0) as f64,
            d.num_classes as f64,
        ],
    ));
    c.push(Entry::scalars(
        "lr_mult",
        &[opt.lr_mult.backbone, opt.lr_mult.head],
    ));
    c.push(Entry::scalars(
        "optim",
        &[
            opt.iteration as f64,
            opt.max_iter as f64,
            opt.base_lr,
            opt.momentum,
            opt.weight_decay,
        ],
    ));
    for t in params.tensors() {
        c.push(Entry::new(t.name.clone(), t.shape.clone(), t.data.clone()));
    }
    for (t, buf) in params.tensors().iter().zip(&opt.momentum_buffers) {
        c.push(Entry::new(
            format!("momentum/{}", t.name),
            t.shape.clone(),
            buf.clone(),
        ));
    }
    c
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
        return Err(AltError::Format(format!("{what} is not a count: {v}")));
    }
    Ok(v as usize)
}

pub fn decode_checkpoint(c: &Container) -> Result<(ModelParams, OptimizerState)> {
    if c.kind != ContainerKind::Checkpoint {
        return Err(AltError::Format(
            "container is not a model checkpoint".into(),
        ));
    }
    let dims = c.get("dims")?;
    if dims.data.len() != 5 {
        return Err(AltError::Format("dims header must have 5 entries".into()));
    }
    let bottleneck = as_count(dims.data[3], "bottleneck_dim")?;
    let model_dims = ModelDims {
        input_dim: as_count(dims.data[0], "input_dim")?,
        hidden_dim: as_count(dims.data[1], "hidden_dim")?,
        feature_dim: as_count(dims.data[2], "feature_dim")?,
        bottleneck_dim: (bottleneck > 0).then_some(bottleneck),
        num_classes: as_count(dims.data[4], "num_classes")?,
    };
    let mut params = ModelParams::zeros(model_dims)
        .map_err(|e| AltError::Format(format!("dims header: {e}")))?;
    let lr = c.get("lr_mult")?;
    let o = c.get("optim")?;
    if lr.data.len() != 2 || o.data.len() != 5 {
        return Err(AltError::Format("bad optimizer header".into()));
    }
    let mut momentum_buffers = Vec::new();
    for t in params.tensors_mut() {
        let e = c.get(&t.name)?;
        if e.dims != t.shape {
            return Err(AltError::Format(format!(
                "tensor `{}` has shape {:?}, dims header implies {:?}",
                t.name, e.dims, t.shape
            )));
        }
        t.data.copy_from_slice(&e.data);
        let m = c.get(&format!("momentum/{}", t.name))?;
        if m.dims != t.shape {
            return Err(AltError::Format(format!(
                "momentum buffer `{}` misshapen",
                t.name
            )));
        }
        momentum_buffers.push(m.data.clone());
    }
    let opt = OptimizerState {
        momentum_buffers,
        iteration: as_count(o.data[0], "iteration")?,
        max_iter: as_count(o.data[1], "max_iter")?,
        base_lr: o.data[2],
        momentum: o.data[3],
        weight_decay: o.data[4],
        lr_mult: LrMultipliers {
            backbone: lr.data[0],
            head: lr.data[1],
        },
    };
    Ok((params, opt))
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    opt: &OptimizerState,
    meta: &CheckpointMeta,
) -> Result<()> {
    encode_checkpoint(params, opt).write(path)?;
    fs::write(sidecar_path(path), meta.to_text())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, OptimizerState)> {
    decode_checkpoint(&Container::read(path)?)
}

/// Reads the sidecar; a missing sidecar yields `Ok(None)`.
pub fn load_meta(path: &Path) -> Result<Option<CheckpointMeta>> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    CheckpointMeta::parse(&fs::read_to_string(side)?).map(Some)
}
