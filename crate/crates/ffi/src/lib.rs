//! C ABI over `alt-core`.
//!
//! Objects cross the boundary as opaque handles created by `alt_*_new` /
//! `alt_*_load` / `alt_*_build` and released with the matching `alt_*_free`.
//! Every fallible call returns an [`AltStatus`]; on failure the message is
//! available from [`alt_last_error`] on the same thread. Output buffers are
//! caller-allocated and their lengths are checked.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use alt_core::bank::FeatureBank;
use alt_core::checkpoint::load_checkpoint;
use alt_core::division::{self, DivisionMode, LearningState, TauAggregate};
use alt_core::model::ModelParams;
use alt_core::numerics::Matrix;
use alt_core::optim::lambda_schedule;
use alt_core::AltError;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AltStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    IndexOutOfRange = 4,
    NonFinite = 5,
    Io = 6,
    Format = 7,
    Version = 8,
    BufferTooSmall = 9,
    Panic = 99,
}

impl From<&AltError> for AltStatus {
    fn from(e: &AltError) -> Self {
        match e {
            AltError::NonFinite { .. }
            | AltError::NonFiniteLoss { .. }
            | AltError::Diverged { .. } => AltStatus::NonFinite,
            AltError::ZeroVector { .. } => AltStatus::InvalidArgument,
            AltError::DimensionMismatch { .. } => AltStatus::DimensionMismatch,
            AltError::IndexOutOfRange { .. } => AltStatus::IndexOutOfRange,
            AltError::Io(_) => AltStatus::Io,
            AltError::Format(_) | AltError::Json(_) => AltStatus::Format,
            AltError::Version { .. } => AltStatus::Version,
            AltError::InvalidArgument(_) | AltError::Config(_) => AltStatus::InvalidArgument,
        }
    }
}

/// Opaque model handle.
pub struct AltModel(ModelParams);

/// Opaque feature bank handle.
pub struct AltBank(FeatureBank);

/// Opaque learning-state handle.
pub struct AltLearningState(LearningState);

/// Layer widths of a model. `bottleneck_dim` is 0 when there is none.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AltModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub bottleneck_dim: usize,
    pub num_classes: usize,
    /// Width of the bank feature `z`.
    pub embedding_dim: usize,
}

/// Division modes for [`alt_partition`].
pub const ALT_DIVISION_LITERAL: u32 = 0;
pub const ALT_DIVISION_PROSE: u32 = 1;
pub const ALT_DIVISION_OFF: u32 = 2;

/// Aggregates for [`alt_state_new`].
pub const ALT_TAU_MAX: u32 = 0;
pub const ALT_TAU_MEAN: u32 = 1;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: AltStatus, msg: impl Into<String>) -> AltStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), AltStatus>) -> AltStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AltStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(AltStatus::Panic, "panic inside alt-ffi"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, AltStatus>;
}

impl<T> OrStatus<T> for alt_core::Result<T> {
    fn or_status(self) -> Result<T, AltStatus> {
        self.map_err(|e| fail(AltStatus::from(&e), e.to_string()))
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, AltStatus> {
    p.as_ref()
        .ok_or_else(|| fail(AltStatus::NullPointer, format!("{what} is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, AltStatus> {
    p.as_mut()
        .ok_or_else(|| fail(AltStatus::NullPointer, format!("{what} is null")))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], AltStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(AltStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(
    p: *mut T,
    len: usize,
    need: usize,
    what: &str,
) -> Result<&'a mut [T], AltStatus> {
    if len < need {
        return Err(fail(
            AltStatus::BufferTooSmall,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(AltStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, need))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, AltStatus> {
    if p.is_null() {
        return Err(fail(AltStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(AltStatus::InvalidArgument, "path is not valid utf-8"))
}

/// Message for the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next `alt_*` call on this thread.
#[no_mangle]
pub extern "C" fn alt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a model checkpoint.
#[no_mangle]
pub unsafe extern "C" fn alt_model_load(path: *const c_char, out: *mut *mut AltModel) -> AltStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let (params, _) = load_checkpoint(&path_arg(path)?).or_status()?;
        *out = Box::into_raw(Box::new(AltModel(params)));
        Ok(())
    })
}

/// Freshly initialized model with seeded random weights.
#[no_mangle]
pub unsafe extern "C" fn alt_model_new(
    dims: *const AltModelDims,
    seed: u64,
    out: *mut *mut AltModel,
) -> AltStatus {
    guard(|| {
        let d = deref(dims, "dims")?;
        let out = deref_mut(out, "out")?;
        let params = ModelParams::init(
            alt_core::model::ModelDims {
                input_dim: d.input_dim,
                hidden_dim: d.hidden_dim,
                feature_dim: d.feature_dim,
                bottleneck_dim: (d.bottleneck_dim > 0).then_some(d.bottleneck_dim),
                num_classes: d.num_classes,
            },
            seed,
        )
        .or_status()?;
        *out = Box::into_raw(Box::new(AltModel(params)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn alt_model_free(model: *mut AltModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn alt_model_dims(
    model: *const AltModel,
    out: *mut AltModelDims,
) -> AltStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let out = deref_mut(out, "out")?;
        let d = m.0.dims();
        *out = AltModelDims {
            input_dim: d.input_dim,
            hidden_dim: d.hidden_dim,
            feature_dim: d.feature_dim,
            bottleneck_dim: d.bottleneck_dim.unwrap_or(0),
            num_classes: d.num_classes,
            embedding_dim: d.embedding_dim(),
        };
        Ok(())
    })
}

/// Forward pass on one input. `z_out` receives the raw feature
/// (`embedding_dim` values), `p_out` the class probabilities. Either output
/// may be null with length 0 to skip it.
#[no_mangle]
pub unsafe extern "C" fn alt_model_forward(
    model: *const AltModel,
    x: *const f64,
    x_len: usize,
    z_out: *mut f64,
    z_len: usize,
    p_out: *mut f64,
    p_len: usize,
) -> AltStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let f = m.0.forward(input(x, x_len, "x")?).or_status()?;
        if !(z_out.is_null() && z_len == 0) {
            output(z_out, z_len, f.z.len(), "z_out")?.copy_from_slice(&f.z);
        }
        if !(p_out.is_null() && p_len == 0) {
            output(p_out, p_len, f.p.len(), "p_out")?.copy_from_slice(&f.p);
        }
        Ok(())
    })
}

/// Builds a bank from a row-major `rows x cols` input matrix.
#[no_mangle]
pub unsafe extern "C" fn alt_bank_build(
    model: *const AltModel,
    inputs: *const f64,
    rows: usize,
    cols: usize,
    out: *mut *mut AltBank,
) -> AltStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let out = deref_mut(out, "out")?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| fail(AltStatus::InvalidArgument, "rows * cols overflows"))?;
        let x = Matrix::from_vec(rows, cols, input(inputs, n, "inputs")?.to_vec()).or_status()?;
        let bank = FeatureBank::init(&m.0, &x).or_status()?;
        *out = Box::into_raw(Box::new(AltBank(bank)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn alt_bank_load(path: *const c_char, out: *mut *mut AltBank) -> AltStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let bank = FeatureBank::load(&path_arg(path)?).or_status()?;
        *out = Box::into_raw(Box::new(AltBank(bank)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn alt_bank_save(bank: *const AltBank, path: *const c_char) -> AltStatus {
    guard(|| {
        let b = deref(bank, "bank")?;
        b.0.save(&path_arg(path)?).or_status()
    })
}

#[no_mangle]
pub unsafe extern "C" fn alt_bank_free(bank: *mut AltBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Number of rows, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn alt_bank_len(bank: *const AltBank) -> usize {
    bank.as_ref().map_or(0, |b| b.0.len())
}

/// Copies row `index` of the bank: `feature_out` gets the unit feature,
/// `prob_out` the stored prediction.
#[no_mangle]
pub unsafe extern "C" fn alt_bank_row(
    bank: *const AltBank,
    index: usize,
    feature_out: *mut f64,
    feature_len: usize,
    prob_out: *mut f64,
    prob_len: usize,
) -> AltStatus {
    guard(|| {
        let b = &deref(bank, "bank")?.0;
        if index >= b.len() {
            return Err(fail(
                AltStatus::IndexOutOfRange,
                format!("row {index} of {}", b.len()),
            ));
        }
        output(feature_out, feature_len, b.feature_dim(), "feature_out")?
            .copy_from_slice(b.features().row(index));
        output(prob_out, prob_len, b.num_classes(), "prob_out")?
            .copy_from_slice(b.probs().row(index));
        Ok(())
    })
}

/// The `k` nearest rows to row `query` by cosine similarity, excluding
/// `query`, sorted by descending similarity with ties to the smaller index.
#[no_mangle]
pub unsafe extern "C" fn alt_bank_knn(
    bank: *const AltBank,
    query: usize,
    k: usize,
    indices_out: *mut usize,
    similarities_out: *mut f64,
    out_len: usize,
) -> AltStatus {
    guard(|| {
        let b = deref(bank, "bank")?;
        let nb = b.0.knn(query, k).or_status()?;
        output(indices_out, out_len, k, "indices_out")?.copy_from_slice(&nb.indices);
        output(similarities_out, out_len, k, "similarities_out")?.copy_from_slice(&nb.similarities);
        Ok(())
    })
}

/// Per-class division thresholds from learning-effect counts. Unreachable
/// thresholds are written as `+inf`.
#[no_mangle]
pub unsafe extern "C" fn alt_division_thresholds(
    sigma: *const u64,
    num_classes: usize,
    out: *mut f64,
    out_len: usize,
) -> AltStatus {
    guard(|| {
        if num_classes > 0 && sigma.is_null() {
            return Err(fail(AltStatus::NullPointer, "sigma is null"));
        }
        let counts: Vec<usize> = if num_classes == 0 {
            Vec::new()
        } else {
            slice::from_raw_parts(sigma, num_classes)
                .iter()
                .map(|&v| v as usize)
                .collect()
        };
        let t = division::division_thresholds(&counts).or_status()?;
        output(out, out_len, t.len(), "out")?.copy_from_slice(&t);
        Ok(())
    })
}

/// Marks each row of a row-major `rows x num_classes` probability matrix as
/// outlier (1) or inner (0).
#[no_mangle]
pub unsafe extern "C" fn alt_partition(
    probs: *const f64,
    rows: usize,
    num_classes: usize,
    thresholds: *const f64,
    mode: u32,
    outlier_mask_out: *mut u8,
    mask_len: usize,
) -> AltStatus {
    guard(|| {
        let mode = match mode {
            ALT_DIVISION_LITERAL => DivisionMode::Literal,
            ALT_DIVISION_PROSE => DivisionMode::Prose,
            ALT_DIVISION_OFF => DivisionMode::Off,
            m => {
                return Err(fail(
                    AltStatus::InvalidArgument,
                    format!("unknown division mode {m}"),
                ))
            }
        };
        let n = rows
            .checked_mul(num_classes)
            .ok_or_else(|| fail(AltStatus::InvalidArgument, "rows * classes overflows"))?;
        let p =
            Matrix::from_vec(rows, num_classes, input(probs, n, "probs")?.to_vec()).or_status()?;
        let t = input(thresholds, num_classes, "thresholds")?;
        let part = division::partition(&p, t, mode).or_status()?;
        let mask = output(outlier_mask_out, mask_len, rows, "outlier_mask_out")?;
        mask.fill(0);
        for i in part.outliers {
            mask[i] = 1;
        }
        Ok(())
    })
}

/// `(1 + 10 iter / max_iter)^(-beta)`.
#[no_mangle]
pub unsafe extern "C" fn alt_lambda_schedule(
    iter: usize,
    max_iter: usize,
    beta: f64,
    out: *mut f64,
) -> AltStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = lambda_schedule(iter, max_iter, beta).or_status()?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn alt_state_new(
    num_classes: usize,
    alpha: f64,
    aggregate: u32,
    out: *mut *mut AltLearningState,
) -> AltStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let agg = match aggregate {
            ALT_TAU_MAX => TauAggregate::Max,
            ALT_TAU_MEAN => TauAggregate::Mean,
            a => {
                return Err(fail(
                    AltStatus::InvalidArgument,
                    format!("unknown aggregate {a}"),
                ))
            }
        };
        let s = LearningState::new(num_classes, alpha, agg).or_status()?;
        *out = Box::into_raw(Box::new(AltLearningState(s)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn alt_state_free(state: *mut AltLearningState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// Advances the confidence EMA with a batch of per-sample top confidences.
#[no_mangle]
pub unsafe extern "C" fn alt_state_update_tau(
    state: *mut AltLearningState,
    confidences: *const f64,
    len: usize,
    tau_out: *mut f64,
) -> AltStatus {
    guard(|| {
        let s = deref_mut(state, "state")?;
        let tau =
            s.0.update_tau(input(confidences, len, "confidences")?)
                .or_status()?;
        if let Some(t) = tau_out.as_mut() {
            *t = tau;
        }
        Ok(())
    })
}

/// Recomputes learning effects and thresholds from the bank's predictions
/// and copies the thresholds out.
#[no_mangle]
pub unsafe extern "C" fn alt_state_refresh(
    state: *mut AltLearningState,
    bank: *const AltBank,
    thresholds_out: *mut f64,
    out_len: usize,
) -> AltStatus {
    guard(|| {
        let s = deref_mut(state, "state")?;
        let b = deref(bank, "bank")?;
        if b.0.num_classes() != s.0.num_classes() {
            return Err(fail(
                AltStatus::DimensionMismatch,
                "bank and state class counts differ",
            ));
        }
        s.0.refresh(b.0.probs()).or_status()?;
        output(thresholds_out, out_len, s.0.num_classes(), "thresholds_out")?
            .copy_from_slice(&s.0.thresholds);
        Ok(())
    })
}

/// Current EMA threshold, or NaN for a null handle.
#[no_mangle]
pub unsafe extern "C" fn alt_state_tau(state: *const AltLearningState) -> f64 {
    state.as_ref().map_or(f64::NAN, |s| s.0.tau)
}
