//! C ABI over `mlip-core`.
//!
//! Every fallible call returns an [`MlipStatus`]; on failure the message is
//! kept per thread and can be copied out with [`mlip_last_error`]. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use mlip_core::category_cl::sinkhorn;
use mlip_core::global_ita::{info_nce, Direction};
use mlip_core::harness::config::TrainConfig;
use mlip_core::harness::eval::EvalMetrics;
use mlip_core::harness::gradcheck::{check_model, ModelCheckOptions};
use mlip_core::harness::model::Model;
use mlip_core::harness::train::{evaluate_held_out, load_checkpoint, train, RunFiles, CHECKPOINT_FILE, CONFIG_FILE};
use mlip_core::numerics::Mat;
use mlip_core::MlipError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlipStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Shape = 3,
    NonFinite = 4,
    Config = 5,
    Format = 6,
    Diverged = 7,
    Io = 8,
    Utf8 = 9,
    Panic = 10,
}

/// Training configuration.
pub struct MlipConfig {
    inner: TrainConfig,
}

/// A model together with the configuration it was built from.
pub struct MlipModel {
    cfg: TrainConfig,
    model: Model,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MlipEvalMetrics {
    pub recall_i2t_at_1: f64,
    pub recall_i2t_at_5: f64,
    pub recall_t2i_at_1: f64,
    pub recall_t2i_at_5: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub cluster_purity: f64,
    pub nmi: f64,
    pub false_negative_gap: f64,
}

impl From<EvalMetrics> for MlipEvalMetrics {
    fn from(m: EvalMetrics) -> Self {
        Self {
            recall_i2t_at_1: m.recall_i2t_at_1,
            recall_i2t_at_5: m.recall_i2t_at_5,
            recall_t2i_at_1: m.recall_t2i_at_1,
            recall_t2i_at_5: m.recall_t2i_at_5,
            recall_at_1: m.recall_at_1,
            recall_at_5: m.recall_at_5,
            cluster_purity: m.cluster_purity,
            nmi: m.nmi,
            false_negative_gap: m.false_negative_gap,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(MlipStatus, String);

impl From<MlipError> for Failure {
    fn from(e: MlipError) -> Self {
        let status = match e {
            MlipError::InvalidInput(_) => MlipStatus::InvalidInput,
            MlipError::Shape(_) => MlipStatus::Shape,
            MlipError::NonFinite(_) => MlipStatus::NonFinite,
            MlipError::Config(_) => MlipStatus::Config,
            MlipError::Format(_) => MlipStatus::Format,
            MlipError::Diverged(_) => MlipStatus::Diverged,
            MlipError::Io(_) => MlipStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MlipStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MlipStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (MlipStatus::Ok, String::new()),
        Ok(Err(Failure(s, m))) => (s, m),
        Err(_) => (MlipStatus::Panic, "panic inside mlip".to_string()),
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(MlipStatus::Utf8, format!("{what} is not UTF-8")))
}

unsafe fn path(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    text(p, what).map(PathBuf::from)
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Mat, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let n = rows.checked_mul(cols).ok_or_else(|| Failure(MlipStatus::Shape, format!("{what}: {rows}x{cols} overflows")))?;
    let data = std::slice::from_raw_parts(p, n).to_vec();
    Ok(Mat::from_shape_vec((rows, cols), data).expect("length matches"))
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mlip_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mlip_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// A configuration holding every default.
#[no_mangle]
pub extern "C" fn mlip_config_new() -> *mut MlipConfig {
    Box::into_raw(Box::new(MlipConfig { inner: TrainConfig::default() }))
}

/// Parse a `key = value` config file into a new handle.
///
/// # Safety
/// `file` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mlip_config_load(file: *const c_char, out: *mut *mut MlipConfig) -> MlipStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = TrainConfig::load(path(file, "file")?)?;
        *out = Box::into_raw(Box::new(MlipConfig { inner }));
        Ok(())
    })
}

/// Set one key as it would appear in a config file.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be C strings.
#[no_mangle]
pub unsafe extern "C" fn mlip_config_set(cfg: *mut MlipConfig, key: *const c_char, value: *const c_char) -> MlipStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        cfg.inner.set(text(key, "key")?, text(value, "value")?)?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mlip_config_free(cfg: *mut MlipConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Train with `cfg`. When `out_dir` is non-null, run files (metrics.csv,
/// config.txt, checkpoint.bin) are written there. `metrics` may be null.
///
/// # Safety
/// `cfg` must be a live handle, `out_dir` null or a C string, `out`
/// writable, `metrics` null or writable.
#[no_mangle]
pub unsafe extern "C" fn mlip_train(
    cfg: *const MlipConfig,
    out_dir: *const c_char,
    out: *mut *mut MlipModel,
    metrics: *mut MlipEvalMetrics,
) -> MlipStatus {
    guard(|| {
        let cfg = &cfg.as_ref().ok_or_else(|| null("cfg"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let files = if out_dir.is_null() { None } else { Some(RunFiles::new(path(out_dir, "out_dir")?)?) };
        let run = train(cfg, files.as_ref())?;
        if let Some(m) = metrics.as_mut() {
            *m = run.final_eval.into();
        }
        *out = Box::into_raw(Box::new(MlipModel { cfg: cfg.clone(), model: run.model }));
        Ok(())
    })
}

/// Load a checkpoint; `config.txt` must sit in the same directory.
///
/// # Safety
/// `checkpoint` must be a C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mlip_model_load(checkpoint: *const c_char, out: *mut *mut MlipModel) -> MlipStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (cfg, model) = load_checkpoint(&path(checkpoint, "checkpoint")?)?;
        *out = Box::into_raw(Box::new(MlipModel { cfg, model }));
        Ok(())
    })
}

/// Write `checkpoint.bin` and `config.txt` into `dir`, creating it.
///
/// # Safety
/// `model` must be a live handle and `dir` a C string.
#[no_mangle]
pub unsafe extern "C" fn mlip_model_save(model: *const MlipModel, dir: *const c_char) -> MlipStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let dir = path(dir, "dir")?;
        std::fs::create_dir_all(&dir).map_err(MlipError::from)?;
        m.model.to_checkpoint().save(dir.join(CHECKPOINT_FILE))?;
        std::fs::write(Path::new(&dir).join(CONFIG_FILE), m.cfg.to_text()).map_err(MlipError::from)?;
        Ok(())
    })
}

/// Held-out metrics for `model` on the dataset its configuration describes.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mlip_model_evaluate(model: *const MlipModel, out: *mut MlipEvalMetrics) -> MlipStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = evaluate_held_out(&m.model, &m.cfg)?.into();
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mlip_model_free(model: *mut MlipModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Balanced assignment of a row-major `b × c` score matrix; the `b × c`
/// codes (rows summing to 1) go to `codes`.
///
/// # Safety
/// `scores` and `codes` must each hold `b·c` doubles.
#[no_mangle]
pub unsafe extern "C" fn mlip_sinkhorn(scores: *const f64, b: usize, c: usize, eps: f64, iters: usize, codes: *mut f64) -> MlipStatus {
    guard(|| {
        let s = matrix(scores, b, c, "scores")?;
        if codes.is_null() {
            return Err(null("codes"));
        }
        let u = sinkhorn(&s, eps, iters)?.u;
        std::slice::from_raw_parts_mut(codes, b * c).copy_from_slice(u.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Mean InfoNCE of row-major `b × d` anchors against candidates.
/// `column_anchored` selects the text-to-image direction.
///
/// # Safety
/// `anchors` and `candidates` must each hold `b·d` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mlip_info_nce(
    anchors: *const f64,
    candidates: *const f64,
    b: usize,
    d: usize,
    tau: f64,
    column_anchored: bool,
    out: *mut f64,
) -> MlipStatus {
    guard(|| {
        let a = matrix(anchors, b, d, "anchors")?;
        let c = matrix(candidates, b, d, "candidates")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let dir = if column_anchored { Direction::ColumnAnchored } else { Direction::RowAnchored };
        *out = info_nce(&a, &c, tau, dir)?;
        Ok(())
    })
}

/// Whole-model gradient check over `seeds` seeds. `passed` receives 1 when
/// every tensor is within `tolerance`, else 0.
///
/// # Safety
/// `passed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mlip_gradcheck(seeds: u64, tolerance: f64, passed: *mut c_int) -> MlipStatus {
    guard(|| {
        let passed = passed.as_mut().ok_or_else(|| null("passed"))?;
        let report = check_model(&ModelCheckOptions { seeds, tolerance, ..Default::default() })?;
        *passed = c_int::from(report.pass);
        Ok(())
    })
}
