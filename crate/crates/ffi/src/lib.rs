//! C ABI over `gae_distill`.
//!
//! Every fallible function returns a [`GaeStatus`]; on failure the message is
//! available from [`gae_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gae_distill::eval::embed;
use gae_distill::graph::{load_graph, Graph};
use gae_distill::losses::{kl_distill_loss, mean_neighbor_similarity, ReconKind};
use gae_distill::model::GaeModel as Model;
use gae_distill::train::{train, TrainConfig};
use gae_distill::{checkpoint, Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaeStatus {
    Ok = 0,
    /// Invalid configuration or argument value.
    Config = 1,
    /// Unreadable or malformed input files.
    Data = 2,
    /// Non-finite values or shape errors during computation.
    Numeric = 3,
    /// A required pointer was null.
    NullPointer = 4,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 5,
    /// Internal panic caught at the boundary.
    Panic = 6,
}

/// Opaque graph handle.
pub struct GaeGraph {
    inner: Graph,
}

/// Opaque model handle.
pub struct GaeModel {
    inner: Model,
}

/// Training hyperparameters; obtain defaults from
/// [`gae_train_config_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct GaeTrainConfig {
    pub mask_ratio: f64,
    pub tau: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// 0 = scaled cosine error, 1 = mean squared error.
    pub loss_kind: u32,
    pub lr: f64,
    pub epochs: u64,
    pub seed: u64,
    pub hidden_dim: u64,
    /// Nonzero enables remasking of codes before decoding.
    pub remask: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub track_similarity_every: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GaeStatus {
    match e.exit_code() {
        1 => GaeStatus::Config,
        2 => GaeStatus::Data,
        _ => GaeStatus::Numeric,
    }
}

struct Fail(GaeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GaeStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GaeStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GaeStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(GaeStatus::InvalidUtf8, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a dataset directory (`features.csv`, `graph.edges`, optional labels
/// and splits).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gae_graph_load(path: *const c_char, out: *mut *mut GaeGraph) -> GaeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = path_arg(path, "path")?;
        let g = load_graph(dir)?;
        *out = Box::into_raw(Box::new(GaeGraph { inner: g }));
        Ok(())
    })
}

/// Releases a graph; null is ignored.
///
/// # Safety
/// `g` must come from [`gae_graph_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gae_graph_free(g: *mut GaeGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Node count, directed edge count and feature width.
///
/// # Safety
/// `g` must be a live graph handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn gae_graph_shape(
    g: *const GaeGraph,
    num_nodes: *mut usize,
    num_edges: *mut usize,
    feature_dim: *mut usize,
) -> GaeStatus {
    guard(|| {
        let g = &deref(g, "graph")?.inner;
        if !num_nodes.is_null() {
            *num_nodes = g.num_nodes();
        }
        if !num_edges.is_null() {
            *num_edges = g.num_edges();
        }
        if !feature_dim.is_null() {
            *feature_dim = g.feature_dim();
        }
        Ok(())
    })
}

/// Mean cosine similarity between neighbors of the raw features.
///
/// # Safety
/// `g` must be a live graph handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn gae_graph_mean_similarity(g: *const GaeGraph, out: *mut f64) -> GaeStatus {
    guard(|| {
        let g = &deref(g, "graph")?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = mean_neighbor_similarity(g.features(), g).mean;
        Ok(())
    })
}

/// Distillation penalty between the graph's features and a row-major
/// `num_nodes × feature_dim` reconstruction.
///
/// # Safety
/// `recon` must point to `len` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn gae_kl_distill(g: *const GaeGraph, recon: *const f64, len: usize, tau: f64, out: *mut f64) -> GaeStatus {
    guard(|| {
        let g = &deref(g, "graph")?.inner;
        if recon.is_null() {
            return Err(null("recon"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let values = std::slice::from_raw_parts(recon, len).to_vec();
        let recon = Tensor::from_vec(g.num_nodes(), g.feature_dim(), values)?;
        *out = kl_distill_loss(g.features(), &recon, g, tau)?;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn gae_train_config_default() -> GaeTrainConfig {
    let d = TrainConfig::default();
    GaeTrainConfig {
        mask_ratio: d.lambda,
        tau: d.tau,
        alpha: d.alpha,
        gamma: d.gamma,
        loss_kind: 0,
        lr: d.lr,
        epochs: d.epochs as u64,
        seed: d.seed,
        hidden_dim: d.hidden_dim as u64,
        remask: d.remask as u32,
        beta1: d.beta1,
        beta2: d.beta2,
        eps_adam: d.eps_adam,
        track_similarity_every: d.track_similarity_every as u64,
    }
}

fn to_train_config(c: &GaeTrainConfig) -> Result<TrainConfig, Fail> {
    let loss_kind = match c.loss_kind {
        0 => ReconKind::Sce,
        1 => ReconKind::Mse,
        other => return Err(Fail(GaeStatus::Config, format!("unknown loss kind {other}"))),
    };
    let count = |v: u64, name: &str| usize::try_from(v).map_err(|_| Fail(GaeStatus::Config, format!("{name} too large")));
    Ok(TrainConfig {
        lambda: c.mask_ratio,
        tau: c.tau,
        alpha: c.alpha,
        gamma: c.gamma,
        loss_kind,
        lr: c.lr,
        epochs: count(c.epochs, "epochs")?,
        seed: c.seed,
        hidden_dim: count(c.hidden_dim, "hidden_dim")?,
        remask: c.remask != 0,
        beta1: c.beta1,
        beta2: c.beta2,
        eps_adam: c.eps_adam,
        track_similarity_every: count(c.track_similarity_every, "track_similarity_every")?,
    })
}

/// Trains a fresh model on `g`.
///
/// # Safety
/// `g` and `config` must be valid; `out` receives a new model handle.
#[no_mangle]
pub unsafe extern "C" fn gae_train(g: *const GaeGraph, config: *const GaeTrainConfig, out: *mut *mut GaeModel) -> GaeStatus {
    guard(|| {
        let g = &deref(g, "graph")?.inner;
        let config = to_train_config(deref(config, "config")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (model, _) = train(g, &config)?;
        *out = Box::into_raw(Box::new(GaeModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gae_model_load(path: *const c_char, out: *mut *mut GaeModel) -> GaeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = checkpoint::load(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(GaeModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `m` must be a live model handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gae_model_save(m: *const GaeModel, path: *const c_char) -> GaeStatus {
    guard(|| {
        let m = &deref(m, "model")?.inner;
        checkpoint::save(m, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gae_model_free(m: *mut GaeModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live model handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn gae_model_dims(m: *const GaeModel, feature_dim: *mut usize, hidden_dim: *mut usize) -> GaeStatus {
    guard(|| {
        let m = &deref(m, "model")?.inner;
        if !feature_dim.is_null() {
            *feature_dim = m.feature_dim();
        }
        if !hidden_dim.is_null() {
            *hidden_dim = m.hidden_dim();
        }
        Ok(())
    })
}

/// Writes the `num_nodes × hidden_dim` encoder output (row-major) into `out`.
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gae_embed(m: *const GaeModel, g: *const GaeGraph, out: *mut f64, len: usize) -> GaeStatus {
    guard(|| {
        let m = &deref(m, "model")?.inner;
        let g = &deref(g, "graph")?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let z = embed(m, g)?;
        if z.len() != len {
            return Err(Fail(
                GaeStatus::Config,
                format!("output buffer holds {len} values, embedding needs {}", z.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(z.data());
        Ok(())
    })
}
