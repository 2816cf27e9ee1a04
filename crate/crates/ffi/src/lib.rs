//! C ABI over the morphogrid library.
//!
//! Handles are opaque and owned by the caller once created; release them
//! with the matching `*_free`. Every fallible call returns an [`MgStatus`]
//! and leaves a message for [`mg_last_error`] on failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use morphogrid::classifier::{classify_heuristic, cnn_forward, CnnModel};
use morphogrid::crhd::{render_crhd, truncate_minor, Palette, DEFAULT_RGB_FLOOR};
use morphogrid::gbm::GbmModel;
use morphogrid::geodata::{parse_extract, GeoPoint};
use morphogrid::morpho::land_use_mixture;
use morphogrid::pipeline::{cmd_run, PipelineConfig};
use morphogrid::road_graph::{build_graph, count_intersections, RoadGraph};
use morphogrid::vitality::vitality_score;
use morphogrid::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numeric = 5,
    Panic = 6,
}

/// Road graph built from an OSM XML or GeoJSON document.
pub struct MgGraph {
    graph: RoadGraph,
}

/// Trained road-pattern CNN.
pub struct MgCnn {
    model: CnnModel,
}

/// Gradient-boosted regression model.
pub struct MgGbm {
    model: GbmModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MgStatus {
    match e {
        Error::Argument(_) => MgStatus::InvalidArgument,
        Error::Config(_) => MgStatus::Config,
        Error::Numeric(_) => MgStatus::Numeric,
        Error::Parse { .. } | Error::Format(_) | Error::Schema { .. } | Error::Io { .. } => MgStatus::Data,
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (MgStatus, String)>) -> MgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MgStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (MgStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MgStatus, String) {
    (MgStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn bytes<'a>(data: *const u8, len: usize) -> Result<&'a [u8], (MgStatus, String)> {
    if data.is_null() {
        return if len == 0 { Ok(&[]) } else { Err(null("data")) };
    }
    Ok(slice::from_raw_parts(data, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`). Returns the full message length
/// excluding the terminator; 0 when there is no error.
///
/// # Safety
/// `buf` must be valid for `cap` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn mg_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let b = msg.as_bytes();
            if !buf.is_null() && cap > 0 {
                let n = b.len().min(cap - 1);
                ptr::copy_nonoverlapping(b.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
            b.len()
        }
    })
}

/// Parses a document and builds its road graph.
///
/// # Safety
/// `data` must be valid for `len` bytes; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mg_graph_from_document(data: *const u8, len: usize, out: *mut *mut MgGraph) -> MgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let extract = parse_extract(bytes(data, len)?, None).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MgGraph { graph: build_graph(&extract.roads) }));
        Ok(())
    })
}

/// # Safety
/// `graph` must come from [`mg_graph_from_document`] or be null.
#[no_mangle]
pub unsafe extern "C" fn mg_graph_free(graph: *mut MgGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Node count, edge count, intersection count (degree ≥ 3) and total
/// length in meters.
///
/// # Safety
/// `graph` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn mg_graph_stats(
    graph: *const MgGraph,
    nodes: *mut usize,
    edges: *mut usize,
    intersections: *mut usize,
    length_m: *mut f64,
) -> MgStatus {
    guard(|| {
        let g = &graph.as_ref().ok_or_else(|| null("graph"))?.graph;
        if !nodes.is_null() {
            *nodes = g.nodes.len();
        }
        if !edges.is_null() {
            *edges = g.edges.len();
        }
        if !intersections.is_null() {
            *intersections = count_intersections(g);
        }
        if !length_m.is_null() {
            *length_m = g.total_edge_length();
        }
        Ok(())
    })
}

/// Heuristic category probabilities (gridiron, organic, radial, no
/// pattern) for a graph covering a square of side `extent_m`.
///
/// # Safety
/// `graph` must be a live handle; `probs` must hold 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn mg_classify_heuristic(graph: *const MgGraph, extent_m: f64, probs: *mut f64) -> MgStatus {
    guard(|| {
        let g = &graph.as_ref().ok_or_else(|| null("graph"))?.graph;
        if probs.is_null() {
            return Err(null("probs"));
        }
        if !(extent_m > 0.0) {
            return Err((MgStatus::InvalidArgument, "extent_m must be positive".into()));
        }
        let p = classify_heuristic(g, extent_m);
        ptr::copy_nonoverlapping(p.0.as_ptr(), probs, 4);
        Ok(())
    })
}

/// Loads an `MGRD01` checkpoint.
///
/// # Safety
/// `data` must be valid for `len` bytes; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mg_cnn_load(data: *const u8, len: usize, out: *mut *mut MgCnn) -> MgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = CnnModel::from_bytes(bytes(data, len)?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MgCnn { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mg_cnn_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn mg_cnn_free(model: *mut MgCnn) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Renders a `size_px` diagram of `graph` around (`lon`, `lat`) with the
/// default palette and classifies it.
///
/// # Safety
/// Handles must be live; `probs` must hold 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn mg_cnn_classify(
    model: *const MgCnn,
    graph: *const MgGraph,
    lon: f64,
    lat: f64,
    radius_m: f64,
    size_px: u32,
    probs: *mut f64,
) -> MgStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let g = &graph.as_ref().ok_or_else(|| null("graph"))?.graph;
        if probs.is_null() {
            return Err(null("probs"));
        }
        let center = GeoPoint::try_new(lon, lat).map_err(lib_err)?;
        let img = render_crhd(g, center, radius_m, size_px, &Palette::default()).map_err(lib_err)?;
        let p = cnn_forward(m, &truncate_minor(&img, DEFAULT_RGB_FLOOR));
        ptr::copy_nonoverlapping(p.0.as_ptr(), probs, 4);
        Ok(())
    })
}

/// Loads an `MGBM01` text checkpoint.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mg_gbm_load(text: *const c_char, out: *mut *mut MgGbm) -> MgStatus {
    guard(|| {
        if text.is_null() {
            return Err(null("text"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let s = CStr::from_ptr(text).to_str().map_err(|_| (MgStatus::Data, "checkpoint is not UTF-8".into()))?;
        let model = GbmModel::from_checkpoint(s).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MgGbm { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mg_gbm_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn mg_gbm_free(model: *mut MgGbm) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of features the model expects per row.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mg_gbm_n_features(model: *const MgGbm) -> usize {
    model.as_ref().map_or(0, |m| m.model.n_features)
}

/// Predicts `n_rows` row-major rows of `n_features` values into `out`.
///
/// # Safety
/// `rows` must hold `n_rows * n_features` doubles and `out` `n_rows`.
#[no_mangle]
pub unsafe extern "C" fn mg_gbm_predict(model: *const MgGbm, rows: *const f64, n_rows: usize, n_features: usize, out: *mut f64) -> MgStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if n_features != m.n_features {
            return Err((MgStatus::InvalidArgument, format!("model expects {} features, got {n_features}", m.n_features)));
        }
        if n_rows == 0 {
            return Ok(());
        }
        if rows.is_null() {
            return Err(null("rows"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let data = slice::from_raw_parts(rows, n_rows * n_features);
        let dst = slice::from_raw_parts_mut(out, n_rows);
        for (row, o) in data.chunks_exact(n_features).zip(dst) {
            *o = m.predict_row(row);
        }
        Ok(())
    })
}

/// Shannon entropy (natural log) of the land-use area shares.
///
/// # Safety
/// `areas` must hold `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mg_land_use_mixture(areas: *const f64, n: usize, out: *mut f64) -> MgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = if n == 0 { &[][..] } else { slice::from_raw_parts(areas.as_ref().ok_or_else(|| null("areas"))?, n) };
        *out = land_use_mixture(a).map_err(lib_err)?;
        Ok(())
    })
}

/// Vitality scores from `n` rows of 5 z-scores (poi, tweets, ntl,
/// population, airbnb); `include` holds 5 flags (non-zero = included).
///
/// # Safety
/// `z` must hold `5 * n` doubles, `include` 5 bytes and `out` `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mg_vitality_score(z: *const f64, n: usize, include: *const u8, out: *mut f64) -> MgStatus {
    guard(|| {
        if include.is_null() {
            return Err(null("include"));
        }
        if n == 0 {
            return Ok(());
        }
        if z.is_null() || out.is_null() {
            return Err(null(if z.is_null() { "z" } else { "out" }));
        }
        let flags = slice::from_raw_parts(include, 5);
        let mask = [0, 1, 2, 3, 4].map(|k| flags[k] != 0);
        let rows: Vec<[f64; 5]> = slice::from_raw_parts(z, 5 * n).chunks_exact(5).map(|c| [c[0], c[1], c[2], c[3], c[4]]).collect();
        let s = vitality_score(&rows, mask);
        ptr::copy_nonoverlapping(s.as_ptr(), out, n);
        Ok(())
    })
}

/// Runs the whole pipeline for a configuration file.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mg_run(config_path: *const c_char) -> MgStatus {
    guard(|| {
        if config_path.is_null() {
            return Err(null("config_path"));
        }
        let p = CStr::from_ptr(config_path).to_str().map_err(|_| (MgStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let cfg = PipelineConfig::load(Path::new(p)).map_err(lib_err)?;
        cmd_run(&cfg).map_err(lib_err)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(status_of(&Error::Config("x".into())), MgStatus::Config);
        assert_eq!(status_of(&Error::Format("x".into())), MgStatus::Data);
        assert_eq!(status_of(&Error::Numeric("x".into())), MgStatus::Numeric);
    }

    #[test]
    fn panics_become_status() {
        assert_eq!(guard(|| panic!("boom")), MgStatus::Panic);
        let mut buf = [0 as c_char; 32];
        let n = unsafe { mg_last_error(buf.as_mut_ptr(), buf.len()) };
        assert_eq!(n, "internal panic".len());
    }
}
