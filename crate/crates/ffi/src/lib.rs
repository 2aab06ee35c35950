//! C ABI over the `equiv3d` core.
//!
//! Every function returns an [`Eq3dStatus`]; results go through out-pointers.
//! Feature maps and heads are opaque handles created and freed here. After a
//! non-OK status, [`eq3d_last_error`] describes the failure on the calling
//! thread. Panics never cross the boundary; they surface as
//! `EQ3D_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use equiv3d::convhead::{head_forward, HeadParams};
use equiv3d::featstore::{l2_normalize, load_feature_map, sample_feature, FeatureMap, PixelFeature};
use equiv3d::geometry::{Correspondence, CorrespondenceSet, Intrinsics, Pixel};
use equiv3d::matching::{best_match, CandidateGrid, MatchResult};
use equiv3d::metrics::{ape, pcdp};
use equiv3d::pose::{solve_pnp_ransac, RansacConfig};
use equiv3d::smoothap::{smooth_ap_grad_with, RankingInstance, SmoothApOptions};
use equiv3d::Error;
use nalgebra::Vector3;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Eq3dStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Format = 3,
    Io = 4,
    DegenerateFeature = 5,
    NoCandidates = 6,
    InsufficientCorrespondences = 7,
    Panic = 99,
}

/// Opaque feature map.
pub struct Eq3dFeatureMap(FeatureMap);

/// Opaque convolution head.
pub struct Eq3dHead(HeadParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn status_of(e: &Error) -> Eq3dStatus {
    match e {
        Error::Format { .. } | Error::Json { .. } => Eq3dStatus::Format,
        Error::Io { .. } => Eq3dStatus::Io,
        Error::DegenerateFeature(_) => Eq3dStatus::DegenerateFeature,
        Error::NoCandidates => Eq3dStatus::NoCandidates,
        Error::InsufficientCorrespondences { .. } => Eq3dStatus::InsufficientCorrespondences,
        _ => Eq3dStatus::InvalidArgument,
    }
}

struct Fail(Eq3dStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(Eq3dStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> Eq3dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            Eq3dStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            Eq3dStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(Eq3dStatus::NullArgument, format!("{what} is null"))
}

unsafe fn view<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `p` points to `n` readable elements.
    Ok(unsafe { slice::from_raw_parts(p, n) })
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: caller guarantees `p` is null or valid for writes.
    unsafe { p.as_mut() }.ok_or_else(|| null(what))
}

unsafe fn map_ref<'a>(p: *const Eq3dFeatureMap) -> Result<&'a FeatureMap, Fail> {
    // SAFETY: handles come from this library and are live until freed.
    unsafe { p.as_ref() }.map(|m| &m.0).ok_or_else(|| null("feature map"))
}

/// Message for the last failure on this thread; empty after a success. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn eq3d_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn eq3d_version() -> *const c_char {
    static V: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    V.as_ptr().cast()
}

/// Load an FTB1 file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eq3d_feature_map_load(path: *const c_char, out: *mut *mut Eq3dFeatureMap) -> Eq3dStatus {
    guard(|| {
        let out = unsafe { self::out(out, "out") }?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = unsafe { CStr::from_ptr(path) }.to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let m = load_feature_map(path)?;
        *out = Box::into_raw(Box::new(Eq3dFeatureMap(m)));
        Ok(())
    })
}

/// Build a feature map from `len` floats laid out `[row][col][channel]` on
/// the `ceil(h / patch) x ceil(w / patch)` grid.
///
/// # Safety
/// `data` must point to `len` floats; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eq3d_feature_map_new(
    channels: u32,
    patch: u32,
    img_w: u32,
    img_h: u32,
    data: *const f32,
    len: usize,
    out: *mut *mut Eq3dFeatureMap,
) -> Eq3dStatus {
    guard(|| {
        let out = unsafe { self::out(out, "out") }?;
        let data = unsafe { view(data, len, "data") }?.to_vec();
        let m = FeatureMap::new(channels as usize, patch as usize, img_w as usize, img_h as usize, data)?;
        *out = Box::into_raw(Box::new(Eq3dFeatureMap(m)));
        Ok(())
    })
}

/// Release a feature map. Null is ignored.
///
/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn eq3d_feature_map_free(m: *mut Eq3dFeatureMap) {
    if !m.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Grid and image dimensions: `dims = [hf, wf, channels, patch, img_w, img_h]`.
///
/// # Safety
/// `m` must be a live handle; `dims` must hold 6 values.
#[no_mangle]
pub unsafe extern "C" fn eq3d_feature_map_dims(m: *const Eq3dFeatureMap, dims: *mut u32) -> Eq3dStatus {
    guard(|| {
        let m = unsafe { map_ref(m) }?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        let v = [m.hf, m.wf, m.channels, m.patch, m.img_w, m.img_h];
        // SAFETY: caller provides room for 6 values.
        let d = unsafe { slice::from_raw_parts_mut(dims, 6) };
        for (o, x) in d.iter_mut().zip(v) {
            *o = x as u32;
        }
        Ok(())
    })
}

/// Bilinear feature at image coordinates `(x, y)`, optionally L2-normalized.
/// `out` receives `channels` values.
///
/// # Safety
/// `m` must be a live handle; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn eq3d_sample_feature(
    m: *const Eq3dFeatureMap,
    x: f64,
    y: f64,
    normalize: bool,
    out: *mut f64,
    out_len: usize,
) -> Eq3dStatus {
    guard(|| {
        let m = unsafe { map_ref(m) }?;
        if out_len != m.channels {
            return Err(invalid(format!("output holds {out_len} values, map has {} channels", m.channels)));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let f = sample_feature(m, &Pixel::new(x, y), normalize)?;
        // SAFETY: checked length above.
        unsafe { slice::from_raw_parts_mut(out, out_len) }.copy_from_slice(f.as_slice());
        Ok(())
    })
}

/// Nearest neighbor of `query` (normalized here) among the pixel centers of
/// `target` on a stride grid. Writes the matched position and its cosine.
///
/// # Safety
/// `target` must be a live handle; `query` must hold `len` doubles; the
/// out-pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eq3d_best_match(
    target: *const Eq3dFeatureMap,
    query: *const f64,
    len: usize,
    stride: u32,
    out_x: *mut f64,
    out_y: *mut f64,
    out_score: *mut f64,
) -> Eq3dStatus {
    guard(|| {
        let t = unsafe { map_ref(target) }?;
        let q = l2_normalize(unsafe { view(query, len, "query") }?)?;
        let (ox, oy, os) = unsafe { (out(out_x, "out_x")?, out(out_y, "out_y")?, out(out_score, "out_score")?) };
        let m = best_match(&q, t, &CandidateGrid::full(stride as usize))?;
        *ox = m.position.x;
        *oy = m.position.y;
        *os = m.score;
        Ok(())
    })
}

/// APE (percent of `min(img_w, img_h)`) and PCDP at `delta` for `n` pairs of
/// ground-truth and predicted target positions, each given as `x, y`.
///
/// # Safety
/// `gt` and `pred` must hold `2 n` doubles; out-pointers valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eq3d_ape_pcdp(
    gt: *const f64,
    pred: *const f64,
    n: usize,
    img_w: u32,
    img_h: u32,
    delta: f64,
    out_ape: *mut f64,
    out_pcdp: *mut f64,
) -> Eq3dStatus {
    guard(|| {
        let g = unsafe { view(gt, 2 * n, "gt") }?;
        let p = unsafe { view(pred, 2 * n, "pred") }?;
        let (oa, op) = unsafe { (out(out_ape, "out_ape")?, out(out_pcdp, "out_pcdp")?) };
        if img_w == 0 || img_h == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        let set = CorrespondenceSet {
            view_a: String::new(),
            view_b: String::new(),
            pairs: g
                .chunks_exact(2)
                .map(|c| Correspondence {
                    x1: Pixel::zeros(),
                    x2: Pixel::new(c[0], c[1]),
                })
                .collect(),
            image_w: img_w as usize,
            image_h: img_h as usize,
            rejected: 0,
        };
        let preds: Vec<MatchResult> = p
            .chunks_exact(2)
            .map(|c| MatchResult {
                position: Pixel::new(c[0], c[1]),
                col: 0,
                row: 0,
                score: 0.0,
            })
            .collect();
        *oa = ape(&set, &preds)?;
        *op = pcdp(&set, &preds, delta)?;
        Ok(())
    })
}

/// `1 - SmoothAP` for one query against `n_pos` positives and `n_neg`
/// negatives, all `dim`-dimensional and row-major. Gradient buffers are
/// optional (null skips them) and, when given, have the shapes of their
/// inputs.
///
/// # Safety
/// Input pointers must hold the stated number of doubles; non-null gradient
/// and loss pointers must be valid for writes of the same sizes.
#[no_mangle]
pub unsafe extern "C" fn eq3d_smooth_ap_loss(
    query: *const f64,
    positives: *const f64,
    n_pos: usize,
    negatives: *const f64,
    n_neg: usize,
    dim: usize,
    tau: f64,
    include_self_term: bool,
    out_loss: *mut f64,
    d_query: *mut f64,
    d_positives: *mut f64,
    d_negatives: *mut f64,
) -> Eq3dStatus {
    guard(|| {
        if dim == 0 {
            return Err(invalid("dimension must be positive"));
        }
        let q = unsafe { view(query, dim, "query") }?;
        let pos = unsafe { view(positives, n_pos * dim, "positives") }?;
        let neg = unsafe { view(negatives, n_neg * dim, "negatives") }?;
        let loss = unsafe { out(out_loss, "out_loss") }?;
        let rows = |s: &[f64]| s.chunks_exact(dim).map(|c| PixelFeature(c.to_vec())).collect();
        let inst = RankingInstance {
            query: PixelFeature(q.to_vec()),
            positives: rows(pos),
            negatives: rows(neg),
            temperature: tau,
        };
        let g = smooth_ap_grad_with(&inst, SmoothApOptions { include_self_term })?;
        *loss = g.loss;
        let write = |dst: *mut f64, src: &[Vec<f64>]| {
            if !dst.is_null() {
                // SAFETY: caller sized the buffer like the matching input.
                let d = unsafe { slice::from_raw_parts_mut(dst, src.len() * dim) };
                for (o, v) in d.chunks_exact_mut(dim).zip(src) {
                    o.copy_from_slice(v);
                }
            }
        };
        write(d_query, std::slice::from_ref(&g.d_query));
        write(d_positives, &g.d_positives);
        write(d_negatives, &g.d_negatives);
        Ok(())
    })
}

/// Camera intrinsics for [`eq3d_pnp_ransac`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct Eq3dIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// RANSAC settings for [`eq3d_pnp_ransac`]. The threshold is in pixels of
/// the image being solved.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct Eq3dRansacConfig {
    pub iterations: u32,
    pub inlier_threshold: f64,
    pub seed: u64,
    pub refine: bool,
}

/// Robust pose from `n` pixel/point pairs (`pixels` as `x, y`, `points` as
/// `x, y, z`). Writes the world-to-camera rotation (row-major 3x3), the
/// translation and the inlier count.
///
/// # Safety
/// `pixels` holds `2 n` doubles, `points` `3 n`; `rotation` has room for 9,
/// `translation` for 3; `inliers` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eq3d_pnp_ransac(
    pixels: *const f64,
    points: *const f64,
    n: usize,
    k: *const Eq3dIntrinsics,
    cfg: *const Eq3dRansacConfig,
    rotation: *mut f64,
    translation: *mut f64,
    inliers: *mut usize,
) -> Eq3dStatus {
    guard(|| {
        let px = unsafe { view(pixels, 2 * n, "pixels") }?;
        let pt = unsafe { view(points, 3 * n, "points") }?;
        let k = unsafe { k.as_ref() }.ok_or_else(|| null("intrinsics"))?;
        let c = unsafe { cfg.as_ref() }.ok_or_else(|| null("config"))?;
        let inl = unsafe { out(inliers, "inliers") }?;
        if rotation.is_null() || translation.is_null() {
            return Err(null("pose output"));
        }
        let k = Intrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width as usize, k.height as usize)?;
        let pixels: Vec<Pixel> = px.chunks_exact(2).map(|c| Pixel::new(c[0], c[1])).collect();
        let points: Vec<Vector3<f64>> = pt.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        let cfg = RansacConfig {
            iterations: c.iterations as usize,
            inlier_threshold: c.inlier_threshold,
            seed: c.seed,
            refine: c.refine,
            ..RansacConfig::default()
        };
        let est = solve_pnp_ransac(&pixels, &points, &k, &cfg)?;
        // SAFETY: caller provides 9 and 3 slots.
        let (r, t) = unsafe { (slice::from_raw_parts_mut(rotation, 9), slice::from_raw_parts_mut(translation, 3)) };
        for i in 0..3 {
            for j in 0..3 {
                r[3 * i + j] = est.pose.rotation[(i, j)];
            }
            t[i] = est.pose.translation[i];
        }
        *inl = est.inlier_count;
        Ok(())
    })
}

/// Load an HED1 checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eq3d_head_load(path: *const c_char, out: *mut *mut Eq3dHead) -> Eq3dStatus {
    guard(|| {
        let out = unsafe { self::out(out, "out") }?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = unsafe { CStr::from_ptr(path) }.to_str().map_err(|_| invalid("path is not UTF-8"))?;
        *out = Box::into_raw(Box::new(Eq3dHead(HeadParams::load(path)?)));
        Ok(())
    })
}

/// Zero-initialized residual head with `layers` conv layers: the identity.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eq3d_head_zero_init(channels: u32, layers: u32, out: *mut *mut Eq3dHead) -> Eq3dStatus {
    guard(|| {
        let out = unsafe { self::out(out, "out") }?;
        *out = Box::into_raw(Box::new(Eq3dHead(HeadParams::zero_init(channels as usize, layers as usize)?)));
        Ok(())
    })
}

/// Release a head. Null is ignored.
///
/// # Safety
/// `h` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn eq3d_head_free(h: *mut Eq3dHead) {
    if !h.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(h) });
    }
}

/// Run the head over a feature map, producing a new map handle.
///
/// # Safety
/// `h` and `m` must be live handles; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eq3d_head_apply(
    h: *const Eq3dHead,
    m: *const Eq3dFeatureMap,
    out: *mut *mut Eq3dFeatureMap,
) -> Eq3dStatus {
    guard(|| {
        let h = unsafe { h.as_ref() }.ok_or_else(|| null("head"))?;
        let m = unsafe { map_ref(m) }?;
        let out = unsafe { self::out(out, "out") }?;
        *out = Box::into_raw(Box::new(Eq3dFeatureMap(head_forward(m, &h.0)?)));
        Ok(())
    })
}
