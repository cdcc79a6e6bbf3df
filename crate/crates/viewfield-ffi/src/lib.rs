//! C ABI over the viewfield mapping library.
//!
//! All objects are opaque handles created and destroyed through this API.
//! Functions return [`VfStatus`]; on failure a thread-local message is
//! readable via [`vf_last_error`]. No function panics across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use viewfield::atlas::AtlasState;
use viewfield::blend::render_novel_view;
use viewfield::config::RunConfig;
use viewfield::geom::Pose;
use viewfield::pipeline::run_pipeline;
use viewfield::tracksim::{generate_stream, write_stream, StreamSpec, TrajectoryKind};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VfStatus {
    VfOk = 0,
    /// A required pointer argument was null.
    VfNullArgument = 1,
    /// Arguments were malformed (bad UTF-8, bad value, bad config).
    VfInvalidArgument = 2,
    /// Filesystem or stream I/O failed.
    VfIo = 3,
    /// The operation itself failed; see vf_last_error.
    VfRuntime = 4,
}

/// Opaque run configuration handle.
pub struct VfConfig {
    inner: RunConfig,
}

/// Opaque trained-map handle (a loaded atlas checkpoint).
pub struct VfAtlas {
    inner: AtlasState,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &viewfield::Error) -> VfStatus {
    match err {
        viewfield::Error::Io(_) | viewfield::Error::Image(_) => VfStatus::VfIo,
        viewfield::Error::InvalidArgument(_) | viewfield::Error::Config(_) => {
            VfStatus::VfInvalidArgument
        }
        _ => VfStatus::VfRuntime,
    }
}

fn fail(err: viewfield::Error) -> VfStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

fn guarded(f: impl FnOnce() -> VfStatus) -> VfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            VfStatus::VfRuntime
        }
    }
}

/// # Safety
/// `ptr` must be a valid nul-terminated string.
unsafe fn cstr_arg(ptr: *const c_char) -> Result<&'static str, VfStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(VfStatus::VfNullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        VfStatus::VfInvalidArgument
    })
}

/// Copy the last error message into `buf` (truncated, always
/// nul-terminated). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null (query length).
#[no_mangle]
pub unsafe extern "C" fn vf_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn vf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ---------------------------------------------------------------------------
// Config

/// New configuration with library defaults. Free with vf_config_free.
#[no_mangle]
pub extern "C" fn vf_config_default() -> *mut VfConfig {
    Box::into_raw(Box::new(VfConfig { inner: RunConfig::default() }))
}

/// Load a configuration from a TOML file; returns null on failure.
///
/// # Safety
/// `path` must be a valid nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vf_config_from_toml_file(path: *const c_char) -> *mut VfConfig {
    let Ok(path) = cstr_arg(path) else {
        return std::ptr::null_mut();
    };
    match RunConfig::load(Path::new(path)) {
        Ok(cfg) => Box::into_raw(Box::new(VfConfig { inner: cfg })),
        Err(e) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Set a string field: "stream", "out", or "mode"
/// ("view_centric" | "world_centric_single").
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` valid nul-terminated
/// strings.
#[no_mangle]
pub unsafe extern "C" fn vf_config_set_str(
    cfg: *mut VfConfig,
    key: *const c_char,
    value: *const c_char,
) -> VfStatus {
    if cfg.is_null() {
        set_error("null config handle");
        return VfStatus::VfNullArgument;
    }
    let (key, value) = match (cstr_arg(key), cstr_arg(value)) {
        (Ok(k), Ok(v)) => (k, v),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    let cfg = &mut (*cfg).inner;
    match key {
        "stream" => cfg.stream = value.to_string(),
        "out" => cfg.out = value.to_string(),
        "mode" => match value.parse() {
            Ok(m) => cfg.mode = m,
            Err(e) => return fail(e),
        },
        other => {
            set_error(format!("unknown string key `{other}`"));
            return VfStatus::VfInvalidArgument;
        }
    }
    VfStatus::VfOk
}

/// Set a numeric field: "seed", "train_steps_per_keyframe",
/// "eval_interval", "rgb_only" (0/1), or "rescale" (0/1).
///
/// # Safety
/// `cfg` must be a live handle; `key` a valid nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vf_config_set_u64(
    cfg: *mut VfConfig,
    key: *const c_char,
    value: u64,
) -> VfStatus {
    if cfg.is_null() {
        set_error("null config handle");
        return VfStatus::VfNullArgument;
    }
    let key = match cstr_arg(key) {
        Ok(k) => k,
        Err(s) => return s,
    };
    let cfg = &mut (*cfg).inner;
    match key {
        "seed" => cfg.seed = value,
        "train_steps_per_keyframe" => cfg.train_steps_per_keyframe = value as usize,
        "eval_interval" => cfg.eval_interval = value as usize,
        "rgb_only" => cfg.rgb_only = value != 0,
        "rescale" => cfg.rescale = value != 0,
        other => {
            set_error(format!("unknown numeric key `{other}`"));
            return VfStatus::VfInvalidArgument;
        }
    }
    VfStatus::VfOk
}

/// # Safety
/// `cfg` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn vf_config_free(cfg: *mut VfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

// ---------------------------------------------------------------------------
// Pipeline

/// Run the full mapping pipeline described by `cfg` (stream in, artifacts
/// out).
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_run(cfg: *const VfConfig) -> VfStatus {
    if cfg.is_null() {
        set_error("null config handle");
        return VfStatus::VfNullArgument;
    }
    let cfg = &(*cfg).inner;
    guarded(|| match run_pipeline(cfg) {
        Ok(_) => VfStatus::VfOk,
        Err(e) => fail(e),
    })
}

/// Generate a synthetic tracker stream. `loop_close_at < 0` disables the
/// loop-closure event.
///
/// # Safety
/// `out_dir` must be a valid nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vf_gen_stream(
    out_dir: *const c_char,
    frames: usize,
    resolution: u32,
    seed: u64,
    drift: f64,
    loop_close_at: i64,
    holdout_every: u64,
) -> VfStatus {
    let dir = match cstr_arg(out_dir) {
        Ok(d) => PathBuf::from(d),
        Err(s) => return s,
    };
    guarded(|| {
        let spec = StreamSpec {
            kind: TrajectoryKind::Loop { radius: 2.0 },
            n_frames: frames,
            intrinsics: viewfield::geom::CameraIntrinsics {
                fx: resolution as f64,
                fy: resolution as f64,
                cx: resolution as f64 / 2.0,
                cy: resolution as f64 / 2.0,
                width: resolution,
                height: resolution,
            },
            drift_trans: drift,
            loop_close_at: if loop_close_at < 0 {
                None
            } else {
                Some(loop_close_at as usize)
            },
            holdout_every,
            seed,
            ..Default::default()
        };
        match generate_stream(&spec).and_then(|ev| write_stream(&ev, &spec.intrinsics, &dir)) {
            Ok(_) => VfStatus::VfOk,
            Err(e) => fail(e),
        }
    })
}

// ---------------------------------------------------------------------------
// Atlas

/// Load a trained atlas checkpoint directory; returns null on failure.
///
/// # Safety
/// `dir` must be a valid nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vf_atlas_load(dir: *const c_char) -> *mut VfAtlas {
    let Ok(dir) = cstr_arg(dir) else {
        return std::ptr::null_mut();
    };
    match viewfield::atlas::load_atlas(Path::new(dir)) {
        Ok(a) => Box::into_raw(Box::new(VfAtlas { inner: a })),
        Err(e) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `atlas` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn vf_atlas_free(atlas: *mut VfAtlas) {
    if !atlas.is_null() {
        drop(Box::from_raw(atlas));
    }
}

/// Number of local field models; 0 for a null handle.
///
/// # Safety
/// `atlas` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn vf_atlas_model_count(atlas: *const VfAtlas) -> usize {
    if atlas.is_null() {
        0
    } else {
        (*atlas).inner.models.len()
    }
}

/// Number of registered keyframes; 0 for a null handle.
///
/// # Safety
/// `atlas` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn vf_atlas_keyframe_count(atlas: *const VfAtlas) -> usize {
    if atlas.is_null() {
        0
    } else {
        (*atlas).inner.keyframes.len()
    }
}

/// Image size the atlas was trained at.
///
/// # Safety
/// All pointers must be valid; `atlas` a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_atlas_image_size(
    atlas: *const VfAtlas,
    width: *mut u32,
    height: *mut u32,
) -> VfStatus {
    if atlas.is_null() || width.is_null() || height.is_null() {
        set_error("null argument");
        return VfStatus::VfNullArgument;
    }
    *width = (*atlas).inner.intrinsics.width;
    *height = (*atlas).inner.intrinsics.height;
    VfStatus::VfOk
}

/// Render a novel view at a camera pose given as
/// `[tx, ty, tz, qx, qy, qz, qw]` (in the checkpoint's rescaled world
/// frame). `rgb_out` receives width*height*3 bytes; `depth_out`, when not
/// null, receives width*height depths in meters (0 where no surface).
///
/// # Safety
/// `atlas` must be a live handle, `pose7` must point to 7 doubles, and the
/// output buffers must be large enough as described above.
#[no_mangle]
pub unsafe extern "C" fn vf_atlas_render(
    atlas: *const VfAtlas,
    pose7: *const f64,
    blend_p: f64,
    rgb_out: *mut u8,
    depth_out: *mut f64,
) -> VfStatus {
    if atlas.is_null() || pose7.is_null() || rgb_out.is_null() {
        set_error("null argument");
        return VfStatus::VfNullArgument;
    }
    let atlas = &(*atlas).inner;
    let mut arr = [0.0; 7];
    arr.copy_from_slice(std::slice::from_raw_parts(pose7, 7));
    let pose = Pose::from_array(&arr);
    guarded(|| {
        let view = match render_novel_view(atlas, &pose, &atlas.intrinsics, blend_p, false) {
            Ok(v) => v,
            Err(e) => return fail(e),
        };
        let n = (atlas.intrinsics.width * atlas.intrinsics.height) as usize;
        let rgb = std::slice::from_raw_parts_mut(rgb_out, n * 3);
        for (dst, src) in rgb.iter_mut().zip(&view.color.data) {
            *dst = (src.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        if !depth_out.is_null() {
            let depth = std::slice::from_raw_parts_mut(depth_out, n);
            for i in 0..n {
                depth[i] = if view.depth.valid[i] { view.depth.data[i] } else { 0.0 };
            }
        }
        VfStatus::VfOk
    })
}
