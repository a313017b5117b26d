//! C ABI for the shift-convolution stereo network.
//!
//! Every fallible call returns an [`ScStatus`]; on failure the message is
//! available from [`sc_last_error`] on the same thread until the next failing
//! call. Models are opaque handles released with [`sc_model_free`]. Images
//! are planar `C x H x W` float buffers with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use shiftconv::data::{gen_synthetic_pair, SynthConfig};
use shiftconv::losses::{d1_rate, epe};
use shiftconv::network::BOTTLENECK_FACTOR;
use shiftconv::train::{lr_schedule, Adam, Checkpoint, TrainConfig};
use shiftconv::{DisparityMap, Error, Network, Shape, Tensor};

pub const SC_ABI_VERSION: u32 = 1;

/// Result codes shared by every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScStatus {
    Ok = 0,
    NullPointer = 1,
    /// Argument outside the operation's contract (shape, range, ...).
    InvalidArgument = 2,
    Config = 3,
    Parse = 4,
    Checkpoint = 5,
    Numerical = 6,
    Io = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

impl From<&Error> for ScStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Contract(_) => ScStatus::InvalidArgument,
            Error::Config(_) => ScStatus::Config,
            Error::Parse { .. } => ScStatus::Parse,
            Error::Checkpoint(_) => ScStatus::Checkpoint,
            Error::Numerical(_) => ScStatus::Numerical,
            Error::Data(_) | Error::Io(_) => ScStatus::Io,
        }
    }
}

/// Opaque network handle.
pub struct ScModel {
    net: Network<f32>,
}

/// Static facts about a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct ScModelInfo {
    pub image_channels: u32,
    /// Search range of the cost volume in quarter-resolution pixels.
    pub maxdisp: u32,
    pub refine_enabled: bool,
    pub param_tensors: u32,
    pub param_values: u64,
    /// Input height and width must be multiples of this.
    pub size_multiple: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: ScStatus, msg: &str) -> ScStatus {
    set_error(msg);
    status
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), ScStatus>) -> ScStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(ScStatus::Internal, "internal panic"),
    }
}

fn check(e: Error) -> ScStatus {
    fail(ScStatus::from(&e), &e.to_string())
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, ScStatus>;
}

impl<T> OrStatus<T> for shiftconv::Result<T> {
    fn or_status(self) -> Result<T, ScStatus> {
        self.map_err(check)
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), ScStatus> {
    if p.is_null() {
        Err(fail(ScStatus::NullPointer, &format!("`{what}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, ScStatus> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(ScStatus::InvalidArgument, &format!("`{what}` is not UTF-8")))
}

/// Version of this interface.
#[no_mangle]
pub extern "C" fn sc_abi_version() -> u32 {
    SC_ABI_VERSION
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sc_model_load(path: *const c_char, out: *mut *mut ScModel) -> ScStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = c_str(path, "path")?;
        let ckpt = Checkpoint::load(Path::new(path)).or_status()?;
        let net = ckpt.network().or_status()?;
        *out = Box::into_raw(Box::new(ScModel { net }));
        Ok(())
    })
}

/// Freshly initialised model from configuration text (`key = value` lines;
/// may be empty for the defaults).
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sc_model_new(config: *const c_char, seed: u64, out: *mut *mut ScModel) -> ScStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = TrainConfig::from_text(c_str(config, "config")?).or_status()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(cfg.net, &mut rng).or_status()?;
        *out = Box::into_raw(Box::new(ScModel { net }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from `sc_model_load`/`sc_model_new` and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn sc_model_free(model: *mut ScModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the model as a checkpoint at iteration 0 with empty optimizer
/// state, tagged stage 2 when refinement is enabled.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sc_model_save(model: *const ScModel, path: *const c_char) -> ScStatus {
    guard(|| {
        non_null(model, "model")?;
        let path = c_str(path, "path")?;
        let m = &*model;
        let stage = if m.net.cfg.refine_enabled { 2 } else { 1 };
        Checkpoint::new(0, stage, &m.net.cfg, &m.net.params, &Adam::new())
            .and_then(|c| c.save(Path::new(path)))
            .or_status()
    })
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sc_model_info(model: *const ScModel, out: *mut ScModelInfo) -> ScStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let net = &(*model).net;
        *out = ScModelInfo {
            image_channels: net.cfg.image_channels as u32,
            maxdisp: net.cfg.shift.maxdisp as u32,
            refine_enabled: net.cfg.refine_enabled,
            param_tensors: net.params.len() as u32,
            param_values: net.params.numel() as u64,
            size_multiple: BOTTLENECK_FACTOR as u32,
        };
        Ok(())
    })
}

/// Predicts the left disparity map into `out_disp` (`height * width`
/// floats). Height and width must be multiples of `size_multiple`.
///
/// # Safety
/// `left` and `right` must hold `channels * height * width` floats and
/// `out_disp` room for `height * width`.
#[no_mangle]
pub unsafe extern "C" fn sc_model_infer(
    model: *const ScModel,
    left: *const f32,
    right: *const f32,
    channels: u32,
    height: u32,
    width: u32,
    out_disp: *mut f32,
) -> ScStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(left, "left")?;
        non_null(right, "right")?;
        non_null(out_disp, "out_disp")?;
        let shape = Shape::new(1, channels as usize, height as usize, width as usize);
        let n = shape.numel();
        let l = Tensor::from_vec(shape, slice::from_raw_parts(left, n).to_vec()).or_status()?;
        let r = Tensor::from_vec(shape, slice::from_raw_parts(right, n).to_vec()).or_status()?;
        let d = (*model).net.predict(l, r).or_status()?;
        ptr::copy_nonoverlapping(d.data.as_ptr(), out_disp, d.data.len());
        Ok(())
    })
}

/// Learning rate at `iter` under the default schedule with the given
/// base rate.
#[no_mangle]
pub extern "C" fn sc_lr_schedule(iter: u64, base_lr: f64) -> f64 {
    let cfg = TrainConfig {
        base_lr,
        ..TrainConfig::default()
    };
    lr_schedule(iter, &cfg)
}

unsafe fn metric_inputs(
    pred: *const f32,
    gt: *const f32,
    height: u32,
    width: u32,
) -> Result<(DisparityMap, DisparityMap), ScStatus> {
    non_null(pred, "pred")?;
    non_null(gt, "gt")?;
    let (h, w) = (height as usize, width as usize);
    let p = DisparityMap::new(h, w, slice::from_raw_parts(pred, h * w).to_vec()).or_status()?;
    let g = DisparityMap::new(h, w, slice::from_raw_parts(gt, h * w).to_vec()).or_status()?;
    Ok((p, g))
}

/// Mean absolute error over pixels with finite, non-negative ground truth.
///
/// # Safety
/// `pred` and `gt` must hold `height * width` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sc_epe(pred: *const f32, gt: *const f32, height: u32, width: u32, out: *mut f64) -> ScStatus {
    guard(|| {
        non_null(out, "out")?;
        let (p, g) = metric_inputs(pred, gt, height, width)?;
        *out = epe(&p, &g, None).or_status()?;
        Ok(())
    })
}

/// Fraction of valid pixels with error above `threshold`.
///
/// # Safety
/// As for [`sc_epe`].
#[no_mangle]
pub unsafe extern "C" fn sc_d1(
    pred: *const f32,
    gt: *const f32,
    height: u32,
    width: u32,
    threshold: f32,
    out: *mut f64,
) -> ScStatus {
    guard(|| {
        non_null(out, "out")?;
        let (p, g) = metric_inputs(pred, gt, height, width)?;
        *out = d1_rate(&p, &g, None, threshold).or_status()?;
        Ok(())
    })
}

/// Generates one synthetic stereo pair with the generator's default
/// layout and disparity range.
///
/// # Safety
/// `left` and `right` need room for `channels * height * width` floats,
/// `disp` for `height * width`.
#[no_mangle]
pub unsafe extern "C" fn sc_synth_pair(
    width: u32,
    height: u32,
    channels: u32,
    seed: u64,
    left: *mut f32,
    right: *mut f32,
    disp: *mut f32,
) -> ScStatus {
    guard(|| {
        non_null(left, "left")?;
        non_null(right, "right")?;
        non_null(disp, "disp")?;
        let cfg = SynthConfig {
            width: width as usize,
            height: height as usize,
            channels: channels as usize,
            seed,
            ..SynthConfig::default()
        };
        let s = gen_synthetic_pair(&cfg).or_status()?;
        ptr::copy_nonoverlapping(s.left.data().as_ptr(), left, s.left.data().len());
        ptr::copy_nonoverlapping(s.right.data().as_ptr(), right, s.right.data().len());
        ptr::copy_nonoverlapping(s.gt_disp.data.as_ptr(), disp, s.gt_disp.data.len());
        Ok(())
    })
}
