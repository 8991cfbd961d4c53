//! C interface to `multirep`.
//!
//! Objects are opaque handles created by `mr_*_new`/`mr_*_load` style
//! functions and released with the matching `mr_*_free`. Every fallible call
//! returns an [`MrStatus`]; on failure [`mr_last_error`] describes what went
//! wrong on the calling thread. Images are NHWC `double` arrays with pixels in
//! `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use multirep::attacks::{attack, AttackSpec, Norm};
use multirep::game_lab::{self, MatrixGame, OracleSlack};
use multirep::model::{Architecture, Classifier, Predictor};
use multirep::repspace::{dct2d_space, identity_space, RepresentationSpace};
use multirep::tensor::{argmax_rows, Tensor};
use multirep::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrNorm {
    L1 = 0,
    L2 = 1,
    Linf = 2,
}

impl From<MrNorm> for Norm {
    fn from(n: MrNorm) -> Self {
        match n {
            MrNorm::L1 => Norm::L1,
            MrNorm::L2 => Norm::L2,
            MrNorm::Linf => Norm::Linf,
        }
    }
}

/// Outcome of the minimax-guarantee check on one matrix game.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MrMinimaxCheck {
    pub minimax: f64,
    pub achieved: f64,
    pub margin: f64,
    pub eta: f64,
    pub steps: usize,
    pub pass: bool,
}

pub struct MrClassifier(Classifier);
pub struct MrSpace(RepresentationSpace);
pub struct MrGame(MatrixGame);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> MrStatus {
    match err {
        Error::ShapeMismatch { .. } | Error::CountMismatch { .. } => MrStatus::ShapeMismatch,
        Error::Io { .. } => MrStatus::Io,
        Error::BadMagic { .. } | Error::Truncated { .. } | Error::Checkpoint(_) | Error::Json(_) | Error::Config(_) => {
            MrStatus::Format
        }
        _ => MrStatus::InvalidArgument,
    }
}

struct Fail(MrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MrStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic for [`mr_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MrStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MrStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    let s = as_ref(p, "path")?;
    let s = CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail(MrStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn images(model: &Classifier, data: *const f64, n: usize) -> Result<Tensor, Fail> {
    let [h, w, c] = model.input_shape();
    let x = slice(data, n * h * w * c, "images")?;
    Ok(Tensor::new(vec![n, h, w, c], x.to_vec())?)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next `mr_*` call on this thread.
#[no_mangle]
pub extern "C" fn mr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// The desk CNN for 28×28×1 inputs and 10 classes, He-initialized from `seed`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mr_classifier_desk(seed: u64, out: *mut *mut MrClassifier) -> MrStatus {
    guard(|| {
        let arch = Architecture::desk([28, 28, 1], 10)?;
        put(out, MrClassifier(Classifier::he_init(arch, seed)))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mr_classifier_load(path: *const c_char, out: *mut *mut MrClassifier) -> MrStatus {
    guard(|| put(out, MrClassifier(Classifier::load(self::path(path)?)?)))
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mr_classifier_save(model: *const MrClassifier, path: *const c_char) -> MrStatus {
    guard(|| Ok(as_ref(model, "model")?.0.save(self::path(path)?)?))
}

/// Number of parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mr_classifier_param_count(model: *const MrClassifier) -> usize {
    model.as_ref().map_or(0, |m| m.0.params().len())
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mr_classifier_num_classes(model: *const MrClassifier) -> usize {
    model.as_ref().map_or(0, |m| m.0.num_classes())
}

/// Writes `n × classes` logits to `scores`.
///
/// # Safety
/// `images` must hold `n·28·28·1` (generally `n·H·W·C`) doubles and `scores`
/// room for `n·classes`.
#[no_mangle]
pub unsafe extern "C" fn mr_classifier_scores(model: *const MrClassifier, images: *const f64, n: usize, scores: *mut f64) -> MrStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        let s = m.scores(&self::images(m, images, n)?)?;
        slice_mut(scores, s.len(), "scores")?.copy_from_slice(s.data());
        Ok(())
    })
}

/// Writes the argmax class of each image to `labels`.
///
/// # Safety
/// As [`mr_classifier_scores`], with `labels` holding `n` entries.
#[no_mangle]
pub unsafe extern "C" fn mr_classifier_predict(model: *const MrClassifier, images: *const f64, n: usize, labels: *mut usize) -> MrStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        let pred = argmax_rows(&m.scores(&self::images(m, images, n)?)?);
        slice_mut(labels, n, "labels")?.copy_from_slice(&pred);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mr_classifier_free(model: *mut MrClassifier) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mr_space_pixel(out: *mut *mut MrSpace) -> MrStatus {
    guard(|| put(out, MrSpace(identity_space())))
}

/// Orthonormal 2-D DCT over each channel of `height × width × channels` images.
///
/// # Safety
/// `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mr_space_dct(height: usize, width: usize, channels: usize, out: *mut *mut MrSpace) -> MrStatus {
    guard(|| put(out, MrSpace(dct2d_space(height, width, channels)?)))
}

unsafe fn map_space(
    space: *const MrSpace,
    shape: [usize; 4],
    input: *const f64,
    output: *mut f64,
    inverse: bool,
) -> MrStatus {
    guard(|| {
        let s = &as_ref(space, "space")?.0;
        let len = shape.iter().product();
        let x = Tensor::new(shape.to_vec(), slice(input, len, "input")?.to_vec())?;
        let y = if inverse { s.inverse(&x)? } else { s.forward(&x)? };
        slice_mut(output, len, "output")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Maps `n` NHWC images into the space's coefficients.
///
/// # Safety
/// `input` and `output` must each hold `n·h·w·c` doubles.
#[no_mangle]
pub unsafe extern "C" fn mr_space_forward(space: *const MrSpace, n: usize, h: usize, w: usize, c: usize, input: *const f64, output: *mut f64) -> MrStatus {
    map_space(space, [n, h, w, c], input, output, false)
}

/// Inverse of [`mr_space_forward`].
///
/// # Safety
/// As [`mr_space_forward`].
#[no_mangle]
pub unsafe extern "C" fn mr_space_inverse(space: *const MrSpace, n: usize, h: usize, w: usize, c: usize, input: *const f64, output: *mut f64) -> MrStatus {
    map_space(space, [n, h, w, c], input, output, true)
}

/// # Safety
/// `space` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mr_space_free(space: *mut MrSpace) {
    if !space.is_null() {
        drop(Box::from_raw(space));
    }
}

/// Attacks `n` labelled images within the `norm` ball of radius `epsilon` in
/// `space`, with `steps` ascent steps (step size `2.5ε/steps`) and
/// `restarts` restarts, and writes the adversarial images to `out`.
///
/// # Safety
/// `images` and `out` must hold `n·H·W·C` doubles, `labels` `n` entries.
#[no_mangle]
pub unsafe extern "C" fn mr_attack(
    model: *const MrClassifier,
    space: *const MrSpace,
    norm: MrNorm,
    epsilon: f64,
    steps: usize,
    restarts: usize,
    seed: u64,
    images: *const f64,
    labels: *const usize,
    n: usize,
    out: *mut f64,
) -> MrStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        let s = &as_ref(space, "space")?.0;
        let x = self::images(m, images, n)?;
        let y = slice(labels, n, "labels")?;
        let spec = AttackSpec::new(norm.into(), epsilon, steps).with_restarts(restarts).with_seed(seed);
        let adv = attack(m, s, &x, y, &spec)?.adversarial;
        slice_mut(out, adv.len(), "out")?.copy_from_slice(adv.data());
        Ok(())
    })
}

/// A `rows × cols` game from row-major `losses` in `[0, bound]`.
///
/// # Safety
/// `losses` must hold `rows·cols` doubles; `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mr_game_new(rows: usize, cols: usize, losses: *const f64, bound: f64, out: *mut *mut MrGame) -> MrStatus {
    guard(|| {
        let l = slice(losses, rows * cols, "losses")?.to_vec();
        put(out, MrGame(MatrixGame::new(rows, cols, l, bound)?))
    })
}

/// A game with entries uniform in `[0, 1]`.
///
/// # Safety
/// `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mr_game_random(rows: usize, cols: usize, seed: u64, out: *mut *mut MrGame) -> MrStatus {
    guard(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        put(out, MrGame(MatrixGame::random(rows, cols, 1.0, &mut rng)?))
    })
}

/// `min_θ max_i L_i(θ)`, or NaN for a null handle.
///
/// # Safety
/// `game` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mr_game_pure_minimax(game: *const MrGame) -> f64 {
    game.as_ref().map_or(f64::NAN, |g| game_lab::pure_minimax(&g.0).0)
}

/// Runs multiplicative weights on the game with the schedule for accuracy
/// `eps`, against an oracle that wastes `delta` of slack, and checks the
/// minimax guarantee.
///
/// # Safety
/// `game` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mr_game_verify_minimax(game: *const MrGame, eps: f64, delta: f64, out: *mut MrMinimaxCheck) -> MrStatus {
    guard(|| {
        let g = &as_ref(game, "game")?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let slack = if delta == 0.0 { OracleSlack::exact() } else { OracleSlack::adversarial(delta)? };
        let (r, _, _) = game_lab::verify_minimax_bound(g, eps, slack)?;
        *out = MrMinimaxCheck {
            minimax: r.minimax,
            achieved: r.achieved,
            margin: r.margin,
            eta: r.eta,
            steps: r.steps,
            pass: r.pass,
        };
        Ok(())
    })
}

/// # Safety
/// `game` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mr_game_free(game: *mut MrGame) {
    if !game.is_null() {
        drop(Box::from_raw(game));
    }
}
