//! C ABI over the recognition engine.
//!
//! Every function returns an [`MdlzStatus`]; on failure the message is kept
//! per thread and read with [`mdlz_last_error`]. Handles are opaque and must
//! be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mdlzoo::charlm::NGramLm;
use mdlzoo::ctc::{greedy_decode, prefix_beam_decode, FusionConfig, PosteriorMatrix};
use mdlzoo::netzoo::{load_checkpoint, save_checkpoint, Arch, CheckpointMeta, Network, NetworkSpec, VariantKnobs};
use mdlzoo::recurrent::Schedule;
use mdlzoo::synthline::{preprocess_to, Charset, GrayImage};
use mdlzoo::trainer::glorot_init;
use mdlzoo::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MdlzStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    Shape = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// Network plus its charset and class priors.
pub struct MdlzModel {
    net: Network<f32>,
    charset: Charset,
    priors: Option<Vec<f64>>,
}

/// Character or word n-gram model.
pub struct MdlzLm {
    lm: NGramLm,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(err: &Error) -> MdlzStatus {
    match err {
        Error::InvalidArgument(_) | Error::Unalignable { .. } => MdlzStatus::InvalidArgument,
        Error::Io { .. } => MdlzStatus::Io,
        Error::Parse { .. } => MdlzStatus::Parse,
        Error::Checkpoint(_) => MdlzStatus::Checkpoint,
        Error::Shape(_) => MdlzStatus::Shape,
        Error::Tape(_) | Error::NonFinite { .. } => MdlzStatus::Internal,
    }
}

/// Run `body`, converting errors and panics into a status.
fn guard(body: impl FnOnce() -> Result<(), (MdlzStatus, String)>) -> MdlzStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => MdlzStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MdlzStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (MdlzStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MdlzStatus, String) {
    (MdlzStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MdlzStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (MdlzStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn model_ref<'a>(m: *const MdlzModel) -> Result<&'a MdlzModel, (MdlzStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn image_from(pixels: *const u8, width: usize, height: usize) -> Result<GrayImage, (MdlzStatus, String)> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| (MdlzStatus::InvalidArgument, "image size overflows".to_string()))?;
    GrayImage::new(width, height, std::slice::from_raw_parts(pixels, n).to_vec()).map_err(lib_err)
}

/// Copy `text` plus a terminating NUL into `buf`; `needed` receives the full
/// size including the NUL.
unsafe fn write_text(
    text: &str,
    buf: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> Result<(), (MdlzStatus, String)> {
    let bytes = text.as_bytes();
    if !needed.is_null() {
        *needed = bytes.len() + 1;
    }
    if buf.is_null() || capacity < bytes.len() + 1 {
        return Err((
            MdlzStatus::BufferTooSmall,
            format!("text needs {} bytes, buffer holds {capacity}", bytes.len() + 1),
        ));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mdlz_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf`.
///
/// # Safety
/// `buf` must hold `capacity` bytes or be null; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn mdlz_last_error(buf: *mut c_char, capacity: usize, needed: *mut usize) -> MdlzStatus {
    let text = LAST_ERROR.with(|e| e.borrow().to_string_lossy().into_owned());
    match write_text(&text, buf, capacity, needed) {
        Ok(()) => MdlzStatus::Ok,
        Err((s, _)) => s,
    }
}

/// Parameter and multiply-accumulate totals of `arch` at `height × width`.
///
/// # Safety
/// `arch` must be a NUL-terminated string; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn mdlz_audit(
    arch: *const c_char,
    height: usize,
    width: usize,
    params: *mut u64,
    macs: *mut u64,
) -> MdlzStatus {
    guard(|| {
        let arch: Arch = c_str(arch, "arch")?.parse().map_err(lib_err)?;
        let report = NetworkSpec::build(arch, VariantKnobs::default())
            .and_then(|s| s.audit(height, width))
            .map_err(lib_err)?;
        if !params.is_null() {
            *params = report.total_params();
        }
        if !macs.is_null() {
            *macs = report.total_macs();
        }
        Ok(())
    })
}

/// Glorot-initialized reference network of `arch` over the default charset.
///
/// # Safety
/// `arch` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mdlz_model_new(arch: *const c_char, seed: u64, out: *mut *mut MdlzModel) -> MdlzStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let arch: Arch = c_str(arch, "arch")?.parse().map_err(lib_err)?;
        let spec = NetworkSpec::build(arch, VariantKnobs::default()).map_err(lib_err)?;
        let mut net = Network::<f32>::zeros(spec).map_err(lib_err)?;
        glorot_init(&mut net, seed);
        *out = Box::into_raw(Box::new(MdlzModel {
            net,
            charset: Charset::default_set(),
            priors: None,
        }));
        Ok(())
    })
}

/// Load a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mdlz_model_load(path: *const c_char, out: *mut *mut MdlzModel) -> MdlzStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(c_str(path, "path")?);
        let (net, meta) = load_checkpoint(&path, None).map_err(lib_err)?;
        let charset = match meta.charset {
            Some(s) => Charset::new(s.chars().collect()).map_err(lib_err)?,
            None => Charset::default_set(),
        };
        if charset.class_count() != net.spec().class_count() {
            return Err((
                MdlzStatus::Checkpoint,
                format!(
                    "checkpoint charset has {} classes, network emits {}",
                    charset.class_count(),
                    net.spec().class_count()
                ),
            ));
        }
        *out = Box::into_raw(Box::new(MdlzModel {
            net,
            charset,
            priors: meta.priors,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdlz_model_save(model: *const MdlzModel, path: *const c_char) -> MdlzStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = PathBuf::from(c_str(path, "path")?);
        let meta = CheckpointMeta {
            charset: Some(m.charset.chars().iter().collect()),
            priors: m.priors.clone(),
        };
        save_checkpoint(&m.net, &meta, path).map_err(lib_err)
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mdlz_model_free(model: *mut MdlzModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mdlz_model_param_count(model: *const MdlzModel, out: *mut u64) -> MdlzStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.net.spec().param_count();
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mdlz_model_class_count(model: *const MdlzModel, out: *mut usize) -> MdlzStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.net.spec().class_count();
        Ok(())
    })
}

/// Softmax posteriors `[frames × classes]` of an 8-bit grayscale line image
/// (255 = paper). Call with a null `probs` to query `frames` and `classes`.
///
/// # Safety
/// `pixels` must hold `width·height` bytes and `probs` `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn mdlz_model_posteriors(
    model: *const MdlzModel,
    pixels: *const u8,
    width: usize,
    height: usize,
    probs: *mut f64,
    capacity: usize,
    frames: *mut usize,
    classes: *mut usize,
) -> MdlzStatus {
    guard(|| {
        let m = model_ref(model)?;
        let post = posterior_of(m, pixels, width, height)?;
        if !frames.is_null() {
            *frames = post.frames();
        }
        if !classes.is_null() {
            *classes = post.classes();
        }
        let data = post.data();
        if probs.is_null() || capacity < data.len() {
            return Err((
                MdlzStatus::BufferTooSmall,
                format!("posteriors need {} values, buffer holds {capacity}", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), probs, data.len());
        Ok(())
    })
}

unsafe fn posterior_of(
    m: &MdlzModel,
    pixels: *const u8,
    width: usize,
    height: usize,
) -> Result<PosteriorMatrix, (MdlzStatus, String)> {
    let image = image_from(pixels, width, height)?;
    let x = preprocess_to(&image, m.net.spec().input_height).map_err(lib_err)?;
    let logits = m.net.infer(&x, Schedule::Wavefront { workers: 1 }).map_err(lib_err)?;
    PosteriorMatrix::from_logits(&logits).map_err(lib_err)
}

/// Transcribe a line image. `beam_width` 0 decodes greedily; `char_lm` may
/// be null. `needed` receives the UTF-8 size including the NUL.
///
/// # Safety
/// `pixels` must hold `width·height` bytes and `text` `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn mdlz_model_decode(
    model: *const MdlzModel,
    pixels: *const u8,
    width: usize,
    height: usize,
    char_lm: *const MdlzLm,
    beam_width: usize,
    lm_weight: f64,
    prior_weight: f64,
    insertion_bonus: f64,
    text: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> MdlzStatus {
    guard(|| {
        let m = model_ref(model)?;
        let post = posterior_of(m, pixels, width, height)?;
        let labels = if beam_width == 0 {
            greedy_decode(&post)
        } else {
            let symbols = m.charset.class_symbols();
            let mut cfg = FusionConfig::new(beam_width);
            cfg.lm_weight = lm_weight;
            cfg.prior_weight = prior_weight;
            cfg.insertion_bonus = insertion_bonus;
            cfg.priors = m.priors.as_deref();
            cfg.symbols = Some(&symbols);
            cfg.char_lm = char_lm.as_ref().map(|l| &l.lm);
            prefix_beam_decode(&post, &cfg).map_err(lib_err)?.labels
        };
        write_text(&m.charset.decode(&labels), text, capacity, needed)
    })
}

/// Load an ARPA n-gram model.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mdlz_lm_load(path: *const c_char, out: *mut *mut MdlzLm) -> MdlzStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = c_str(path, "path")?;
        let text = std::fs::read_to_string(path).map_err(|e| (MdlzStatus::Io, format!("{path}: {e}")))?;
        let lm = NGramLm::from_arpa(&text).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MdlzLm { lm }));
        Ok(())
    })
}

/// # Safety
/// `lm` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mdlz_lm_order(lm: *const MdlzLm, out: *mut usize) -> MdlzStatus {
    guard(|| {
        let l = lm.as_ref().ok_or_else(|| null("lm"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = l.lm.order();
        Ok(())
    })
}

/// # Safety
/// `lm` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mdlz_lm_free(lm: *mut MdlzLm) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}
