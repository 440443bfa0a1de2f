//! C ABI over the gridguide pipeline.
//!
//! Every function returns a [`GgStatus`]; on failure the message is
//! available from [`gg_last_error`] on the same thread. Models are opaque
//! handles released with [`gg_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gridguide::backbone::ImageTensor;
use gridguide::config::RunConfig;
use gridguide::data::{dist_score, iou, size_score, BBox};
use gridguide::guidance;
use gridguide::imageio::read_ppm;
use gridguide::pipeline::{self, Model};
use gridguide::{Error, Tensor};

/// Status codes; 1–3 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GgStatus {
    Ok = 0,
    Usage = 1,
    Data = 2,
    Numeric = 3,
    NullPointer = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Normalised box `(x, y, w, h)`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgMetrics {
    pub iou: f64,
    pub size_score: f64,
    pub dist_score: f64,
}

/// Opaque model handle.
pub struct GgModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GgStatus {
    match e.exit_code() {
        1 => GgStatus::Usage,
        3 => GgStatus::Numeric,
        _ => GgStatus::Data,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Small(usize),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GgStatus::Ok
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            GgStatus::NullPointer
        }
        Ok(Err(Fail::Small(need))) => {
            set_error(format!("output buffer too small: need {need} values"));
            GgStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".into());
            GgStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::Usage(format!("{what} is not UTF-8"))))
}

unsafe fn model<'a>(m: *const GgModel) -> Result<&'a Model, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or(Fail::Null("model"))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn image(rgb: *const f64, height: usize, width: usize) -> Result<ImageTensor, Fail> {
    let n = height.checked_mul(width).and_then(|v| v.checked_mul(3)).ok_or(Fail::Lib(Error::Shape("image too large".into())))?;
    Ok(ImageTensor::new(height, width, slice(rgb, n, "rgb")?.to_vec())?)
}

fn to_box(b: &GgBox) -> Result<BBox, Fail> {
    Ok(BBox::new(b.x, b.y, b.w, b.h)?)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn gg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn gg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fresh seeded model. `config_path` may be null for defaults.
///
/// # Safety
/// `config_path` must be null or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gg_model_new(config_path: *const c_char, seed: u64, out: *mut *mut GgModel) -> GgStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let mut cfg = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(&PathBuf::from(text(config_path, "config_path")?))?
        };
        cfg.seed = seed;
        let m = Box::new(GgModel { inner: Model::new(cfg)? });
        *out = Box::into_raw(m);
        Ok(())
    })
}

/// Loads a checkpoint written by the CLI or [`gg_model_save`].
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gg_model_load(path: *const c_char, out: *mut *mut GgModel) -> GgStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let m = Model::load(&PathBuf::from(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(GgModel { inner: m }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn gg_model_save(model: *const GgModel, path: *const c_char) -> GgStatus {
    guard(|| {
        let m = self::model(model)?;
        m.save(&PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gg_model_free(model: *mut GgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Guidance map for an `height×width` RGB image (row-major, channels last,
/// values in `[0, 1]`). Writes `out_h·out_w` values into `out` when
/// `out_len` suffices; the grid size is reported either way.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gg_guidance_map(
    model: *const GgModel,
    rgb: *const f64,
    height: usize,
    width: usize,
    caption: *const c_char,
    out: *mut f64,
    out_len: usize,
    out_h: *mut usize,
    out_w: *mut usize,
) -> GgStatus {
    guard(|| {
        let m = self::model(model)?;
        let img = image(rgb, height, width)?;
        let g = m.guidance_map(&img, text(caption, "caption")?)?;
        if out_h.is_null() || out_w.is_null() {
            return Err(Fail::Null("out_h/out_w"));
        }
        *out_h = g.h;
        *out_w = g.w;
        if out_len < g.data.len() {
            return Err(Fail::Small(g.data.len()));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        std::slice::from_raw_parts_mut(out, g.data.len()).copy_from_slice(&g.data);
        Ok(())
    })
}

/// Placement box predicted from the guidance map.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gg_predict_box(
    model: *const GgModel,
    rgb: *const f64,
    height: usize,
    width: usize,
    caption: *const c_char,
    out: *mut GgBox,
) -> GgStatus {
    guard(|| {
        let m = self::model(model)?;
        let img = image(rgb, height, width)?;
        let b = m.predict_box(&img, text(caption, "caption")?)?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        *out = GgBox { x: b.x, y: b.y, w: b.w, h: b.h };
        Ok(())
    })
}

/// Full guided run on a PPM file; writes `output.ppm`, `guidance.pgm` and
/// `trace.tsv` into `out_dir`.
///
/// # Safety
/// All strings must be valid C strings.
#[no_mangle]
pub unsafe extern "C" fn gg_run(
    model: *const GgModel,
    image_path: *const c_char,
    caption: *const c_char,
    out_dir: *const c_char,
) -> GgStatus {
    guard(|| {
        let m = self::model(model)?;
        let img = read_ppm(&PathBuf::from(text(image_path, "image_path")?))?;
        let out = pipeline::run(m, &img, text(caption, "caption")?)?;
        pipeline::write_run(&PathBuf::from(text(out_dir, "out_dir")?), &out)?;
        Ok(())
    })
}

/// Placement energy of a `rows×cols` attention matrix against a mask of
/// `rows` cells.
///
/// # Safety
/// `attention` must hold `rows·cols` values, `mask` `rows`.
#[no_mangle]
pub unsafe extern "C" fn gg_energy(
    attention: *const f64,
    rows: usize,
    cols: usize,
    mask: *const f64,
    out: *mut f64,
) -> GgStatus {
    guard(|| {
        let n = rows.checked_mul(cols).ok_or(Fail::Lib(Error::Shape("attention too large".into())))?;
        let s = Tensor::new(&[rows, cols], slice(attention, n, "attention")?.to_vec())?;
        let mask = slice(mask, rows, "mask")?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        *out = guidance::energy(&s, mask);
        Ok(())
    })
}

/// IoU, size score and distance score of two boxes.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gg_box_metrics(a: GgBox, b: GgBox, out: *mut GgMetrics) -> GgStatus {
    guard(|| {
        let (a, b) = (to_box(&a)?, to_box(&b)?);
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        *out = GgMetrics {
            iou: iou(&a, &b),
            size_score: size_score(&a, &b),
            dist_score: dist_score(&a, &b),
        };
        Ok(())
    })
}
