//! C ABI over the sequence stage, CMC ranking and checkpoint transplant.
//!
//! Every function returns an [`SqpStatus`]. On failure the message is kept
//! per thread and can be read with [`sqp_last_error`]. Parameter records are
//! opaque [`SqpParams`] handles released with [`sqp_params_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use libc::size_t;
use seqpool::evaluation::cmc;
use seqpool::seqstage::{
    approx_error, pool, stage_forward, Arch, Dropout, FrameFeatureSequence, SeqStageParams,
};
use seqpool::tensorcore::RngStream;
use seqpool::trainer::{transplant_checkpoint_bytes, Model, CHECKPOINT_MAGIC};
use seqpool::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SqpStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    Domain = 3,
    Format = 4,
    Io = 5,
    Config = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SqpArch {
    Rnn = 0,
    Fnn = 1,
}

impl From<SqpArch> for Arch {
    fn from(a: SqpArch) -> Self {
        match a {
            SqpArch::Rnn => Arch::Rnn,
            SqpArch::Fnn => Arch::Fnn,
        }
    }
}

/// Sequence stage parameters plus the architecture that reads them.
pub struct SqpParams {
    params: SeqStageParams,
    arch: Arch,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SqpStatus {
    match e {
        Error::Dimension(_) => SqpStatus::Dimension,
        Error::Domain(_) | Error::Divergence(_) => SqpStatus::Domain,
        Error::Format(_) => SqpStatus::Format,
        Error::Io(_) => SqpStatus::Io,
        Error::Config(_) => SqpStatus::Config,
    }
}

struct NullArg(&'static str);

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<NullArg> for Failure {
    fn from(n: NullArg) -> Self {
        Failure::Null(n.0)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SqpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SqpStatus::Ok
        }
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("null pointer: {name}"));
            SqpStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            SqpStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, NullArg> {
    // SAFETY: the caller passes either null or a valid pointer.
    unsafe { p.as_ref() }.ok_or(NullArg(name))
}

unsafe fn input<'a, T>(p: *const T, n: usize, name: &'static str) -> Result<&'a [T], NullArg> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(NullArg(name));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, name: &'static str) -> Result<&'a mut [T], NullArg> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(NullArg(name));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn path_arg(p: *const c_char, name: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::Config(format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn rows(data: &[f64], count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count).map(|i| data[i * dim..(i + 1) * dim].to_vec()).collect()
}

fn sequence(frames: &[f64], t: usize, d_in: usize) -> Result<FrameFeatureSequence, Error> {
    FrameFeatureSequence::new(rows(frames, t, d_in))
}

fn checked_len(a: usize, b: usize) -> Result<usize, Error> {
    a.checked_mul(b)
        .ok_or_else(|| Error::Dimension("buffer size overflows".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sqp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn sqp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint or a bare stage parameter record.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sqp_params_load(path: *const c_char, out: *mut *mut SqpParams) -> SqpStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let bytes = std::fs::read(path).map_err(Error::from)?;
        let handle = if bytes.starts_with(CHECKPOINT_MAGIC) {
            let m = Model::from_bytes(&bytes)?;
            SqpParams {
                params: m.stage,
                arch: m.arch,
            }
        } else {
            SqpParams {
                params: SeqStageParams::from_bytes(&bytes)?,
                arch: Arch::Rnn,
            }
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Random parameters with input size `d_in` and output size `d_out`.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sqp_params_new_random(
    d_in: size_t,
    d_out: size_t,
    arch: SqpArch,
    seed: u64,
    out: *mut *mut SqpParams,
) -> SqpStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        if d_in == 0 || d_out == 0 {
            return Err(Error::Dimension("sizes must be positive".into()).into());
        }
        let params = SeqStageParams::init(d_in, d_out, &mut RngStream::new(seed));
        *out = Box::into_raw(Box::new(SqpParams {
            params,
            arch: arch.into(),
        }));
        Ok(())
    })
}

/// Writes the bare stage parameter record.
///
/// # Safety
/// `params` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sqp_params_save(params: *const SqpParams, path: *const c_char) -> SqpStatus {
    guard(|| {
        let p = non_null(params, "params")?;
        let path = path_arg(path, "path")?;
        std::fs::write(path, p.params.to_bytes()).map_err(Error::from)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `params` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sqp_params_free(params: *mut SqpParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Input size, output size and architecture of a handle.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sqp_params_dims(
    params: *const SqpParams,
    d_in: *mut size_t,
    d_out: *mut size_t,
    arch: *mut SqpArch,
) -> SqpStatus {
    guard(|| {
        let p = non_null(params, "params")?;
        let (d_in, d_out, arch) = (
            d_in.as_mut().ok_or(NullArg("d_in"))?,
            d_out.as_mut().ok_or(NullArg("d_out"))?,
            arch.as_mut().ok_or(NullArg("arch"))?,
        );
        *d_in = p.params.d_in();
        *d_out = p.params.d_out();
        *arch = match p.arch {
            Arch::Rnn => SqpArch::Rnn,
            Arch::Fnn => SqpArch::Fnn,
        };
        Ok(())
    })
}

/// Switches the architecture that reads the parameters. Values are untouched.
///
/// # Safety
/// `params` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn sqp_params_set_arch(params: *mut SqpParams, arch: SqpArch) -> SqpStatus {
    guard(|| {
        let p = params.as_mut().ok_or(NullArg("params"))?;
        p.arch = arch.into();
        Ok(())
    })
}

/// Per-step stage outputs, dropout off. `frames` is `t * d_in` row-major,
/// `out` receives `t * d_out`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn sqp_stage_forward(
    params: *const SqpParams,
    frames: *const f64,
    t: size_t,
    out: *mut f64,
) -> SqpStatus {
    guard(|| {
        let p = non_null(params, "params")?;
        let frames = input(frames, checked_len(t, p.params.d_in())?, "frames")?;
        let out = output(out, checked_len(t, p.params.d_out())?, "out")?;
        let seq = sequence(frames, t, p.params.d_in())?;
        let o = stage_forward(p.arch, &seq, &p.params, Dropout::OFF, &mut RngStream::new(0))?;
        for (dst, src) in out.chunks_mut(p.params.d_out()).zip(o.outputs()) {
            dst.copy_from_slice(src);
        }
        Ok(())
    })
}

/// Average-pooled descriptor of length `d_out`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn sqp_stage_descriptor(
    params: *const SqpParams,
    frames: *const f64,
    t: size_t,
    out: *mut f64,
) -> SqpStatus {
    guard(|| {
        let p = non_null(params, "params")?;
        let frames = input(frames, checked_len(t, p.params.d_in())?, "frames")?;
        let out = output(out, p.params.d_out(), "out")?;
        let seq = sequence(frames, t, p.params.d_in())?;
        let o = stage_forward(p.arch, &seq, &p.params, Dropout::OFF, &mut RngStream::new(0))?;
        out.copy_from_slice(pool(&o)?.values());
        Ok(())
    })
}

/// Euclidean gap between recurrent and feed-forward outputs: one value per
/// step in `per_step` (length `t`, may be null) and the pooled gap.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn sqp_approx_error(
    params: *const SqpParams,
    frames: *const f64,
    t: size_t,
    per_step: *mut f64,
    pooled: *mut f64,
) -> SqpStatus {
    guard(|| {
        let p = non_null(params, "params")?;
        let frames = input(frames, checked_len(t, p.params.d_in())?, "frames")?;
        let pooled = pooled.as_mut().ok_or(NullArg("pooled"))?;
        let e = approx_error(&sequence(frames, t, p.params.d_in())?, &p.params)?;
        if !per_step.is_null() {
            output(per_step, t, "per_step")?.copy_from_slice(&e.per_step);
        }
        *pooled = e.pooled;
        Ok(())
    })
}

/// CMC curve of `count` probes against `count` gallery rows of size `dim`,
/// where probe `i` matches gallery row `truth[i]`. `out` receives `count`
/// values.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn sqp_cmc(
    probes: *const f64,
    gallery: *const f64,
    count: size_t,
    dim: size_t,
    truth: *const size_t,
    out: *mut f64,
) -> SqpStatus {
    guard(|| {
        let n = checked_len(count, dim)?;
        let probes = input(probes, n, "probes")?;
        let gallery = input(gallery, n, "gallery")?;
        let truth = input(truth, count, "truth")?;
        let out = output(out, count, "out")?;
        let curve = cmc(&rows(probes, count, dim), &rows(gallery, count, dim), truth)?;
        out.copy_from_slice(curve.values());
        Ok(())
    })
}

/// Copies checkpoint `input` to `output` with the architecture tag flipped.
///
/// # Safety
/// Both paths must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sqp_checkpoint_transplant(
    input: *const c_char,
    output: *const c_char,
) -> SqpStatus {
    guard(|| {
        let input = path_arg(input, "input")?;
        let output = path_arg(output, "output")?;
        let bytes = std::fs::read(input).map_err(Error::from)?;
        std::fs::write(output, transplant_checkpoint_bytes(&bytes)?).map_err(Error::from)?;
        Ok(())
    })
}
