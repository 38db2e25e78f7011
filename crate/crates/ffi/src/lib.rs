//! C ABI over the experiment pipeline and model utilities.
//!
//! Every function returns a [`UlStatus`]; on failure the message is kept
//! per thread and read with [`ul_last_error`]. Handles are opaque and must
//! be released with their `_free` function.
//!
//! Safety contract shared by every `unsafe` function here: pointer
//! arguments are either null (reported as `UlStatus::NullPointer`) or valid
//! for the access implied by their type; strings are NUL-terminated; output
//! buffers are writable for the stated length; handles come from this
//! library and are not used after being freed.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use unlearn_lab::attack::{pii_match, rouge_l_f1, RecoveryReport};
use unlearn_lab::error::Error;
use unlearn_lab::lm::{generate_greedy, seq_logprob, LmModel, ModelConfig};
use unlearn_lab::pipeline::{ExperimentConfig, Workspace};
use unlearn_lab::tokenizer::{decode, encode, is_stop, BOS};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Io = 5,
    Artifact = 6,
    Numeric = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct UlModel(LmModel);

/// Opaque experiment directory handle.
pub struct UlWorkspace(Workspace);

/// Attack rates in `[0, 1]` and ROUGE-L utility in `[0, 100]`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct UlRecoveryReport {
    pub p1_known: f64,
    pub p1_unknown: f64,
    pub p2_known: f64,
    pub p2_unknown: f64,
    pub p3_known: f64,
    pub p3_unknown: f64,
    pub u1_rouge: f64,
}

impl From<&RecoveryReport> for UlRecoveryReport {
    fn from(r: &RecoveryReport) -> Self {
        UlRecoveryReport {
            p1_known: r.p1_known,
            p1_unknown: r.p1_unknown,
            p2_known: r.p2_known,
            p2_unknown: r.p2_unknown,
            p3_known: r.p3_known,
            p3_unknown: r.p3_unknown,
            u1_rouge: r.u1_rouge,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(UlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::TomlDe(_) | Error::TomlSer(_) => UlStatus::Config,
            Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) | Error::Record { .. } => UlStatus::Io,
            Error::Artifact { .. } => UlStatus::Artifact,
            Error::NonFinite(_) | Error::Diverged { .. } | Error::Undefined(_) => UlStatus::Numeric,
            _ => UlStatus::InvalidArgument,
        };
        Fail(code, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> UlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            UlStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            UlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(UlStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(UlStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(UlStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(UlStatus::NullPointer, format!("{what} is null")))
}

/// Copies the last error of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length, 0 if none.
#[no_mangle]
pub unsafe extern "C" fn ul_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Loads a checkpoint written by the pipeline.
#[no_mangle]
pub unsafe extern "C" fn ul_model_load(path: *const c_char, out: *mut *mut UlModel) -> UlStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(UlModel(LmModel::load(path.as_ref())?)));
        Ok(())
    })
}

/// A freshly initialized model with the default desk shape.
#[no_mangle]
pub unsafe extern "C" fn ul_model_init_default(seed: u64, out: *mut *mut UlModel) -> UlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = ModelConfig { seed, ..Default::default() };
        *out = Box::into_raw(Box::new(UlModel(LmModel::init(&cfg)?)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ul_model_save(model: *const UlModel, path: *const c_char) -> UlStatus {
    guard(|| {
        let m = handle(model, "model")?;
        m.0.save(str_arg(path, "path")?.as_ref())?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ul_model_free(model: *mut UlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ul_model_num_layers(model: *const UlModel, out: *mut usize) -> UlStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(model, "model")?.0.num_layers();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ul_model_num_params(model: *const UlModel, out: *mut usize) -> UlStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(model, "model")?.0.params().numel();
        Ok(())
    })
}

/// Greedy completion of `prompt` (BOS is prepended). Writes the decoded
/// text without the stop token into `buf`; `written` receives the byte
/// length excluding the NUL. Fails with `BUFFER_TOO_SMALL` if it does not
/// fit, still reporting the required length.
#[no_mangle]
pub unsafe extern "C" fn ul_model_generate(
    model: *const UlModel,
    prompt: *const c_char,
    max_new: usize,
    buf: *mut c_char,
    len: usize,
    written: *mut usize,
) -> UlStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let mut toks = vec![BOS];
        toks.extend(encode(str_arg(prompt, "prompt")?));
        let gen = generate_greedy(&m.0, &toks, max_new)?;
        let text: Vec<u32> = gen.into_iter().take_while(|&t| !is_stop(t)).collect();
        let s = decode(&text).replace('\0', " ");
        *out_ptr(written, "written")? = s.len();
        if buf.is_null() || s.len() + 1 > len {
            return Err(Fail(UlStatus::BufferTooSmall, format!("need {} bytes", s.len() + 1)));
        }
        ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, buf, s.len());
        *buf.add(s.len()) = 0;
        Ok(())
    })
}

/// `log p(answer | BOS prompt)` in nats.
#[no_mangle]
pub unsafe extern "C" fn ul_model_logprob(
    model: *const UlModel,
    prompt: *const c_char,
    answer: *const c_char,
    out: *mut f64,
) -> UlStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let mut x = vec![BOS];
        x.extend(encode(str_arg(prompt, "prompt")?));
        let y = encode(str_arg(answer, "answer")?);
        *out_ptr(out, "out")? = seq_logprob(&m.0, &x, &y)?;
        Ok(())
    })
}

/// 1 if the trimmed PII string occurs in `generated`, else 0.
#[no_mangle]
pub unsafe extern "C" fn ul_pii_match(generated: *const c_char, pii: *const c_char, out: *mut i32) -> UlStatus {
    guard(|| {
        let g = encode(str_arg(generated, "generated")?);
        *out_ptr(out, "out")? = i32::from(pii_match(&g, str_arg(pii, "pii")?));
        Ok(())
    })
}

/// ROUGE-L F1 over whitespace tokens, in `[0, 1]`.
#[no_mangle]
pub unsafe extern "C" fn ul_rouge_l(candidate: *const c_char, reference: *const c_char, out: *mut f64) -> UlStatus {
    guard(|| {
        *out_ptr(out, "out")? = rouge_l_f1(str_arg(candidate, "candidate")?, str_arg(reference, "reference")?);
        Ok(())
    })
}

/// Opens the experiment directory for a TOML config (NULL for the
/// default) under `root`.
#[no_mangle]
pub unsafe extern "C" fn ul_workspace_open(
    config_path: *const c_char,
    root: *const c_char,
    out: *mut *mut UlWorkspace,
) -> UlStatus {
    guard(|| {
        let cfg = match opt_str_arg(config_path, "config_path")? {
            Some(p) => ExperimentConfig::load(p.as_ref())?,
            None => ExperimentConfig::default(),
        };
        let root = PathBuf::from(str_arg(root, "root")?);
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(UlWorkspace(Workspace::open(cfg, &root)?)));
        Ok(())
    })
}

/// Same as [`ul_workspace_open`] with the config given as TOML text.
#[no_mangle]
pub unsafe extern "C" fn ul_workspace_open_toml(
    toml: *const c_char,
    root: *const c_char,
    out: *mut *mut UlWorkspace,
) -> UlStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_toml(str_arg(toml, "toml")?)?;
        let root = PathBuf::from(str_arg(root, "root")?);
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(UlWorkspace(Workspace::open(cfg, &root)?)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ul_workspace_free(ws: *mut UlWorkspace) {
    if !ws.is_null() {
        drop(Box::from_raw(ws));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ul_workspace_synth(ws: *const UlWorkspace, seed: u64) -> UlStatus {
    guard(|| {
        handle(ws, "workspace")?.0.synth(seed)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ul_workspace_train(ws: *const UlWorkspace, seed: u64) -> UlStatus {
    guard(|| Ok(handle(ws, "workspace")?.0.train(seed)?))
}

#[no_mangle]
pub unsafe extern "C" fn ul_workspace_coreset(ws: *const UlWorkspace, seed: u64) -> UlStatus {
    guard(|| {
        handle(ws, "workspace")?.0.coreset(seed)?;
        Ok(())
    })
}

/// Runs the named method; `on_coreset` nonzero unlearns the core-set.
#[no_mangle]
pub unsafe extern "C" fn ul_workspace_unlearn(
    ws: *const UlWorkspace,
    seed: u64,
    method: *const c_char,
    on_coreset: i32,
) -> UlStatus {
    guard(|| {
        handle(ws, "workspace")?.0.unlearn(seed, str_arg(method, "method")?, on_coreset != 0)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ul_workspace_attack(
    ws: *const UlWorkspace,
    seed: u64,
    label: *const c_char,
    out: *mut UlRecoveryReport,
) -> UlStatus {
    guard(|| {
        let r = handle(ws, "workspace")?.0.attack(seed, str_arg(label, "label")?)?;
        *out_ptr(out, "out")? = UlRecoveryReport::from(&r);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ul_workspace_analyze(ws: *const UlWorkspace, seed: u64, label: *const c_char) -> UlStatus {
    guard(|| {
        handle(ws, "workspace")?.0.analyze(seed, str_arg(label, "label")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ul_workspace_report(ws: *const UlWorkspace) -> UlStatus {
    guard(|| {
        handle(ws, "workspace")?.0.report()?;
        Ok(())
    })
}

/// Loads a model of the workspace (`target`, `retrain` or a method label).
#[no_mangle]
pub unsafe extern "C" fn ul_workspace_model(
    ws: *const UlWorkspace,
    seed: u64,
    label: *const c_char,
    out: *mut *mut UlModel,
) -> UlStatus {
    guard(|| {
        let m = handle(ws, "workspace")?.0.model(seed, str_arg(label, "label")?)?;
        *out_ptr(out, "out")? = Box::into_raw(Box::new(UlModel(m)));
        Ok(())
    })
}
