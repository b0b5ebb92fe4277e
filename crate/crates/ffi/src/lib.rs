//! C interface to the lifelong-edit engine.
//!
//! Objects cross the boundary as opaque handles created by `le_*_new`/`le_*_load`
//! and released with the matching `le_*_free`. Every fallible call returns an
//! [`LeStatus`] code; on failure [`le_last_error`] describes the problem.
//! Strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lifelong_edit::checkpoint::{Checkpoint, EditSession, RunMeta};
use lifelong_edit::data::{encode_pair, EditInstance, EOA};
use lifelong_edit::editor::{Ablation, Editor, EditorConfig};
use lifelong_edit::eval::exact_match;
use lifelong_edit::model::{greedy_decode, parse_module_list, ModuleRef};
use lifelong_edit::stats::DEFAULT_EPS;
use lifelong_edit::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    Encoding = 6,
    Shape = 7,
    Numerical = 8,
    BufferTooSmall = 9,
    Other = 10,
    Panic = 11,
}

/// A model checkpoint: parameters, vocabulary and run metadata.
pub struct LeModel {
    ckpt: Checkpoint,
}

/// An editing session bound to one model configuration.
pub struct LeEditor {
    editor: Editor,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> LeStatus {
    match err.kind() {
        "io" => LeStatus::Io,
        "checkpoint" => LeStatus::Checkpoint,
        "config" => LeStatus::Config,
        "vocabulary" | "encoding" | "length" | "parse" => LeStatus::Encoding,
        "shape" => LeStatus::Shape,
        "numerical" | "non_finite" | "training" => LeStatus::Numerical,
        _ => LeStatus::Other,
    }
}

struct Failure(LeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LeStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(LeStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(LeStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// Same as [`text`]; null maps to `None`.
unsafe fn opt_text<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

/// Message for the most recent failure on this thread ("" after a success).
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn le_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn le_model_load(path: *const c_char, out: *mut *mut LeModel) -> LeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = PathBuf::from(text(path, "path")?);
        let ckpt = Checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(LeModel { ckpt }));
        Ok(())
    })
}

/// Writes the model, plus the editor's session when `editor` is non-null.
///
/// # Safety
/// `model` must come from [`le_model_load`]; `editor` must be null or come
/// from [`le_editor_new`].
#[no_mangle]
pub unsafe extern "C" fn le_model_save(
    model: *const LeModel,
    editor: *const LeEditor,
    path: *const c_char,
) -> LeStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let path = PathBuf::from(text(path, "path")?);
        let mut ckpt = model.ckpt.clone();
        if let Some(ed) = editor.as_ref() {
            ckpt.session = Some(EditSession {
                config: ed.editor.config().clone(),
                state: ed.editor.state().clone(),
            });
        }
        ckpt.save(&path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from [`le_model_load`], and not be used after.
#[no_mangle]
pub unsafe extern "C" fn le_model_free(model: *mut LeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from [`le_model_load`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn le_model_vocab_size(model: *const LeModel, out: *mut usize) -> LeStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = model.ckpt.vocab.len();
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`le_model_load`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn le_model_parameter_count(model: *const LeModel, out: *mut usize) -> LeStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = model.ckpt.params.parameter_count();
        Ok(())
    })
}

/// Sets `*out` to 1 when the model predicts every token of `answer` (and
/// the end marker) after `question`, else 0.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn le_model_exact_match(
    model: *const LeModel,
    question: *const c_char,
    answer: *const c_char,
    out: *mut i32,
) -> LeStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let inst = encode_pair(&model.ckpt.vocab, text(question, "question")?, text(answer, "answer")?, false)?;
        *out = i32::from(exact_match(&model.ckpt.params, &inst.prompt_tokens, &inst.answer_tokens)?);
        Ok(())
    })
}

/// Greedy answer to `question`, at most `max_words` words, written as a C
/// string into `buf`. `*written` receives the string length without the
/// terminator; when `buf_len` is too small the required size is still
/// reported and `BufferTooSmall` returned.
///
/// # Safety
/// `buf` must hold `buf_len` bytes (may be null when `buf_len` is 0).
#[no_mangle]
pub unsafe extern "C" fn le_model_answer(
    model: *const LeModel,
    question: *const c_char,
    max_words: usize,
    buf: *mut c_char,
    buf_len: usize,
    written: *mut usize,
) -> LeStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let written = written.as_mut().ok_or_else(|| null("written"))?;
        let vocab = &model.ckpt.vocab;
        let mut prompt = vocab.encode_text(text(question, "question")?, false)?;
        prompt.push(lifelong_edit::data::SEP);
        let limit = model.ckpt.params.config().max_seq_len;
        let room = limit.saturating_sub(prompt.len());
        let mut out = greedy_decode(&model.ckpt.params, &prompt, (max_words + 1).min(room), Some(EOA))?;
        if out.last() == Some(&EOA) {
            out.pop();
        }
        let answer = vocab.decode(&out);
        *written = answer.len();
        if buf.is_null() || buf_len <= answer.len() {
            return Err(Failure(
                LeStatus::BufferTooSmall,
                format!("answer needs {} bytes", answer.len() + 1),
            ));
        }
        ptr::copy_nonoverlapping(answer.as_ptr(), buf.cast::<u8>(), answer.len());
        *buf.add(answer.len()) = 0;
        Ok(())
    })
}

/// Starts an editing session for `model`.
///
/// `modules` is a comma list like "1.mlp_out" (null or empty: every MLP
/// projection); `ablate` is null or a comma list such as "no-norm".
///
/// # Safety
/// `model` must come from [`le_model_load`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn le_editor_new(
    model: *const LeModel,
    eta: f64,
    modules: *const c_char,
    ablate: *const c_char,
    out: *mut *mut LeEditor,
) -> LeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let mcfg = model.ckpt.params.config();
        let modules = match opt_text(modules, "modules")? {
            Some(s) if !s.trim().is_empty() => parse_module_list(s)?,
            _ => ModuleRef::all(mcfg),
        };
        let mut ablation = Ablation::default();
        if let Some(s) = opt_text(ablate, "ablate")? {
            ablation.parse_into(s)?;
        }
        let cfg = EditorConfig {
            eta,
            modules,
            eps: DEFAULT_EPS,
            ablation,
        };
        let editor = Editor::new(cfg, mcfg)?;
        *out = Box::into_raw(Box::new(LeEditor { editor }));
        Ok(())
    })
}

/// Resumes the session stored in `model`'s checkpoint.
///
/// # Safety
/// As for [`le_editor_new`].
#[no_mangle]
pub unsafe extern "C" fn le_editor_resume(model: *const LeModel, out: *mut *mut LeEditor) -> LeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let session = model
            .ckpt
            .session
            .clone()
            .ok_or_else(|| Failure(LeStatus::Checkpoint, "checkpoint has no edit session".into()))?;
        let editor = Editor::with_state(session.config, model.ckpt.params.config(), session.state)?;
        *out = Box::into_raw(Box::new(LeEditor { editor }));
        Ok(())
    })
}

/// # Safety
/// `editor` must be null or come from [`le_editor_new`]/[`le_editor_resume`].
#[no_mangle]
pub unsafe extern "C" fn le_editor_free(editor: *mut LeEditor) {
    if !editor.is_null() {
        drop(Box::from_raw(editor));
    }
}

/// Applies one turn of `n` (question, answer) edits to `model` in place.
/// On failure neither the model nor the editor changes.
///
/// # Safety
/// `questions` and `answers` must each point to `n` valid C strings.
#[no_mangle]
pub unsafe extern "C" fn le_editor_apply_turn(
    editor: *mut LeEditor,
    model: *mut LeModel,
    questions: *const *const c_char,
    answers: *const *const c_char,
    n: usize,
) -> LeStatus {
    guard(|| {
        let editor = editor.as_mut().ok_or_else(|| null("editor"))?;
        let model = model.as_mut().ok_or_else(|| null("model"))?;
        if n > 0 && (questions.is_null() || answers.is_null()) {
            return Err(null("questions/answers"));
        }
        let mut batch: Vec<EditInstance> = Vec::with_capacity(n);
        for i in 0..n {
            let q = text(*questions.add(i), "question")?;
            let a = text(*answers.add(i), "answer")?;
            batch.push(encode_pair(&model.ckpt.vocab, q, a, true)?);
        }
        let (params, _) = editor.editor.edit_turn(&model.ckpt.params, &batch)?;
        model.ckpt.params = params;
        let meta: &mut RunMeta = &mut model.ckpt.meta;
        meta.records_consumed += n as u64;
        Ok(())
    })
}

/// # Safety
/// `editor` must be valid; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn le_editor_turn_index(editor: *const LeEditor, out: *mut u64) -> LeStatus {
    guard(|| {
        let editor = editor.as_ref().ok_or_else(|| null("editor"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = editor.editor.state().turn_index;
        Ok(())
    })
}

/// Bytes of persistent engine state; constant for a given configuration.
///
/// # Safety
/// `editor` must be valid; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn le_editor_state_bytes(editor: *const LeEditor, out: *mut usize) -> LeStatus {
    guard(|| {
        let editor = editor.as_ref().ok_or_else(|| null("editor"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = editor.editor.state().byte_size();
        Ok(())
    })
}
