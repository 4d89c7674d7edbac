//! C ABI over the `cliperase` library.
//!
//! Conventions:
//! - Every fallible function returns a [`CeStatus`]. On failure a message is
//!   kept per thread and can be read with [`ce_last_error`].
//! - Handles ([`CeModel`], [`CeCorpus`]) are opaque. Free them with their
//!   `*_free` function. Passing NULL to a free function is a no-op.
//! - Strings returned by the library are released with [`ce_string_free`].
//! - Matrices are dense, row-major `double` buffers.
//! - Token matrices are row-major `uint32_t`, `max_len` columns per caption,
//!   padded with token 0.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ndarray::ArrayView2;

use cliperase::data::SplitSpec;
use cliperase::losses::{consistency_loss, contrastive_loss, forgetting_loss};
use cliperase::model::{ArchConfig, DualEncoderModel, EmbeddingMatrix, FrozenModel};
use cliperase::{
    evaluate_suite, generate_corpus, load_checkpoint, pretrain, save_checkpoint, unlearn, Corpus, CorpusConfig,
    Error, PretrainConfig, RunHistory, UnlearnConfig,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Shape = 4,
    Input = 5,
    Parse = 6,
    Version = 7,
    Corrupt = 8,
    FrozenMutation = 9,
    Divergence = 10,
    Io = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

impl From<&Error> for CeStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => CeStatus::Config,
            Error::Shape(_) => CeStatus::Shape,
            Error::Input(_) => CeStatus::Input,
            Error::Parse { .. } => CeStatus::Parse,
            Error::Version { .. } => CeStatus::Version,
            Error::Corrupt(_) => CeStatus::Corrupt,
            Error::FrozenMutation => CeStatus::FrozenMutation,
            Error::Divergence { .. } => CeStatus::Divergence,
            Error::Io { .. } => CeStatus::Io,
        }
    }
}

enum ModelKind {
    Live(Box<DualEncoderModel>),
    Frozen(FrozenModel),
}

/// A dual-encoder model. Snapshots are frozen: their parameters cannot be
/// changed and they cannot be trained.
pub struct CeModel {
    kind: ModelKind,
}

impl CeModel {
    fn model(&self) -> &DualEncoderModel {
        match &self.kind {
            ModelKind::Live(m) => m,
            ModelKind::Frozen(f) => f.model(),
        }
    }

    fn live_mut(&mut self) -> Result<&mut Box<DualEncoderModel>, Failure> {
        match &mut self.kind {
            ModelKind::Live(m) => Ok(m),
            ModelKind::Frozen(_) => Err(Error::FrozenMutation.into()),
        }
    }
}

/// A generated or loaded corpus.
pub struct CeCorpus {
    corpus: Corpus,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure {
    status: CeStatus,
    message: String,
}

impl Failure {
    fn new(status: CeStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::new(CeStatus::from(&e), e.to_string())
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|cell| *cell.borrow_mut() = c);
}

/// Runs `f`, records any error or panic, and returns its status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CeStatus::Ok
        }
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            CeStatus::Panic
        }
    }
}

fn not_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either NULL or a pointer obtained from this library
    unsafe { p.as_ref() }.ok_or_else(|| Failure::new(CeStatus::NullPointer, format!("{what} is NULL")))
}

fn not_null_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: as above, and the caller guarantees exclusive access
    unsafe { p.as_mut() }.ok_or_else(|| Failure::new(CeStatus::NullPointer, format!("{what} is NULL")))
}

fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(CeStatus::NullPointer, format!("{what} is NULL")));
    }
    // SAFETY: non-null and NUL-terminated per the API contract
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure::new(CeStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

fn json_arg<T: serde::de::DeserializeOwned + Default>(p: *const c_char, what: &str) -> Result<T, Failure> {
    match opt_str_arg(p, what)? {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| Failure::new(CeStatus::Config, format!("{what}: {e}"))),
    }
}

fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(CeStatus::NullPointer, format!("{what} is NULL")));
    }
    // SAFETY: the caller guarantees `len` readable elements
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_out<'a, T>(p: *mut T, len: usize, needed: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len < needed {
        return Err(Failure::new(
            CeStatus::BufferTooSmall,
            format!("{what} holds {len} values, {needed} needed"),
        ));
    }
    if needed == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::new(CeStatus::NullPointer, format!("{what} is NULL")));
    }
    // SAFETY: the caller guarantees `len` >= `needed` writable elements
    Ok(unsafe { std::slice::from_raw_parts_mut(p, needed) })
}

fn matrix<'a>(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<ArrayView2<'a, f64>, Failure> {
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure::new(CeStatus::Shape, format!("{what} is too large")))?;
    let data = slice_arg(p, len, what)?;
    Ok(ArrayView2::from_shape((rows, cols), data).expect("length matches shape"))
}

fn unit_matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<EmbeddingMatrix, Failure> {
    Ok(EmbeddingMatrix::new(matrix(p, rows, cols, what)?.to_owned())?)
}

fn token_rows(p: *const u32, rows: usize, max_len: usize) -> Result<Vec<Vec<u32>>, Failure> {
    if max_len == 0 && rows > 0 {
        return Err(Failure::new(CeStatus::Shape, "max_len must be positive"));
    }
    let flat = slice_arg(p, rows.saturating_mul(max_len), "tokens")?;
    Ok(flat
        .chunks(max_len.max(1))
        .map(|row| {
            let end = row.iter().rposition(|&t| t != 0).map_or(0, |i| i + 1);
            row[..end].to_vec()
        })
        .collect())
}

fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(CeStatus::NullPointer, format!("{what} is NULL")));
    }
    // SAFETY: non-null, caller-provided out parameter
    unsafe { out.write(value) };
    Ok(())
}

fn new_model(out: *mut *mut CeModel, kind: ModelKind) -> Result<(), Failure> {
    write_out(out, Box::into_raw(Box::new(CeModel { kind })), "out")
}

fn new_corpus(out: *mut *mut CeCorpus, corpus: Corpus) -> Result<(), Failure> {
    write_out(out, Box::into_raw(Box::new(CeCorpus { corpus })), "out")
}

fn new_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure::new(CeStatus::Corrupt, "string contains NUL"))?;
    write_out(out, c.into_raw(), "out")
}

/// Message of the last failed call on this thread, or "" after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn ce_last_error() -> *const c_char {
    LAST_ERROR.with(|cell| cell.borrow().as_ptr())
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ce_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a freshly initialized model. `arch_json` may be NULL for the
/// default architecture; missing keys take default values.
///
/// # Safety
/// `arch_json` must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ce_model_init(arch_json: *const c_char, seed: u64, out: *mut *mut CeModel) -> CeStatus {
    guard(|| {
        let arch: ArchConfig = json_arg(arch_json, "arch_json")?;
        new_model(out, ModelKind::Live(Box::new(DualEncoderModel::init(&arch, seed)?)))
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ce_model_load(path: *const c_char, out: *mut *mut CeModel) -> CeStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let (model, _) = load_checkpoint(&path)?;
        new_model(out, ModelKind::Live(Box::new(model)))
    })
}

/// Writes a checkpoint with an empty run history.
///
/// # Safety
/// `model` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ce_model_save(model: *const CeModel, path: *const c_char) -> CeStatus {
    guard(|| {
        let model = not_null(model, "model")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        Ok(save_checkpoint(model.model(), &RunHistory::default(), &path)?)
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ce_model_free(model: *mut CeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Frozen copy of `model`. Later changes to `model` do not affect it.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ce_model_snapshot(model: *const CeModel, out: *mut *mut CeModel) -> CeStatus {
    guard(|| {
        let model = not_null(model, "model")?;
        new_model(out, ModelKind::Frozen(model.model().snapshot()))
    })
}

/// 1 for snapshots, 0 for trainable models and NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ce_model_is_frozen(model: *const CeModel) -> i32 {
    model
        .as_ref()
        .map_or(0, |m| matches!(m.kind, ModelKind::Frozen(_)) as i32)
}

/// Sizes needed to size caller buffers.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CeModelInfo {
    pub num_params: usize,
    pub d_img: usize,
    pub d_emb: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ce_model_info(model: *const CeModel, out: *mut CeModelInfo) -> CeStatus {
    guard(|| {
        let m = not_null(model, "model")?.model();
        let arch = m.arch();
        write_out(
            out,
            CeModelInfo {
                num_params: m.num_params(),
                d_img: arch.d_img,
                d_emb: arch.d_emb,
                max_len: arch.max_len,
                vocab_size: arch.vocab_size,
            },
            "out",
        )
    })
}

/// Copies the flat parameter vector into `out` (`len` >= `num_params`).
///
/// # Safety
/// `model` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ce_model_get_params(model: *const CeModel, out: *mut f64, len: usize) -> CeStatus {
    guard(|| {
        let flat = not_null(model, "model")?.model().flat_params();
        slice_out(out, len, flat.len(), "out")?.copy_from_slice(&flat);
        Ok(())
    })
}

/// Replaces all parameters. Fails with `FrozenMutation` on snapshots.
///
/// # Safety
/// `model` must be a live handle; `values` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ce_model_set_params(model: *mut CeModel, values: *const f64, len: usize) -> CeStatus {
    guard(|| {
        let model = not_null_mut(model, "model")?;
        let values = slice_arg(values, len, "values")?;
        Ok(model.live_mut()?.set_flat_params(values)?)
    })
}

/// Embeds `n` images of `d_img` features into `out` (`n × d_emb`).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ce_encode_image(
    model: *const CeModel,
    images: *const f64,
    n: usize,
    d_img: usize,
    out: *mut f64,
    out_len: usize,
) -> CeStatus {
    guard(|| {
        let m = not_null(model, "model")?.model();
        let emb = m.encode_image(matrix(images, n, d_img, "images")?)?;
        let flat = emb.view();
        slice_out(out, out_len, flat.len(), "out")?.copy_from_slice(flat.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Embeds `n` captions (`max_len` tokens each, 0-padded) into `out`
/// (`n × d_emb`).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ce_encode_text(
    model: *const CeModel,
    tokens: *const u32,
    n: usize,
    max_len: usize,
    out: *mut f64,
    out_len: usize,
) -> CeStatus {
    guard(|| {
        let m = not_null(model, "model")?.model();
        let emb = m.encode_text(&token_rows(tokens, n, max_len)?)?;
        let flat = emb.view();
        slice_out(out, out_len, flat.len(), "out")?.copy_from_slice(flat.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Image-to-text InfoNCE over `n` matched pairs of unit-norm rows.
///
/// # Safety
/// `img` and `txt` must hold `n × d` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ce_contrastive_loss(
    img: *const f64,
    txt: *const f64,
    n: usize,
    d: usize,
    tau: f64,
    out: *mut f64,
) -> CeStatus {
    guard(|| {
        let img = unit_matrix(img, n, d, "img")?;
        let txt = unit_matrix(txt, n, d, "txt")?;
        write_out(out, contrastive_loss(&img, &txt, tau)?, "out")
    })
}

/// Mean matched-pair similarity over `n` unit-norm rows.
///
/// # Safety
/// `img` and `txt` must hold `n × d` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ce_forgetting_loss(
    img: *const f64,
    txt: *const f64,
    n: usize,
    d: usize,
    out: *mut f64,
) -> CeStatus {
    guard(|| {
        let img = unit_matrix(img, n, d, "img")?;
        let txt = unit_matrix(txt, n, d, "txt")?;
        write_out(out, forgetting_loss(&img, &txt)?, "out")
    })
}

/// KL consistency of `current` against the snapshot `original` on a batch.
///
/// # Safety
/// `original` must be a snapshot handle, `current` any model handle; the
/// buffers must hold `n × d_img` doubles and `n × max_len` tokens.
#[no_mangle]
pub unsafe extern "C" fn ce_consistency_loss(
    original: *const CeModel,
    current: *const CeModel,
    images: *const f64,
    tokens: *const u32,
    n: usize,
    d_img: usize,
    max_len: usize,
    out: *mut f64,
) -> CeStatus {
    guard(|| {
        let orig = match &not_null(original, "original")?.kind {
            ModelKind::Frozen(f) => f.clone(),
            ModelKind::Live(_) => {
                return Err(Failure::new(CeStatus::Input, "original must be a snapshot (ce_model_snapshot)"))
            }
        };
        let current = not_null(current, "current")?.model();
        let images = matrix(images, n, d_img, "images")?;
        let texts = token_rows(tokens, n, max_len)?;
        write_out(out, consistency_loss(&orig, current, images, &texts)?, "out")
    })
}

/// Generates a synthetic corpus; `config_json` may be NULL for defaults.
///
/// # Safety
/// `config_json` must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ce_corpus_generate(config_json: *const c_char, out: *mut *mut CeCorpus) -> CeStatus {
    guard(|| {
        let cfg: CorpusConfig = json_arg(config_json, "config_json")?;
        new_corpus(out, generate_corpus(&cfg)?)
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ce_corpus_load(path: *const c_char, out: *mut *mut CeCorpus) -> CeStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        new_corpus(out, Corpus::load(&path)?)
    })
}

/// # Safety
/// `corpus` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ce_corpus_save(corpus: *const CeCorpus, path: *const c_char) -> CeStatus {
    guard(|| {
        let corpus = not_null(corpus, "corpus")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        Ok(corpus.corpus.save(&path)?)
    })
}

/// Number of samples, or 0 for NULL.
///
/// # Safety
/// `corpus` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ce_corpus_len(corpus: *const CeCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.corpus.len())
}

/// # Safety
/// `corpus` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ce_corpus_free(corpus: *mut CeCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Contrastively pretrains `model` in place. `config_json` may be NULL.
///
/// # Safety
/// `model` must be a live, non-frozen handle; `corpus` a live handle.
#[no_mangle]
pub unsafe extern "C" fn ce_pretrain(
    model: *mut CeModel,
    corpus: *const CeCorpus,
    config_json: *const c_char,
) -> CeStatus {
    guard(|| {
        let cfg: PretrainConfig = json_arg(config_json, "config_json")?;
        let corpus = &not_null(corpus, "corpus")?.corpus;
        let live = not_null_mut(model, "model")?.live_mut()?;
        let (trained, _) = pretrain((**live).clone(), corpus, &cfg)?;
        **live = trained;
        Ok(())
    })
}

/// Unlearns the forget set named by `split` (`class:1,2`, `keyword:car` or
/// `fraction:0.3`) and returns a new model; `model` is left unchanged.
/// `split_seed` picks the classes of fraction splits.
///
/// # Safety
/// Handles must be live; strings NUL-terminated (`config_json` may be NULL).
#[no_mangle]
pub unsafe extern "C" fn ce_unlearn(
    model: *const CeModel,
    corpus: *const CeCorpus,
    split: *const c_char,
    split_seed: u64,
    config_json: *const c_char,
    out: *mut *mut CeModel,
) -> CeStatus {
    guard(|| {
        let cfg: UnlearnConfig = json_arg(config_json, "config_json")?;
        let m = not_null(model, "model")?.model();
        let corpus = &not_null(corpus, "corpus")?.corpus;
        let spec: SplitSpec = str_arg(split, "split")?.parse()?;
        let (unlearned, _) = unlearn(m, &spec.apply(corpus, split_seed)?, &cfg)?;
        new_model(out, ModelKind::Live(Box::new(unlearned)))
    })
}

/// Forget/retain metrics report as a JSON string (free with
/// [`ce_string_free`]).
///
/// # Safety
/// Handles must be live; `split` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ce_evaluate(
    model: *const CeModel,
    corpus: *const CeCorpus,
    split: *const c_char,
    split_seed: u64,
    out: *mut *mut c_char,
) -> CeStatus {
    guard(|| {
        let m = not_null(model, "model")?.model();
        let corpus = &not_null(corpus, "corpus")?.corpus;
        let spec: SplitSpec = str_arg(split, "split")?.parse()?;
        let report = evaluate_suite(m, &spec.apply(corpus, split_seed)?, &corpus.class_prompts())?;
        new_string(out, report.to_json())
    })
}
