//! C ABI over the deterministic kernels of `thematic-core`: transcript
//! loading, conversation-preserving chunking, and the threshold/Jaccard/
//! hit-rate metrics. Handles are opaque; every fallible call returns a
//! [`TaStatus`] and stores a message retrievable via
//! [`ta_last_error_message`].
//!
//! The header is generated by cbindgen at build time into
//! `include/thematic.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use thematic_core::corpus::{chunk_transcript, load_transcript, word_count, Chunk, Transcript};
use thematic_core::evaluation::{binarize, hit_rate, jaccard, BinaryMatrix, SimilarityMatrix};

/// Status code returned by every fallible FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    IoError = 3,
    ParseError = 4,
    InvalidArgument = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message).unwrap_or_else(|_| CString::new("error").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Message for the most recent error on this thread, or NULL when the last
/// call succeeded. The pointer stays valid until the next failing call on
/// the same thread; do not free it.
#[no_mangle]
pub extern "C" fn ta_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(ptr::null(), |c| c.as_ptr())
    })
}

/// Opaque transcript handle.
pub struct TaTranscript(Transcript);

/// Opaque ordered chunk list handle.
pub struct TaChunkList(Vec<Chunk>);

/// Opaque similarity-matrix handle (row-major, rows = human themes).
pub struct TaMatrix(SimilarityMatrix);

/// Opaque binary-mask handle.
pub struct TaMask(BinaryMatrix);

/// Crate version as a static string; do not free.
#[no_mangle]
pub extern "C" fn ta_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, TaStatus> {
    if ptr.is_null() {
        set_error("null string argument".to_string());
        return Err(TaStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|e| {
        set_error(format!("invalid UTF-8: {e}"));
        TaStatus::InvalidUtf8
    })
}

/// Number of whitespace-separated words in `text`; -1 on error.
///
/// # Safety
/// `text` must be NULL or a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ta_word_count(text: *const c_char) -> i64 {
    match cstr(text) {
        Ok(s) => word_count(s) as i64,
        Err(_) => -1,
    }
}

/// Load a transcript file (JSON Lines or `SPEAKER: text` plain text).
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer. On success `*out` owns the transcript; free it with
/// [`ta_transcript_free`].
#[no_mangle]
pub unsafe extern "C" fn ta_transcript_load(
    path: *const c_char,
    out: *mut *mut TaTranscript,
) -> TaStatus {
    if out.is_null() {
        set_error("null output pointer".to_string());
        return TaStatus::NullArgument;
    }
    *out = ptr::null_mut();
    let path = match cstr(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match load_transcript(Path::new(path)) {
        Ok(t) => {
            *out = Box::into_raw(Box::new(TaTranscript(t)));
            TaStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            match e {
                thematic_core::corpus::CorpusError::Io { .. } => TaStatus::IoError,
                _ => TaStatus::ParseError,
            }
        }
    }
}

/// # Safety
/// `t` must be NULL or a pointer returned by [`ta_transcript_load`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn ta_transcript_free(t: *mut TaTranscript) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// # Safety
/// `t` must be a valid transcript handle.
#[no_mangle]
pub unsafe extern "C" fn ta_transcript_turn_count(t: *const TaTranscript) -> u64 {
    t.as_ref().map_or(0, |t| t.0.turns.len() as u64)
}

/// # Safety
/// `t` must be a valid transcript handle.
#[no_mangle]
pub unsafe extern "C" fn ta_transcript_word_total(t: *const TaTranscript) -> u64 {
    t.as_ref().map_or(0, |t| t.0.word_total as u64)
}

/// Split a transcript into chunks of at most `max_words` whole-turn words.
///
/// # Safety
/// `t` must be a valid transcript handle and `out` a valid pointer. On
/// success `*out` owns the list; free it with [`ta_chunk_list_free`].
#[no_mangle]
pub unsafe extern "C" fn ta_chunk_transcript(
    t: *const TaTranscript,
    max_words: u64,
    out: *mut *mut TaChunkList,
) -> TaStatus {
    if t.is_null() || out.is_null() {
        set_error("null argument".to_string());
        return TaStatus::NullArgument;
    }
    *out = ptr::null_mut();
    if max_words == 0 {
        set_error("max_words must be at least 1".to_string());
        return TaStatus::InvalidArgument;
    }
    let chunks = chunk_transcript(&(*t).0, max_words as usize);
    *out = Box::into_raw(Box::new(TaChunkList(chunks)));
    TaStatus::Ok
}

/// # Safety
/// `list` must be NULL or an unfreed pointer from [`ta_chunk_transcript`].
#[no_mangle]
pub unsafe extern "C" fn ta_chunk_list_free(list: *mut TaChunkList) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}

/// # Safety
/// `list` must be a valid chunk-list handle.
#[no_mangle]
pub unsafe extern "C" fn ta_chunk_list_len(list: *const TaChunkList) -> u64 {
    list.as_ref().map_or(0, |l| l.0.len() as u64)
}

/// Word count of chunk `index`, or -1 when out of range.
///
/// # Safety
/// `list` must be a valid chunk-list handle.
#[no_mangle]
pub unsafe extern "C" fn ta_chunk_word_count(list: *const TaChunkList, index: u64) -> i64 {
    list.as_ref()
        .and_then(|l| l.0.get(index as usize))
        .map_or(-1, |c| c.word_count as i64)
}

/// 1 when chunk `index` is a fragment of a split oversize turn, 0 otherwise,
/// -1 when out of range.
///
/// # Safety
/// `list` must be a valid chunk-list handle.
#[no_mangle]
pub unsafe extern "C" fn ta_chunk_is_continuation(list: *const TaChunkList, index: u64) -> i32 {
    list.as_ref()
        .and_then(|l| l.0.get(index as usize))
        .map_or(-1, |c| i32::from(c.continuation))
}

/// 1 when chunk `index` exceeds the word budget (indivisible sentence),
/// 0 otherwise, -1 when out of range.
///
/// # Safety
/// `list` must be a valid chunk-list handle.
#[no_mangle]
pub unsafe extern "C" fn ta_chunk_is_oversize(list: *const TaChunkList, index: u64) -> i32 {
    list.as_ref()
        .and_then(|l| l.0.get(index as usize))
        .map_or(-1, |c| i32::from(c.oversize))
}

/// Dialogue text of chunk `index` as a newly allocated string; free it with
/// [`ta_string_free`]. NULL when out of range.
///
/// # Safety
/// `list` must be a valid chunk-list handle.
#[no_mangle]
pub unsafe extern "C" fn ta_chunk_text(list: *const TaChunkList, index: u64) -> *mut c_char {
    let Some(chunk) = list.as_ref().and_then(|l| l.0.get(index as usize)) else {
        return ptr::null_mut();
    };
    CString::new(chunk.dialogue_text())
        .map_or(ptr::null_mut(), CString::into_raw)
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ta_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Build an n×m similarity matrix from a row-major buffer of `rows * cols`
/// doubles.
///
/// # Safety
/// `values` must point to at least `rows * cols` readable doubles; `out`
/// must be valid. On success `*out` owns the matrix; free it with
/// [`ta_matrix_free`].
#[no_mangle]
pub unsafe extern "C" fn ta_matrix_new(
    rows: u64,
    cols: u64,
    values: *const f64,
    out: *mut *mut TaMatrix,
) -> TaStatus {
    if values.is_null() || out.is_null() {
        set_error("null argument".to_string());
        return TaStatus::NullArgument;
    }
    *out = ptr::null_mut();
    if rows == 0 || cols == 0 {
        set_error("matrix dimensions must be positive".to_string());
        return TaStatus::InvalidArgument;
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let flat = std::slice::from_raw_parts(values, rows * cols);
    if flat.iter().any(|v| !v.is_finite()) {
        set_error("matrix entries must be finite".to_string());
        return TaStatus::InvalidArgument;
    }
    let scores: Vec<Vec<f64>> = flat.chunks(cols).map(<[f64]>::to_vec).collect();
    let matrix = SimilarityMatrix {
        human_labels: (0..rows).map(|i| format!("h{i}")).collect(),
        llm_labels: (0..cols).map(|j| format!("l{j}")).collect(),
        scores,
        scorer_id: "ffi".to_string(),
        threshold: 0.5,
    };
    *out = Box::into_raw(Box::new(TaMatrix(matrix)));
    TaStatus::Ok
}

/// # Safety
/// `m` must be NULL or an unfreed pointer from [`ta_matrix_new`].
#[no_mangle]
pub unsafe extern "C" fn ta_matrix_free(m: *mut TaMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Threshold the matrix into a binary mask (score ≥ theta counts as similar).
///
/// # Safety
/// `m` must be a valid matrix handle and `out` a valid pointer. On success
/// `*out` owns the mask; free it with [`ta_mask_free`].
#[no_mangle]
pub unsafe extern "C" fn ta_matrix_binarize(
    m: *const TaMatrix,
    theta: f64,
    out: *mut *mut TaMask,
) -> TaStatus {
    if m.is_null() || out.is_null() {
        set_error("null argument".to_string());
        return TaStatus::NullArgument;
    }
    *out = ptr::null_mut();
    if !theta.is_finite() {
        set_error("theta must be finite".to_string());
        return TaStatus::InvalidArgument;
    }
    *out = Box::into_raw(Box::new(TaMask(binarize(&(*m).0, theta))));
    TaStatus::Ok
}

/// # Safety
/// `mask` must be NULL or an unfreed pointer from [`ta_matrix_binarize`].
#[no_mangle]
pub unsafe extern "C" fn ta_mask_free(mask: *mut TaMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Fraction of cells set in the mask (|S| / (n×m)); NaN on null.
///
/// # Safety
/// `mask` must be a valid mask handle.
#[no_mangle]
pub unsafe extern "C" fn ta_mask_jaccard(mask: *const TaMask) -> f64 {
    mask.as_ref().map_or(f64::NAN, |m| jaccard(&m.0))
}

/// Fraction of rows with at least one set cell; NaN on null.
///
/// # Safety
/// `mask` must be a valid mask handle.
#[no_mangle]
pub unsafe extern "C" fn ta_mask_hit_rate(mask: *const TaMask) -> f64 {
    mask.as_ref().map_or(f64::NAN, |m| hit_rate(&m.0))
}

/// Jaccard and hit rate at each threshold of `grid`, written into the
/// caller-provided `out_jaccard` / `out_hit_rate` arrays of length
/// `grid_len`.
///
/// # Safety
/// `m` must be a valid matrix handle; `grid`, `out_jaccard` and
/// `out_hit_rate` must point to at least `grid_len` readable/writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn ta_matrix_sweep(
    m: *const TaMatrix,
    grid: *const f64,
    grid_len: u64,
    out_jaccard: *mut f64,
    out_hit_rate: *mut f64,
) -> TaStatus {
    if m.is_null() || grid.is_null() || out_jaccard.is_null() || out_hit_rate.is_null() {
        set_error("null argument".to_string());
        return TaStatus::NullArgument;
    }
    let grid = std::slice::from_raw_parts(grid, grid_len as usize);
    if grid.is_empty() || grid.windows(2).any(|w| w[0] > w[1]) {
        set_error("grid must be non-empty and ascending".to_string());
        return TaStatus::InvalidArgument;
    }
    for (i, &theta) in grid.iter().enumerate() {
        let mask = binarize(&(*m).0, theta);
        *out_jaccard.add(i) = jaccard(&mask);
        *out_hit_rate.add(i) = hit_rate(&mask);
    }
    TaStatus::Ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;
    use std::io::Write;

    #[test]
    fn word_count_over_ffi() {
        let text = CString::new("my child's heart").unwrap();
        assert_eq!(unsafe { ta_word_count(text.as_ptr()) }, 3);
        assert_eq!(unsafe { ta_word_count(ptr::null()) }, -1);
        assert!(!ta_last_error_message().is_null());
    }

    #[test]
    fn transcript_load_and_chunk_roundtrip() {
        let mut f = tempfile::NamedTempFile::with_suffix(".jsonl").unwrap();
        for i in 0..6 {
            writeln!(
                f,
                r#"{{"speaker": "P1", "text": "turn {i} says a handful of words here"}}"#
            )
            .unwrap();
        }
        let path = CString::new(f.path().to_str().unwrap()).unwrap();
        let mut transcript: *mut TaTranscript = ptr::null_mut();
        assert_eq!(
            unsafe { ta_transcript_load(path.as_ptr(), &mut transcript) },
            TaStatus::Ok
        );
        assert_eq!(unsafe { ta_transcript_turn_count(transcript) }, 6);
        assert_eq!(unsafe { ta_transcript_word_total(transcript) }, 48);

        let mut list: *mut TaChunkList = ptr::null_mut();
        assert_eq!(
            unsafe { ta_chunk_transcript(transcript, 16, &mut list) },
            TaStatus::Ok
        );
        let n = unsafe { ta_chunk_list_len(list) };
        assert_eq!(n, 3, "6 turns of 8 words at a 16-word budget");
        let mut total = 0;
        for i in 0..n {
            let wc = unsafe { ta_chunk_word_count(list, i) };
            assert!(wc > 0 && wc <= 16);
            total += wc;
            assert_eq!(unsafe { ta_chunk_is_continuation(list, i) }, 0);
            let text = unsafe { ta_chunk_text(list, i) };
            assert!(!text.is_null());
            unsafe { ta_string_free(text) };
        }
        assert_eq!(total, 48);
        unsafe {
            ta_chunk_list_free(list);
            ta_transcript_free(transcript);
        }
    }

    #[test]
    fn missing_file_reports_io_error() {
        let path = CString::new("/nonexistent/file.jsonl").unwrap();
        let mut transcript: *mut TaTranscript = ptr::null_mut();
        let status = unsafe { ta_transcript_load(path.as_ptr(), &mut transcript) };
        assert_eq!(status, TaStatus::IoError);
        assert!(transcript.is_null());
        let msg = unsafe { CStr::from_ptr(ta_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("cannot read"));
    }

    #[test]
    fn matrix_metrics_over_ffi() {
        let values = [0.6, 0.5, 0.56, 0.9];
        let mut matrix: *mut TaMatrix = ptr::null_mut();
        assert_eq!(
            unsafe { ta_matrix_new(2, 2, values.as_ptr(), &mut matrix) },
            TaStatus::Ok
        );
        let mut mask: *mut TaMask = ptr::null_mut();
        assert_eq!(
            unsafe { ta_matrix_binarize(matrix, 0.56, &mut mask) },
            TaStatus::Ok
        );
        assert!((unsafe { ta_mask_jaccard(mask) } - 0.75).abs() < 1e-12);
        assert_eq!(unsafe { ta_mask_hit_rate(mask) }, 1.0);

        let grid = [0.0, 0.56, 0.9];
        let mut jac = [0.0; 3];
        let mut hit = [0.0; 3];
        assert_eq!(
            unsafe {
                ta_matrix_sweep(matrix, grid.as_ptr(), 3, jac.as_mut_ptr(), hit.as_mut_ptr())
            },
            TaStatus::Ok
        );
        assert_eq!(jac[0], 1.0);
        assert!((jac[1] - 0.75).abs() < 1e-12);
        assert!((jac[2] - 0.25).abs() < 1e-12);
        assert_eq!(hit[2], 0.5);

        unsafe {
            ta_mask_free(mask);
            ta_matrix_free(matrix);
        }
    }

    #[test]
    fn invalid_arguments_are_rejected() {
        let mut matrix: *mut TaMatrix = ptr::null_mut();
        let status = unsafe { ta_matrix_new(0, 2, [0.0].as_ptr(), &mut matrix) };
        assert_eq!(status, TaStatus::InvalidArgument);
        let nan = [f64::NAN];
        assert_eq!(
            unsafe { ta_matrix_new(1, 1, nan.as_ptr(), &mut matrix) },
            TaStatus::InvalidArgument
        );
    }
}
