#ifndef THEMATIC_H
#define THEMATIC_H

/* Generated by cbindgen from thematic-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible FFI call.
 */
typedef enum TaStatus {
  TA_STATUS_OK = 0,
  TA_STATUS_NULL_ARGUMENT = 1,
  TA_STATUS_INVALID_UTF8 = 2,
  TA_STATUS_IO_ERROR = 3,
  TA_STATUS_PARSE_ERROR = 4,
  TA_STATUS_INVALID_ARGUMENT = 5,
} TaStatus;

/**
 * Opaque ordered chunk list handle.
 */
typedef struct TaChunkList TaChunkList;

/**
 * Opaque binary-mask handle.
 */
typedef struct TaMask TaMask;

/**
 * Opaque similarity-matrix handle (row-major, rows = human themes).
 */
typedef struct TaMatrix TaMatrix;

/**
 * Opaque transcript handle.
 */
typedef struct TaTranscript TaTranscript;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread, or NULL when the last
 * call succeeded. The pointer stays valid until the next failing call on
 * the same thread; do not free it.
 */
const char *ta_last_error_message(void);

/**
 * Crate version as a static string; do not free.
 */
const char *ta_version(void);

/**
 * Number of whitespace-separated words in `text`; -1 on error.
 *
 * # Safety
 * `text` must be NULL or a valid NUL-terminated string.
 */
int64_t ta_word_count(const char *text);

/**
 * Load a transcript file (JSON Lines or `SPEAKER: text` plain text).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer. On success `*out` owns the transcript; free it with
 * [`ta_transcript_free`].
 */
enum TaStatus ta_transcript_load(const char *path, struct TaTranscript **out);

/**
 * # Safety
 * `t` must be NULL or a pointer returned by [`ta_transcript_load`] that has
 * not been freed.
 */
void ta_transcript_free(struct TaTranscript *t);

/**
 * # Safety
 * `t` must be a valid transcript handle.
 */
uint64_t ta_transcript_turn_count(const struct TaTranscript *t);

/**
 * # Safety
 * `t` must be a valid transcript handle.
 */
uint64_t ta_transcript_word_total(const struct TaTranscript *t);

/**
 * Split a transcript into chunks of at most `max_words` whole-turn words.
 *
 * # Safety
 * `t` must be a valid transcript handle and `out` a valid pointer. On
 * success `*out` owns the list; free it with [`ta_chunk_list_free`].
 */
enum TaStatus ta_chunk_transcript(const struct TaTranscript *t,
                                  uint64_t max_words,
                                  struct TaChunkList **out);

/**
 * # Safety
 * `list` must be NULL or an unfreed pointer from [`ta_chunk_transcript`].
 */
void ta_chunk_list_free(struct TaChunkList *list);

/**
 * # Safety
 * `list` must be a valid chunk-list handle.
 */
uint64_t ta_chunk_list_len(const struct TaChunkList *list);

/**
 * Word count of chunk `index`, or -1 when out of range.
 *
 * # Safety
 * `list` must be a valid chunk-list handle.
 */
int64_t ta_chunk_word_count(const struct TaChunkList *list, uint64_t index);

/**
 * 1 when chunk `index` is a fragment of a split oversize turn, 0 otherwise,
 * -1 when out of range.
 *
 * # Safety
 * `list` must be a valid chunk-list handle.
 */
int32_t ta_chunk_is_continuation(const struct TaChunkList *list, uint64_t index);

/**
 * 1 when chunk `index` exceeds the word budget (indivisible sentence),
 * 0 otherwise, -1 when out of range.
 *
 * # Safety
 * `list` must be a valid chunk-list handle.
 */
int32_t ta_chunk_is_oversize(const struct TaChunkList *list, uint64_t index);

/**
 * Dialogue text of chunk `index` as a newly allocated string; free it with
 * [`ta_string_free`]. NULL when out of range.
 *
 * # Safety
 * `list` must be a valid chunk-list handle.
 */
char *ta_chunk_text(const struct TaChunkList *list, uint64_t index);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void ta_string_free(char *s);

/**
 * Build an n×m similarity matrix from a row-major buffer of `rows * cols`
 * doubles.
 *
 * # Safety
 * `values` must point to at least `rows * cols` readable doubles; `out`
 * must be valid. On success `*out` owns the matrix; free it with
 * [`ta_matrix_free`].
 */
enum TaStatus ta_matrix_new(uint64_t rows,
                            uint64_t cols,
                            const double *values,
                            struct TaMatrix **out);

/**
 * # Safety
 * `m` must be NULL or an unfreed pointer from [`ta_matrix_new`].
 */
void ta_matrix_free(struct TaMatrix *m);

/**
 * Threshold the matrix into a binary mask (score ≥ theta counts as similar).
 *
 * # Safety
 * `m` must be a valid matrix handle and `out` a valid pointer. On success
 * `*out` owns the mask; free it with [`ta_mask_free`].
 */
enum TaStatus ta_matrix_binarize(const struct TaMatrix *m, double theta, struct TaMask **out);

/**
 * # Safety
 * `mask` must be NULL or an unfreed pointer from [`ta_matrix_binarize`].
 */
void ta_mask_free(struct TaMask *mask);

/**
 * Fraction of cells set in the mask (|S| / (n×m)); NaN on null.
 *
 * # Safety
 * `mask` must be a valid mask handle.
 */
double ta_mask_jaccard(const struct TaMask *mask);

/**
 * Fraction of rows with at least one set cell; NaN on null.
 *
 * # Safety
 * `mask` must be a valid mask handle.
 */
double ta_mask_hit_rate(const struct TaMask *mask);

/**
 * Jaccard and hit rate at each threshold of `grid`, written into the
 * caller-provided `out_jaccard` / `out_hit_rate` arrays of length
 * `grid_len`.
 *
 * # Safety
 * `m` must be a valid matrix handle; `grid`, `out_jaccard` and
 * `out_hit_rate` must point to at least `grid_len` readable/writable
 * doubles.
 */
enum TaStatus ta_matrix_sweep(const struct TaMatrix *m,
                              const double *grid,
                              uint64_t grid_len,
                              double *out_jaccard,
                              double *out_hit_rate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* THEMATIC_H */
