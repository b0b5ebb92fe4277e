#ifndef LIFELONG_EDIT_H
#define LIFELONG_EDIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum LeStatus {
  LE_STATUS_OK = 0,
  LE_STATUS_NULL_POINTER = 1,
  LE_STATUS_INVALID_UTF8 = 2,
  LE_STATUS_IO = 3,
  LE_STATUS_CHECKPOINT = 4,
  LE_STATUS_CONFIG = 5,
  LE_STATUS_ENCODING = 6,
  LE_STATUS_SHAPE = 7,
  LE_STATUS_NUMERICAL = 8,
  LE_STATUS_BUFFER_TOO_SMALL = 9,
  LE_STATUS_OTHER = 10,
  LE_STATUS_PANIC = 11,
} LeStatus;

/**
 * An editing session bound to one model configuration.
 */
typedef struct LeEditor LeEditor;

/**
 * A model checkpoint: parameters, vocabulary and run metadata.
 */
typedef struct LeModel LeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread ("" after a success).
 * The pointer stays valid until the next call into this library.
 */
const char *le_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum LeStatus le_model_load(const char *path, struct LeModel **out);

/**
 * Writes the model, plus the editor's session when `editor` is non-null.
 *
 * # Safety
 * `model` must come from [`le_model_load`]; `editor` must be null or come
 * from [`le_editor_new`].
 */
enum LeStatus le_model_save(const struct LeModel *model,
                            const struct LeEditor *editor,
                            const char *path);

/**
 * # Safety
 * `model` must be null or come from [`le_model_load`], and not be used after.
 */
void le_model_free(struct LeModel *model);

/**
 * # Safety
 * `model` must come from [`le_model_load`]; `out` must be valid.
 */
enum LeStatus le_model_vocab_size(const struct LeModel *model, size_t *out);

/**
 * # Safety
 * `model` must come from [`le_model_load`]; `out` must be valid.
 */
enum LeStatus le_model_parameter_count(const struct LeModel *model, size_t *out);

/**
 * Sets `*out` to 1 when the model predicts every token of `answer` (and
 * the end marker) after `question`, else 0.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum LeStatus le_model_exact_match(const struct LeModel *model,
                                   const char *question,
                                   const char *answer,
                                   int32_t *out);

/**
 * Greedy answer to `question`, at most `max_words` words, written as a C
 * string into `buf`. `*written` receives the string length without the
 * terminator; when `buf_len` is too small the required size is still
 * reported and `BufferTooSmall` returned.
 *
 * # Safety
 * `buf` must hold `buf_len` bytes (may be null when `buf_len` is 0).
 */
enum LeStatus le_model_answer(const struct LeModel *model,
                              const char *question,
                              size_t max_words,
                              char *buf,
                              size_t buf_len,
                              size_t *written);

/**
 * Starts an editing session for `model`.
 *
 * `modules` is a comma list like "1.mlp_out" (null or empty: every MLP
 * projection); `ablate` is null or a comma list such as "no-norm".
 *
 * # Safety
 * `model` must come from [`le_model_load`]; `out` must be valid.
 */
enum LeStatus le_editor_new(const struct LeModel *model,
                            double eta,
                            const char *modules,
                            const char *ablate,
                            struct LeEditor **out);

/**
 * Resumes the session stored in `model`'s checkpoint.
 *
 * # Safety
 * As for [`le_editor_new`].
 */
enum LeStatus le_editor_resume(const struct LeModel *model, struct LeEditor **out);

/**
 * # Safety
 * `editor` must be null or come from [`le_editor_new`]/[`le_editor_resume`].
 */
void le_editor_free(struct LeEditor *editor);

/**
 * Applies one turn of `n` (question, answer) edits to `model` in place.
 * On failure neither the model nor the editor changes.
 *
 * # Safety
 * `questions` and `answers` must each point to `n` valid C strings.
 */
enum LeStatus le_editor_apply_turn(struct LeEditor *editor,
                                   struct LeModel *model,
                                   const char *const *questions,
                                   const char *const *answers,
                                   size_t n);

/**
 * # Safety
 * `editor` must be valid; `out` must be valid.
 */
enum LeStatus le_editor_turn_index(const struct LeEditor *editor, uint64_t *out);

/**
 * Bytes of persistent engine state; constant for a given configuration.
 *
 * # Safety
 * `editor` must be valid; `out` must be valid.
 */
enum LeStatus le_editor_state_bytes(const struct LeEditor *editor, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIFELONG_EDIT_H */
