#ifndef CLIPERASE_H
#define CLIPERASE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CeStatus {
  CE_STATUS_OK = 0,
  CE_STATUS_NULL_POINTER = 1,
  CE_STATUS_INVALID_UTF8 = 2,
  CE_STATUS_CONFIG = 3,
  CE_STATUS_SHAPE = 4,
  CE_STATUS_INPUT = 5,
  CE_STATUS_PARSE = 6,
  CE_STATUS_VERSION = 7,
  CE_STATUS_CORRUPT = 8,
  CE_STATUS_FROZEN_MUTATION = 9,
  CE_STATUS_DIVERGENCE = 10,
  CE_STATUS_IO = 11,
  CE_STATUS_BUFFER_TOO_SMALL = 12,
  CE_STATUS_PANIC = 13,
} CeStatus;

/**
 * A generated or loaded corpus.
 */
typedef struct CeCorpus CeCorpus;

/**
 * A dual-encoder model. Snapshots are frozen: their parameters cannot be
 * changed and they cannot be trained.
 */
typedef struct CeModel CeModel;

/**
 * Sizes needed to size caller buffers.
 */
typedef struct CeModelInfo {
  size_t num_params;
  size_t d_img;
  size_t d_emb;
  size_t max_len;
  size_t vocab_size;
} CeModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or "" after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *ce_last_error(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void ce_string_free(char *s);

/**
 * Creates a freshly initialized model. `arch_json` may be NULL for the
 * default architecture; missing keys take default values.
 *
 * # Safety
 * `arch_json` must be NULL or NUL-terminated; `out` must be writable.
 */
enum CeStatus ce_model_init(const char *arch_json, uint64_t seed, struct CeModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum CeStatus ce_model_load(const char *path, struct CeModel **out);

/**
 * Writes a checkpoint with an empty run history.
 *
 * # Safety
 * `model` must be a live handle; `path` must be NUL-terminated.
 */
enum CeStatus ce_model_save(const struct CeModel *model, const char *path);

/**
 * # Safety
 * `model` must be NULL or a handle from this library, not yet freed.
 */
void ce_model_free(struct CeModel *model);

/**
 * Frozen copy of `model`. Later changes to `model` do not affect it.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum CeStatus ce_model_snapshot(const struct CeModel *model, struct CeModel **out);

/**
 * 1 for snapshots, 0 for trainable models and NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
int32_t ce_model_is_frozen(const struct CeModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum CeStatus ce_model_info(const struct CeModel *model, struct CeModelInfo *out);

/**
 * Copies the flat parameter vector into `out` (`len` >= `num_params`).
 *
 * # Safety
 * `model` must be a live handle; `out` must hold `len` doubles.
 */
enum CeStatus ce_model_get_params(const struct CeModel *model, double *out, size_t len);

/**
 * Replaces all parameters. Fails with `FrozenMutation` on snapshots.
 *
 * # Safety
 * `model` must be a live handle; `values` must hold `len` doubles.
 */
enum CeStatus ce_model_set_params(struct CeModel *model, const double *values, size_t len);

/**
 * Embeds `n` images of `d_img` features into `out` (`n × d_emb`).
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum CeStatus ce_encode_image(const struct CeModel *model,
                              const double *images,
                              size_t n,
                              size_t d_img,
                              double *out,
                              size_t out_len);

/**
 * Embeds `n` captions (`max_len` tokens each, 0-padded) into `out`
 * (`n × d_emb`).
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum CeStatus ce_encode_text(const struct CeModel *model,
                             const uint32_t *tokens,
                             size_t n,
                             size_t max_len,
                             double *out,
                             size_t out_len);

/**
 * Image-to-text InfoNCE over `n` matched pairs of unit-norm rows.
 *
 * # Safety
 * `img` and `txt` must hold `n × d` doubles; `out` must be writable.
 */
enum CeStatus ce_contrastive_loss(const double *img,
                                  const double *txt,
                                  size_t n,
                                  size_t d,
                                  double tau,
                                  double *out);

/**
 * Mean matched-pair similarity over `n` unit-norm rows.
 *
 * # Safety
 * `img` and `txt` must hold `n × d` doubles; `out` must be writable.
 */
enum CeStatus ce_forgetting_loss(const double *img,
                                 const double *txt,
                                 size_t n,
                                 size_t d,
                                 double *out);

/**
 * KL consistency of `current` against the snapshot `original` on a batch.
 *
 * # Safety
 * `original` must be a snapshot handle, `current` any model handle; the
 * buffers must hold `n × d_img` doubles and `n × max_len` tokens.
 */
enum CeStatus ce_consistency_loss(const struct CeModel *original,
                                  const struct CeModel *current,
                                  const double *images,
                                  const uint32_t *tokens,
                                  size_t n,
                                  size_t d_img,
                                  size_t max_len,
                                  double *out);

/**
 * Generates a synthetic corpus; `config_json` may be NULL for defaults.
 *
 * # Safety
 * `config_json` must be NULL or NUL-terminated; `out` must be writable.
 */
enum CeStatus ce_corpus_generate(const char *config_json, struct CeCorpus **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum CeStatus ce_corpus_load(const char *path, struct CeCorpus **out);

/**
 * # Safety
 * `corpus` must be a live handle; `path` must be NUL-terminated.
 */
enum CeStatus ce_corpus_save(const struct CeCorpus *corpus, const char *path);

/**
 * Number of samples, or 0 for NULL.
 *
 * # Safety
 * `corpus` must be NULL or a live handle.
 */
size_t ce_corpus_len(const struct CeCorpus *corpus);

/**
 * # Safety
 * `corpus` must be NULL or a handle from this library, not yet freed.
 */
void ce_corpus_free(struct CeCorpus *corpus);

/**
 * Contrastively pretrains `model` in place. `config_json` may be NULL.
 *
 * # Safety
 * `model` must be a live, non-frozen handle; `corpus` a live handle.
 */
enum CeStatus ce_pretrain(struct CeModel *model,
                          const struct CeCorpus *corpus,
                          const char *config_json);

/**
 * Unlearns the forget set named by `split` (`class:1,2`, `keyword:car` or
 * `fraction:0.3`) and returns a new model; `model` is left unchanged.
 * `split_seed` picks the classes of fraction splits.
 *
 * # Safety
 * Handles must be live; strings NUL-terminated (`config_json` may be NULL).
 */
enum CeStatus ce_unlearn(const struct CeModel *model,
                         const struct CeCorpus *corpus,
                         const char *split,
                         uint64_t split_seed,
                         const char *config_json,
                         struct CeModel **out);

/**
 * Forget/retain metrics report as a JSON string (free with
 * [`ce_string_free`]).
 *
 * # Safety
 * Handles must be live; `split` NUL-terminated; `out` writable.
 */
enum CeStatus ce_evaluate(const struct CeModel *model,
                          const struct CeCorpus *corpus,
                          const char *split,
                          uint64_t split_seed,
                          char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLIPERASE_H */
