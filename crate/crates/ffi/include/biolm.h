#ifndef BIOLM_H
#define BIOLM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BiolmStatus {
  BIOLM_STATUS_OK = 0,
  BIOLM_STATUS_NULL_POINTER = 1,
  BIOLM_STATUS_INVALID_UTF8 = 2,
  BIOLM_STATUS_BUFFER_TOO_SMALL = 3,
  BIOLM_STATUS_SHAPE = 4,
  BIOLM_STATUS_INDEX = 5,
  BIOLM_STATUS_CONTRACT = 6,
  BIOLM_STATUS_CONFIG = 7,
  BIOLM_STATUS_DATA = 8,
  BIOLM_STATUS_FORMAT = 9,
  BIOLM_STATUS_TRAINING = 10,
  BIOLM_STATUS_COMPATIBILITY = 11,
  BIOLM_STATUS_IO = 12,
  BIOLM_STATUS_CHECK = 13,
  BIOLM_STATUS_EMPTY_LOSS = 14,
  BIOLM_STATUS_PANIC = 15,
} BiolmStatus;

typedef enum BiolmSchedule {
  BIOLM_SCHEDULE_WARMUP_LINEAR = 0,
  BIOLM_SCHEDULE_WARMUP_COSINE = 1,
} BiolmSchedule;

/**
 * Opaque checkpoint handle.
 */
typedef struct BiolmCheckpoint BiolmCheckpoint;

/**
 * Opaque tokenizer handle.
 */
typedef struct BiolmTokenizer BiolmTokenizer;

/**
 * Per-task metrics in percent, one benchmark row.
 */
typedef struct BiolmMetricRow {
  double top3_acc;
  double top3_hit3;
  double symrec_acc;
  double symrec_hit3;
  double danet_acc;
  double nli_acc;
  double ner_acc;
  double ner_f1;
} BiolmMetricRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty if none. Valid until
 * the next failing call on the same thread.
 */
const char *biolm_last_error(void);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum BiolmStatus biolm_tokenizer_load(const char *path,
                                      size_t max_len,
                                      struct BiolmTokenizer **out);

/**
 * # Safety
 * `tok` must come from [`biolm_tokenizer_load`] and not be freed yet, or be null.
 */
void biolm_tokenizer_free(struct BiolmTokenizer *tok);

/**
 * # Safety
 * `tok` must be a live handle and `out` a valid pointer.
 */
enum BiolmStatus biolm_tokenizer_vocab_size(const struct BiolmTokenizer *tok, size_t *out);

/**
 * Encode `text` as `[CLS] .. [SEP]` ids without padding. `len_out` gets
 * the id count; `BufferTooSmall` if it exceeds `capacity`.
 *
 * # Safety
 * `tok` must be a live handle, `text` nul-terminated, `ids` valid for
 * `capacity` writes.
 */
enum BiolmStatus biolm_tokenizer_encode(const struct BiolmTokenizer *tok,
                                        const char *text,
                                        uint32_t *ids,
                                        size_t capacity,
                                        size_t *len_out);

/**
 * Decode ids to text into `buf` (nul-terminated).
 *
 * # Safety
 * `tok` must be a live handle, `ids` valid for `n` reads, `buf` valid for
 * `capacity` writes.
 */
enum BiolmStatus biolm_tokenizer_decode(const struct BiolmTokenizer *tok,
                                        const uint32_t *ids,
                                        size_t n,
                                        char *buf,
                                        size_t capacity,
                                        size_t *len_out);

/**
 * # Safety
 * `path` must be nul-terminated and `out` a valid pointer.
 */
enum BiolmStatus biolm_checkpoint_load(const char *path, struct BiolmCheckpoint **out);

/**
 * # Safety
 * `ck` must come from [`biolm_checkpoint_load`] and not be freed yet, or be null.
 */
void biolm_checkpoint_free(struct BiolmCheckpoint *ck);

/**
 * # Safety
 * `ck` must be a live handle and `out` a valid pointer.
 */
enum BiolmStatus biolm_checkpoint_param_count(const struct BiolmCheckpoint *ck, uint64_t *out);

/**
 * Vocabulary size the checkpoint was built for.
 *
 * # Safety
 * `ck` must be a live handle and `out` a valid pointer.
 */
enum BiolmStatus biolm_checkpoint_vocab_size(const struct BiolmCheckpoint *ck, size_t *out);

/**
 * Content id (16 hex digits) into `buf`.
 *
 * # Safety
 * `ck` must be a live handle and `buf` valid for `capacity` writes.
 */
enum BiolmStatus biolm_checkpoint_id(const struct BiolmCheckpoint *ck,
                                     char *buf,
                                     size_t capacity,
                                     size_t *len_out);

/**
 * Mean over the five tasks of each task's metric mean.
 *
 * # Safety
 * `row` and `out` must be valid pointers.
 */
enum BiolmStatus biolm_overall(const struct BiolmMetricRow *row, double *out);

/**
 * Learning rate after `step` completed steps.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum BiolmStatus biolm_lr_at(enum BiolmSchedule kind,
                             uint64_t warmup_steps,
                             double peak,
                             uint64_t total_steps,
                             uint64_t step,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BIOLM_H */
