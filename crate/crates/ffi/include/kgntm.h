#ifndef KGNTM_H
#define KGNTM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KgntmStatus {
  KGNTM_STATUS_OK = 0,
  KGNTM_STATUS_NULL_POINTER = 1,
  KGNTM_STATUS_INVALID_UTF8 = 2,
  KGNTM_STATUS_IO = 3,
  KGNTM_STATUS_CHECKPOINT = 4,
  KGNTM_STATUS_INVALID_INPUT = 5,
  KGNTM_STATUS_RUNTIME = 6,
  KGNTM_STATUS_PANIC = 7,
} KgntmStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct KgntmModel KgntmModel;

/**
 * Loads a checkpoint written by `kgntm train`. On success `*out` owns a
 * new handle.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum KgntmStatus kgntm_model_load(const char *path, struct KgntmModel **out);

/**
 * Loads a checkpoint from memory.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum KgntmStatus kgntm_model_load_bytes(const uint8_t *bytes, size_t len, struct KgntmModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from a load call and not be used afterwards.
 */
void kgntm_model_free(struct KgntmModel *model);

/**
 * Number of topics K, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t kgntm_model_num_topics(const struct KgntmModel *model);

/**
 * Expected widths of the image, motion and audio feature vectors.
 *
 * # Safety
 * `model` must be a live handle and the out pointers valid.
 */
enum KgntmStatus kgntm_model_feature_dims(const struct KgntmModel *model,
                                          size_t *img,
                                          size_t *mot,
                                          size_t *aud);

/**
 * Predicts one document given as a corpus-format JSON object. Writes a
 * JSON prediction `{id, probability, label, theta}` to `*out`.
 *
 * # Safety
 * `model` must be a live handle, `doc_json` nul-terminated and `out` valid.
 */
enum KgntmStatus kgntm_predict_json(const struct KgntmModel *model,
                                    const char *doc_json,
                                    double threshold,
                                    char **out);

/**
 * Predicts from raw arrays. `transcript` holds regular-vocabulary ids and
 * may be null with `transcript_len` 0 for a video without narration.
 * `theta_out`, if not null, receives K topic proportions.
 *
 * # Safety
 * Every non-null array must hold the stated number of elements.
 */
enum KgntmStatus kgntm_predict_features(const struct KgntmModel *model,
                                        const double *f_img,
                                        size_t img_len,
                                        const double *f_mot,
                                        size_t mot_len,
                                        const double *f_aud,
                                        size_t aud_len,
                                        const uint32_t *transcript,
                                        size_t transcript_len,
                                        double threshold,
                                        double *probability_out,
                                        uint8_t *label_out,
                                        double *theta_out);

/**
 * Per-topic top words and seed-topic weights as JSON.
 *
 * # Safety
 * `model` must be a live handle and `out` valid.
 */
enum KgntmStatus kgntm_topic_report_json(const struct KgntmModel *model, size_t top_n, char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void kgntm_string_free(char *s);

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *kgntm_last_error_message(void);

#endif  /* KGNTM_H */
