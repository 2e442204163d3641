#ifndef EGAL_H
#define EGAL_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum EgalStatus {
  EGAL_STATUS_OK = 0,
  EGAL_STATUS_NULL_POINTER = 1,
  EGAL_STATUS_CONFIG = 2,
  EGAL_STATUS_DATA = 3,
  EGAL_STATUS_CONTRACT = 4,
  EGAL_STATUS_PANIC = 5,
} EgalStatus;

/**
 * Opaque classifier handle.
 */
typedef struct EgalClassifier EgalClassifier;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *egal_last_error(void);

/**
 * Freshly initialised linear-head classifier with the default architecture.
 *
 * # Safety
 * `out` must be valid for one pointer write.
 */
enum EgalStatus egal_classifier_new(size_t num_classes, uint64_t seed, struct EgalClassifier **out);

/**
 * Load a checkpoint written by the `egal` CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for one pointer write.
 */
enum EgalStatus egal_classifier_load(const char *path, struct EgalClassifier **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `h` must be null or a handle not yet freed.
 */
void egal_classifier_free(struct EgalClassifier *h);

/**
 * Number of classes, or 0 for a null handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
size_t egal_classifier_num_classes(const struct EgalClassifier *h);

/**
 * Embedding dimension, or 0 for a null handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
size_t egal_classifier_embed_dim(const struct EgalClassifier *h);

/**
 * Set the centroid of `class`, switching a linear classifier to the
 * prototypical head. Predictions need a centroid for every class.
 *
 * # Safety
 * `h` must be a live handle; `centroid` valid for `len` reads.
 */
enum EgalStatus egal_classifier_set_prototype(struct EgalClassifier *h,
                                              size_t class_,
                                              const double *centroid,
                                              size_t len);

/**
 * Shannon entropy in nats of a probability vector.
 *
 * # Safety
 * `probs` valid for `len` reads; `out` for one write.
 */
enum EgalStatus egal_entropy(const double *probs, size_t len, double *out);

/**
 * Entropy divided by `ln(len)`, in `[0, 1]`.
 *
 * # Safety
 * `probs` valid for `len` reads; `out` for one write.
 */
enum EgalStatus egal_normalized_entropy(const double *probs, size_t len, double *out);

/**
 * Soft Dice `2Σab / (Σa + Σb)` of two equally long maps.
 *
 * # Safety
 * `a` and `b` valid for `len` reads; `out` for one write.
 */
enum EgalStatus egal_dice(const double *a, const double *b, size_t len, double *out);

/**
 * `λ·h_norm + (1 − λ)·d_exp`; `λ` must lie in `[0, 1]`.
 *
 * # Safety
 * `out` valid for one write.
 */
enum EgalStatus egal_composite_score(double h_norm, double d_exp, double lambda, double *out);

/**
 * Class probabilities of one image into `out_probs[0..num_classes]`.
 *
 * # Safety
 * `h` live; `pixels` valid for `height·width` reads; `out_probs` for
 * `capacity` writes.
 */
enum EgalStatus egal_predict_proba(const struct EgalClassifier *h,
                                   const double *pixels,
                                   size_t height,
                                   size_t width,
                                   double *out_probs,
                                   size_t capacity);

/**
 * Unit-range Grad-CAM of `class` at image resolution into `out_map[0..height·width]`.
 *
 * # Safety
 * `h` live; `pixels` valid for `height·width` reads; `out_map` for as many writes.
 */
enum EgalStatus egal_grad_cam(const struct EgalClassifier *h,
                              const double *pixels,
                              size_t height,
                              size_t width,
                              size_t class_,
                              double *out_map);

/**
 * `1 − Dice(CAM of the predicted class, mask)` and the predicted class.
 *
 * # Safety
 * `h` live; `pixels` and `mask` valid for `height·width` reads; outputs for one write each.
 */
enum EgalStatus egal_misalignment(const struct EgalClassifier *h,
                                  const double *pixels,
                                  const double *mask,
                                  size_t height,
                                  size_t width,
                                  double *out_d_exp,
                                  size_t *out_predicted);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EGAL_H */
