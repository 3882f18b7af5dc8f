/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef SAT_REFINE_H
#define SAT_REFINE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum SrStatus {
  SR_STATUS_OK = 0,
  SR_STATUS_NULL_POINTER = 1,
  SR_STATUS_INVALID_ARGUMENT = 2,
  SR_STATUS_IO = 3,
  SR_STATUS_FORMAT = 4,
  SR_STATUS_NUMERIC = 5,
  SR_STATUS_PANIC = 6,
} SrStatus;

// MMD estimator selection.
typedef enum SrEstimator {
  SR_ESTIMATOR_LINEAR = 0,
  SR_ESTIMATOR_QUADRATIC = 1,
} SrEstimator;

// An `n × d` feature matrix.
typedef struct SrFeatureSet SrFeatureSet;

// Trained refiner loaded from a checkpoint.
typedef struct SrRefiner SrRefiner;

typedef struct SrMmdResult {
  double mmd2;
  double mmd;
  double std_error;
  uint64_t pairs_used;
} SrMmdResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *sr_last_error(void);

// Library version as a static NUL-terminated string.
const char *sr_version(void);

// Loads the refiner weights from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SrStatus sr_refiner_load(const char *path, struct SrRefiner **out);

// # Safety
// `refiner` must come from [`sr_refiner_load`] or be null.
void sr_refiner_free(struct SrRefiner *refiner);

// Number of image channels the refiner expects.
//
// # Safety
// `refiner` must be a live handle and `out` a valid pointer.
enum SrStatus sr_refiner_channels(const struct SrRefiner *refiner, size_t *out);

// Refines `n` images of `height × width × channels` interleaved floats in
// `[0, 1]`. `output` must hold as many values as `input`.
//
// # Safety
// `input` and `output` must each point to `n·height·width·channels`
// floats.
enum SrStatus sr_refiner_apply(const struct SrRefiner *refiner,
                               const float *input,
                               size_t n,
                               size_t height,
                               size_t width,
                               size_t channels,
                               float *output);

// Reads an SRFT file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SrStatus sr_features_read(const char *path, struct SrFeatureSet **out);

// Copies a row-major `n × d` matrix into a new feature set.
//
// # Safety
// `data` must point to `n·d` doubles and `out` be a valid pointer.
enum SrStatus sr_features_from_buffer(const double *data,
                                      size_t n,
                                      size_t d,
                                      struct SrFeatureSet **out);

// Fallback features (grayscale, 16×16 area average, z-normalized) of `n`
// interleaved images.
//
// # Safety
// `pixels` must point to `n·height·width·channels` floats and `out` be a
// valid pointer.
enum SrStatus sr_features_extract(const float *pixels,
                                  size_t n,
                                  size_t height,
                                  size_t width,
                                  size_t channels,
                                  struct SrFeatureSet **out);

// Writes a feature set as SRFT (values rounded to f32).
//
// # Safety
// `set` must be a live handle and `path` a NUL-terminated string.
enum SrStatus sr_features_write(const struct SrFeatureSet *set, const char *path);

// Row and column counts.
//
// # Safety
// `set` must be a live handle; `n` and `d` valid pointers.
enum SrStatus sr_features_shape(const struct SrFeatureSet *set, size_t *n, size_t *d);

// Copies the row-major values into `out`, which must hold exactly `n·d`
// doubles (`len`).
//
// # Safety
// `set` must be a live handle and `out` point to `len` doubles.
enum SrStatus sr_features_copy(const struct SrFeatureSet *set, double *out, size_t len);

// # Safety
// `set` must come from one of the `sr_features_*` constructors or be null.
void sr_features_free(struct SrFeatureSet *set);

// Unbiased MMD² between two feature sets with the default mixture-RBF
// kernel.
//
// # Safety
// `x` and `y` must be live handles and `out` a valid pointer.
enum SrStatus sr_mmd2(const struct SrFeatureSet *x,
                      const struct SrFeatureSet *y,
                      enum SrEstimator estimator,
                      struct SrMmdResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAT_REFINE_H */
