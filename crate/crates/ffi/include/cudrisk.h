#ifndef CUDRISK_H
#define CUDRISK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CudriskStatus {
  CUDRISK_STATUS_OK = 0,
  CUDRISK_STATUS_NULL_POINTER = 1,
  CUDRISK_STATUS_INVALID_ARGUMENT = 2,
  CUDRISK_STATUS_IO = 3,
  CUDRISK_STATUS_FORMAT = 4,
  CUDRISK_STATUS_OUT_OF_RANGE = 5,
  CUDRISK_STATUS_NUMERIC = 6,
  CUDRISK_STATUS_BUFFER_TOO_SMALL = 7,
  CUDRISK_STATUS_PANIC = 8,
} CudriskStatus;

typedef enum CudriskAnchor {
  CUDRISK_ANCHOR_AT_FIRST_USE = 0,
  CUDRISK_ANCHOR_AT_AGE = 1,
} CudriskAnchor;

// Loaded model.
typedef struct CudriskModel CudriskModel;

typedef struct CudriskRisk {
  double mean;
  double cri_low;
  double cri_high;
  size_t draws;
} CudriskRisk;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a model artifact from `path`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CudriskStatus cudrisk_model_load(const char *path, struct CudriskModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`cudrisk_model_load`] and not be freed twice.
void cudrisk_model_free(struct CudriskModel *model);

// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum CudriskStatus cudrisk_model_covariate_count(const struct CudriskModel *model, size_t *out);

// Writes covariate `index`'s name into `buf`. `needed` receives the buffer
// size required including the terminating NUL.
//
// # Safety
// `model` must be live; `buf` must hold `len` bytes or be null; `needed`
// may be null.
enum CudriskStatus cudrisk_model_covariate_name(const struct CudriskModel *model,
                                                size_t index,
                                                char *buf,
                                                size_t len,
                                                size_t *needed);

// Allowed age range for `a` and `b`.
//
// # Safety
// `model` must be live; `low` and `high` valid pointers.
enum CudriskStatus cudrisk_model_age_range(const struct CudriskModel *model,
                                           double *low,
                                           double *high);

// Posterior mean absolute risk over `(a, b]` with its 95% credible interval.
//
// # Safety
// `model` must be live, `values` must hold `n_values` doubles and `out`
// must be valid.
enum CudriskStatus cudrisk_predict(const struct CudriskModel *model,
                                   const double *values,
                                   size_t n_values,
                                   enum CudriskAnchor anchor,
                                   double a,
                                   double b,
                                   struct CudriskRisk *out);

// Per-year cumulative risk curve. `written` receives the number of points;
// when it exceeds `capacity` nothing is copied and `BufferTooSmall` is
// returned.
//
// # Safety
// As [`cudrisk_predict`]; `ages` and `risks` must each hold `capacity`
// doubles.
enum CudriskStatus cudrisk_predict_curve(const struct CudriskModel *model,
                                         const double *values,
                                         size_t n_values,
                                         enum CudriskAnchor anchor,
                                         double a,
                                         double b,
                                         double *ages,
                                         double *risks,
                                         size_t capacity,
                                         size_t *written);

// Intercept-only logistic recalibration. `updated` receives `n` risks.
//
// # Safety
// `risks`, `outcomes` and `updated` must each hold `n` elements;
// `intercept` must be valid.
enum CudriskStatus cudrisk_recalibrate(const double *risks,
                                       const uint8_t *outcomes,
                                       size_t n,
                                       double *intercept,
                                       double *updated);

// Copies the calling thread's last error message into `buf` and returns the
// size needed including the NUL. Empty after a successful call.
//
// # Safety
// `buf` must hold `len` bytes or be null.
size_t cudrisk_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *cudrisk_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CUDRISK_H */
