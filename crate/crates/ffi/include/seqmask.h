#ifndef SEQMASK_H
#define SEQMASK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum SmStatus {
  SM_STATUS_OK = 0,
  SM_STATUS_NULL_POINTER = 1,
  SM_STATUS_INVALID_ARGUMENT = 2,
  SM_STATUS_CONFIG = 3,
  SM_STATUS_IO = 4,
  SM_STATUS_DATA = 5,
  SM_STATUS_NUMERICAL = 6,
  SM_STATUS_BUFFER_TOO_SMALL = 7,
  SM_STATUS_PANIC = 8,
} SmStatus;

// Which predictor-side perturbation to apply during evaluation.
typedef enum SmAblation {
  SM_ABLATION_NONE = 0,
  SM_ABLATION_ADD_NOISE = 1,
  SM_ABLATION_USING_REMOVED = 2,
} SmAblation;

typedef enum SmModality {
  SM_MODALITY_TEXT = 0,
  SM_MODALITY_VIDEO = 1,
} SmModality;

// Opaque dataset handle.
typedef struct SmDataset SmDataset;

// Opaque model handle.
typedef struct SmModel SmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *sm_last_error(void);

// Library version as a static NUL-terminated string.
const char *sm_version(void);

// Derivative of the smooth stand-in for the unit step.
double sm_surrogate_step_grad(double t);

// Fisher z-test of zero correlation between two length-`n` series.
//
// # Safety
// `x` and `y` must point to `n` readable doubles; the outputs to writable
// storage (either may be null to skip it).
enum SmStatus sm_fisher_z(const double *x,
                          const double *y,
                          size_t n,
                          double level,
                          double *out_z,
                          bool *out_dependent);

// Generates the synthetic dataset described by `config` (`key = value`
// lines; null means the defaults).
//
// # Safety
// `config` must be null or a NUL-terminated string; `out` writable.
enum SmStatus sm_dataset_generate(const char *config, struct SmDataset **out);

// Reads a JSON-lines dataset.
//
// # Safety
// `path` must be a NUL-terminated string; `out` writable.
enum SmStatus sm_dataset_load(const char *path, struct SmDataset **out);

// # Safety
// `dataset` must be a live handle and `path` a NUL-terminated string.
enum SmStatus sm_dataset_save(const struct SmDataset *dataset, const char *path);

// Number of samples, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle.
size_t sm_dataset_len(const struct SmDataset *dataset);

// # Safety
// `dataset` must be null or a handle not yet freed.
void sm_dataset_free(struct SmDataset *dataset);

// Trains a model on `dataset` with the first replica seed of `config`.
//
// # Safety
// `dataset` must be a live handle, `config` null or a NUL-terminated
// string, `out` writable.
enum SmStatus sm_model_train(const struct SmDataset *dataset,
                             const char *config,
                             struct SmModel **out);

// Restores a model from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` writable.
enum SmStatus sm_model_load(const char *path, struct SmModel **out);

// Writes a checkpoint file.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum SmStatus sm_model_save(const struct SmModel *model, const char *path);

// Accuracy of the model's final classifier over every sample of `dataset`.
//
// # Safety
// Handles must be live; `out_accuracy` writable.
enum SmStatus sm_model_evaluate(const struct SmModel *model,
                                const struct SmDataset *dataset,
                                enum SmAblation ablation,
                                double *out_accuracy);

// Copies one modality's mask vector (`r` where kept, 0 where removed)
// into `buf`. `out_len` always receives the required length; when `cap`
// is too small nothing is copied and `BufferTooSmall` is returned.
//
// # Safety
// `model` must be a live handle, `buf` null or writable for `cap`
// doubles, `out_len` writable.
enum SmStatus sm_model_mask(const struct SmModel *model,
                            enum SmModality modality,
                            double *buf,
                            size_t cap,
                            size_t *out_len);

// # Safety
// `model` must be null or a handle not yet freed.
void sm_model_free(struct SmModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEQMASK_H */
