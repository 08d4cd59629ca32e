#ifndef TRH_H
#define TRH_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TrhStatus {
  TRH_STATUS_OK = 0,
  TRH_STATUS_NULL_POINTER = 1,
  TRH_STATUS_INVALID_ARGUMENT = 2,
  TRH_STATUS_DIMENSION_MISMATCH = 3,
  TRH_STATUS_IO = 4,
  TRH_STATUS_PARSE = 5,
  TRH_STATUS_OUT_OF_REGIME = 6,
  TRH_STATUS_NON_SMOOTH = 7,
  TRH_STATUS_PANIC = 8,
} TrhStatus;

typedef enum TrhLossKind {
  TRH_LOSS_KIND_AT = 0,
  TRH_LOSS_KIND_TRADES = 1,
  TRH_LOSS_KIND_ALP = 2,
  TRH_LOSS_KIND_MART = 3,
} TrhLossKind;

typedef enum TrhNorm {
  TRH_NORM_LINF = 0,
  TRH_NORM_L2 = 1,
} TrhNorm;

// Opaque dataset handle.
typedef struct TrhDataset TrhDataset;

// Opaque network handle.
typedef struct TrhNetwork TrhNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null after a
// successful call. The pointer stays valid until the next call.
const char *trh_last_error_message(void);

// Randomly initialized network with layer widths `sizes[0..n_sizes]` (input
// first, classes last).
//
// # Safety
// `sizes` must point to `n_sizes` values and `out` must be writable.
enum TrhStatus trh_network_init(const size_t *sizes,
                                size_t n_sizes,
                                bool hidden_bias,
                                uint64_t seed,
                                struct TrhNetwork **out);

// # Safety
// `path` must be a NUL-terminated string and `out` must be writable.
enum TrhStatus trh_network_load(const char *path, struct TrhNetwork **out);

// # Safety
// `net` must be a live handle and `path` a NUL-terminated string.
enum TrhStatus trh_network_save(const struct TrhNetwork *net, const char *path);

// Releases a network. Null is ignored.
//
// # Safety
// `net` must come from this library and not be used afterwards.
void trh_network_free(struct TrhNetwork *net);

// # Safety
// `net` must be a live handle and `out` writable.
enum TrhStatus trh_network_param_count(const struct TrhNetwork *net, size_t *out);

// # Safety
// `net` must be a live handle and the outputs writable.
enum TrhStatus trh_network_shape(const struct TrhNetwork *net,
                                 size_t *input_dim,
                                 size_t *num_classes);

// Logits for one input.
//
// # Safety
// `x` must hold `dim` values and `logits` room for `logits_len`.
enum TrhStatus trh_network_forward(const struct TrhNetwork *net,
                                   const double *x,
                                   size_t dim,
                                   double *logits,
                                   size_t logits_len);

// Closed-form top-layer trace of the per-example robust loss. `penalty` is
// the TRADES, ALP or MART weight and is ignored for AT; `full_case` selects
// the fully differentiated TRADES objective.
//
// # Safety
// `x` and `x_adv` must hold `dim` values and `out` must be writable.
enum TrhStatus trh_top_layer_trace(const struct TrhNetwork *net,
                                   const double *x,
                                   const double *x_adv,
                                   size_t dim,
                                   size_t label,
                                   enum TrhLossKind kind,
                                   double penalty,
                                   bool full_case,
                                   double *out);

// Exact trace of the cross-entropy Hessian over weight matrix `layer`
// (0-based, input side first) at one input.
//
// # Safety
// `x` must hold `dim` values and `out` must be writable.
enum TrhStatus trh_ce_layer_trace(const struct TrhNetwork *net,
                                  const double *x,
                                  size_t dim,
                                  size_t layer,
                                  double *out);

// # Safety
// `out` must be writable.
enum TrhStatus trh_dataset_two_moons(size_t n,
                                     double noise,
                                     uint64_t seed,
                                     struct TrhDataset **out);

// Loads a headered CSV whose last column is the integer label.
//
// # Safety
// `path` must be a NUL-terminated string and `out` must be writable.
enum TrhStatus trh_dataset_load_csv(const char *path, struct TrhDataset **out);

// # Safety
// `ds` must be a live handle and the outputs writable.
enum TrhStatus trh_dataset_shape(const struct TrhDataset *ds,
                                 size_t *len,
                                 size_t *dim,
                                 size_t *num_classes);

// Releases a dataset. Null is ignored.
//
// # Safety
// `ds` must come from this library and not be used afterwards.
void trh_dataset_free(struct TrhDataset *ds);

// Clean accuracy and the accuracy under a multi-restart PGD attack with
// random starts and step size `2.5·delta/steps`.
//
// # Safety
// Handles must be live and the outputs writable.
enum TrhStatus trh_eval_robust_accuracy(const struct TrhNetwork *net,
                                        const struct TrhDataset *ds,
                                        enum TrhNorm norm,
                                        double delta,
                                        size_t steps,
                                        size_t restarts,
                                        uint64_t seed,
                                        double *clean_acc,
                                        double *robust_acc);

// `KL(N(mean, diag(variance)) ‖ N(0, sigma0_sq·I))`.
//
// # Safety
// `mean` and `variance` must hold `n` values and `out` must be writable.
enum TrhStatus trh_gaussian_kl(const double *mean,
                               const double *variance,
                               size_t n,
                               double sigma0_sq,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRH_H */
