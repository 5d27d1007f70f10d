#ifndef SSMLAB_H
#define SSMLAB_H

/* Generated by cbindgen from crates/ffi/src; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum SsmlabStatus {
  SSMLAB_STATUS_OK = 0,
  SSMLAB_STATUS_NULL_POINTER = 1,
  SSMLAB_STATUS_INVALID_ARGUMENT = 2,
  SSMLAB_STATUS_SHAPE = 3,
  SSMLAB_STATUS_OVERFLOW = 4,
  SSMLAB_STATUS_UNSUPPORTED = 5,
  SSMLAB_STATUS_CHECKPOINT = 6,
  SSMLAB_STATUS_IO = 7,
  SSMLAB_STATUS_CONFIG = 8,
  SSMLAB_STATUS_PANIC = 9,
} SsmlabStatus;

// Opaque model handle.
typedef struct SsmlabModel SsmlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ssmlab_version(void);

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length in bytes.
uintptr_t ssmlab_last_error(char *buf, uintptr_t len);

// Creates a freshly initialised model from a preset (`"tiny"` or `"small"`).
enum SsmlabStatus ssmlab_model_new(const char *preset, uint64_t seed, struct SsmlabModel **out);

// Loads a checkpoint file.
enum SsmlabStatus ssmlab_model_load(const char *path, struct SsmlabModel **out);

// Saves a model as a 64-bit checkpoint.
enum SsmlabStatus ssmlab_model_save(const struct SsmlabModel *model, const char *path);

// Releases a model; null is ignored.
void ssmlab_model_free(struct SsmlabModel *model);

enum SsmlabStatus ssmlab_model_num_params(const struct SsmlabModel *model, uint64_t *out);

// Per-layer hidden state size.
enum SsmlabStatus ssmlab_model_state_size(const struct SsmlabModel *model, uint64_t *out);

// Scores one byte sequence from a zero state: `out_nll[i]` is the negative
// log-likelihood (nats) of `tokens[i + 1]` given `tokens[..=i]`.
// `out_nll` must hold `len - 1` values.
enum SsmlabStatus ssmlab_model_score(const struct SsmlabModel *model,
                                     const uint8_t *tokens,
                                     uintptr_t len,
                                     double *out_nll);

// Largest decay keeping `|h|_∞ ≤ max_value` for all time; `feasible` is
// false when no decay does.
enum SsmlabStatus ssmlab_max_safe_decay(double max_value,
                                        double u_norm1,
                                        double x_sup,
                                        double h0_inf,
                                        double *out_lambda,
                                        bool *out_feasible);

// Bound on `|h_T|_∞`; `steps = 0` means an infinite horizon.
enum SsmlabStatus ssmlab_hidden_bound(double lambda,
                                      double u_norm1,
                                      double x_sup,
                                      double h0_inf,
                                      uint64_t steps,
                                      double *out);

// Fits `m` exponentials to `target` on `[0, window]` and returns
// `∫_window^horizon |ρ - ρ̂|`; a non-finite `horizon` means infinity.
enum SsmlabStatus ssmlab_kernel_extrapolation_error(const char *target,
                                                    uintptr_t m,
                                                    double window,
                                                    double horizon,
                                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSMLAB_H */
