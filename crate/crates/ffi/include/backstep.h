#ifndef BACKSTEP_H
#define BACKSTEP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum BsStatus {
  BS_OK = 0,
  BS_ERR_NULL_POINTER = 1,
  BS_ERR_INVALID_UTF8 = 2,
  BS_ERR_VALIDATION = 3,
  BS_ERR_CONTRACT_VIOLATION = 4,
  BS_ERR_INCOMPATIBLE = 5,
  BS_ERR_DECODE = 6,
  BS_ERR_CONFLICT = 7,
  BS_ERR_NOT_FOUND = 8,
  BS_ERR_IO = 9,
  BS_ERR_PANIC = 10,
} BsStatus;

// A demonstration.
typedef struct BsDemo BsDemo;

// An environment instance.
typedef struct BsEnv BsEnv;

// Outcome of a training run.
typedef struct BsTrainResult BsTrainResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *bs_last_error(void);

// Library version as a static string.
const char *bs_version(void);

// # Safety
// `s` must be null or a string returned by this library.
void bs_string_free(char *s);

// # Safety
// `buf`/`len` must be a buffer returned by this library.
void bs_bytes_free(uint8_t *buf, size_t len);

// Create an environment from `cliff:<n>[:<seed>]`, `keydoor`, or a JSON
// environment spec such as `{"env":"blind_cliff_walk","n_states":6}`.
//
// # Safety
// `spec` must be a nul-terminated string; `out_env` must be writable.
enum BsStatus bs_env_new(const char *spec, struct BsEnv **out_env);

// # Safety
// `env` must be null or a handle from [`bs_env_new`].
void bs_env_free(struct BsEnv *env);

// # Safety
// Pointers must be valid.
enum BsStatus bs_env_action_count(const struct BsEnv *env, uint32_t *out_count);

// # Safety
// `env` must be a valid handle.
enum BsStatus bs_env_reset(struct BsEnv *env);

// Apply one action. `out_reward` and `out_done` may be null.
//
// # Safety
// `env` must be a valid handle.
enum BsStatus bs_env_step(struct BsEnv *env, uint32_t action, double *out_reward, bool *out_done);

// Current observation as JSON. Free with [`bs_string_free`].
//
// # Safety
// Pointers must be valid.
enum BsStatus bs_env_observation_json(const struct BsEnv *env, char **out_json);

// Structured state view as JSON. Free with [`bs_string_free`].
//
// # Safety
// Pointers must be valid.
enum BsStatus bs_env_render_json(const struct BsEnv *env, char **out_json);

// Serialize the full environment state. Free with [`bs_bytes_free`].
//
// # Safety
// Pointers must be valid.
enum BsStatus bs_env_snapshot(const struct BsEnv *env, uint8_t **out_buf, size_t *out_len);

// Restore state from bytes produced by [`bs_env_snapshot`].
//
// # Safety
// `buf` must point to `len` readable bytes.
enum BsStatus bs_env_restore(struct BsEnv *env, const uint8_t *buf, size_t len);

// # Safety
// `path` must be a nul-terminated string; `out_demo` writable.
enum BsStatus bs_demo_load(const char *path, struct BsDemo **out_demo);

// Record a demonstration by playing `actions` from a fresh environment.
// The episode must end on the last action.
//
// # Safety
// `actions` must point to `count` values.
enum BsStatus bs_demo_record(const char *spec,
                             const uint32_t *actions,
                             size_t count,
                             struct BsDemo **out_demo);

// # Safety
// Pointers must be valid.
enum BsStatus bs_demo_save(const struct BsDemo *demo, const char *path);

// # Safety
// `demo` must be null or a demo handle.
void bs_demo_free(struct BsDemo *demo);

// Number of recorded steps and the total return.
//
// # Safety
// Pointers must be valid; outputs may be null.
enum BsStatus bs_demo_info(const struct BsDemo *demo, size_t *out_len, double *out_return);

// Replay the demonstration. `out_exact` is set to whether it replays
// exactly; on divergence `out_step` receives the first diverging step.
//
// # Safety
// Pointers must be valid; `out_step` may be null.
enum BsStatus bs_demo_validate(const struct BsDemo *demo, bool *out_exact, size_t *out_step);

// Train with a TOML run configuration. `demo` may be null for the
// from-start condition. Blocks until the run ends.
//
// # Safety
// Pointers must be valid; `demo` may be null.
enum BsStatus bs_train(const char *config_toml,
                       const struct BsDemo *demo,
                       struct BsTrainResult **out_result);

// Summary of a finished run. Any output pointer may be null.
//
// # Safety
// `result` must be a valid handle.
enum BsStatus bs_train_result_info(const struct BsTrainResult *result,
                                   bool *out_converged,
                                   size_t *out_tau,
                                   uint64_t *out_live_steps,
                                   double *out_greedy_return);

// Write the run's checkpoint to `path`.
//
// # Safety
// Pointers must be valid.
enum BsStatus bs_train_result_save_checkpoint(const struct BsTrainResult *result, const char *path);

// # Safety
// `result` must be null or a handle from [`bs_train`].
void bs_train_result_free(struct BsTrainResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BACKSTEP_H */
