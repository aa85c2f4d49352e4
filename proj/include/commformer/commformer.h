/* CommFormer C API.
 *
 * All functions return a cf_status. On failure, cf_last_error() returns a
 * message for the calling thread that stays valid until its next API call.
 * Handles are opaque and must be released with the matching *_free function.
 */
#ifndef COMMFORMER_H
#define COMMFORMER_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define CF_API __declspec(dllexport)
#else
#define CF_API __attribute__((visibility("default")))
#endif

typedef enum cf_status {
  CF_OK = 0,
  CF_ERR_ARGUMENT = 1,  /* null handle, bad option value */
  CF_ERR_CONFIG = 2,    /* malformed config or sweep, unknown key, refused output dir */
  CF_ERR_IO = 3,        /* unreadable or unwritable file */
  CF_ERR_MISMATCH = 4,  /* checkpoint does not fit the environment */
  CF_ERR_NONFINITE = 5, /* training produced a non-finite loss or gradient */
  CF_ERR_RUNTIME = 6    /* anything else */
} cf_status;

CF_API const char* cf_last_error(void);
CF_API const char* cf_status_name(cf_status status);
CF_API const char* cf_version(void);

/* Worker count after the COMMFORMER_THREADS cap and COMMFORMER_DETERMINISTIC. */
CF_API int cf_resolve_threads(int requested);

/* ---- configuration ---------------------------------------------------- */

typedef struct cf_config cf_config;

CF_API cf_status cf_config_default(cf_config** out);
CF_API cf_status cf_config_load(const char* path, cf_config** out);
CF_API cf_status cf_config_parse(const char* text, cf_config** out);
CF_API cf_status cf_config_set(cf_config* cfg, const char* key, const char* value);
CF_API cf_status cf_config_validate(const cf_config* cfg);
/* Writes the resolved "key = value" text. `needed` receives the size including
 * the terminator; a too-small buffer yields CF_ERR_ARGUMENT. */
CF_API cf_status cf_config_to_string(const cf_config* cfg, char* buf, size_t cap, size_t* needed);
CF_API void cf_config_free(cf_config* cfg);

/* ---- training --------------------------------------------------------- */

typedef struct cf_train_summary {
  long long iterations;
  long long env_steps;
  double last_mean_return; /* NaN when no episode finished in the last iteration */
  double last_success_rate;
} cf_train_summary;

/* Full run with artifacts. `out_dir` overrides run.out_dir when non-null;
 * `progress` (may be null) receives one line per logged iteration. */
typedef void (*cf_progress_fn)(const char* line, void* user);
CF_API cf_status cf_train(const cf_config* cfg, const char* out_dir, int threads, cf_progress_fn progress,
                          void* user, cf_train_summary* summary);

/* Step-wise training without artifacts. */
typedef struct cf_trainer cf_trainer;
CF_API cf_status cf_trainer_create(const cf_config* cfg, int threads, cf_trainer** out);
CF_API cf_status cf_trainer_step(cf_trainer* tr);
/* Metrics record (JSON) of the latest iteration, copied like cf_config_to_string. */
CF_API cf_status cf_trainer_metrics(const cf_trainer* tr, char* buf, size_t cap, size_t* needed);
CF_API int cf_trainer_finished(const cf_trainer* tr);
CF_API long long cf_trainer_env_steps(const cf_trainer* tr);
/* Current execution graph, row-major N x N, edges[i * N + j] = 1 when j's message reaches i. */
CF_API cf_status cf_trainer_graph(const cf_trainer* tr, uint8_t* edges, size_t cap);
CF_API cf_status cf_trainer_save(const cf_trainer* tr, const char* path);
CF_API void cf_trainer_free(cf_trainer* tr);

/* ---- policies --------------------------------------------------------- */

typedef struct cf_policy cf_policy;

typedef struct cf_eval_options {
  int episodes;
  uint64_t seed;
  int sample;             /* nonzero: sample actions instead of greedy */
  const char* trace_path; /* per-step JSONL when non-null */
} cf_eval_options;

typedef struct cf_eval_report {
  int episodes;
  double success_rate;
  double mean_steps;
  double std_steps;
  double se_steps;
  double mean_return;
  double std_return;
  double se_return;
} cf_eval_report;

CF_API cf_eval_options cf_eval_defaults(void);

CF_API cf_status cf_policy_load(const char* path, cf_policy** out);
/* Fails with CF_ERR_MISMATCH when cfg describes a different environment. */
CF_API cf_status cf_policy_check(const cf_policy* p, const cf_config* cfg);
CF_API int cf_policy_n_agents(const cf_policy* p);
CF_API int cf_policy_obs_dim(const cf_policy* p);
CF_API cf_status cf_policy_eval(const cf_policy* p, const cf_eval_options* opt, cf_eval_report* out);
/* Greedy joint action for `batch` observations laid out [batch][n_agents][obs_dim]. */
CF_API cf_status cf_policy_act(const cf_policy* p, const float* obs, int batch, int* actions);
CF_API void cf_policy_free(cf_policy* p);

/* ---- sweeps and export ------------------------------------------------ */

CF_API cf_status cf_ablate(const cf_config* base, const char* sweep_path, const char* out_dir, int threads,
                           cf_progress_fn progress, void* user);
CF_API cf_status cf_export(const char* run_dir, int* curves, int* frames);

#ifdef __cplusplus
}
#endif

#endif /* COMMFORMER_H */
