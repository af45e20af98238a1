/* Copyright 2026 The MTLoRA Desk Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the MTLoRA library. Every call returns an mtlora_status;
 * on failure mtlora_last_error() describes what went wrong on the calling
 * thread. Strings returned through char** are owned by the caller and must
 * be released with mtlora_string_free.
 */
#ifndef MTLORA_MTLORA_H_
#define MTLORA_MTLORA_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define MTLORA_API __declspec(dllexport)
#else
#define MTLORA_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mtlora_status {
  MTLORA_OK = 0,
  MTLORA_ERR_VALIDATION = 1, /* bad arguments, config, shapes or usage */
  MTLORA_ERR_RUNTIME = 2     /* I/O, corrupt files, non-finite values */
} mtlora_status;

typedef struct mtlora_run mtlora_run;     /* model, data and training settings */
typedef struct mtlora_model mtlora_model; /* a float32 multi-task model */

/* Called after each training step with the 1-based step and its loss. */
typedef void (*mtlora_step_fn)(int64_t step, double loss, void* user);

MTLORA_API const char* mtlora_version(void);
MTLORA_API const char* mtlora_last_error(void);
MTLORA_API void mtlora_string_free(char* s);

/* Run settings. A NULL or empty path gives the defaults. */
MTLORA_API mtlora_status mtlora_run_load(const char* toml_path, mtlora_run** out);
MTLORA_API mtlora_status mtlora_run_parse(const char* toml_text, mtlora_run** out);
MTLORA_API void mtlora_run_destroy(mtlora_run* run);
/* Seeds both weight initialisation and data generation. */
MTLORA_API mtlora_status mtlora_run_set_seed(mtlora_run* run, uint64_t seed);
MTLORA_API mtlora_status mtlora_run_set_steps(mtlora_run* run, int64_t steps);
MTLORA_API mtlora_status mtlora_run_set_baseline(mtlora_run* run, const char* task, double value);
MTLORA_API mtlora_status mtlora_run_to_json(const mtlora_run* run, char** json);

/* Training. Builds a model from `run`, trains it, evaluates on the val split
 * and returns the run report. `model_out` may be NULL. */
MTLORA_API mtlora_status mtlora_train(const mtlora_run* run, mtlora_step_fn on_step, void* user,
                                      mtlora_model** model_out, char** report_json);

/* Models. */
MTLORA_API mtlora_status mtlora_model_create(const mtlora_run* run, mtlora_model** out);
MTLORA_API mtlora_status mtlora_model_load(const char* path, mtlora_model** out);
MTLORA_API void mtlora_model_destroy(mtlora_model* model);
MTLORA_API mtlora_status mtlora_model_trainable_count(const mtlora_model* model, int64_t* count);
/* Settings echoed from creation or from the checkpoint manifest. */
MTLORA_API mtlora_status mtlora_model_run(const mtlora_model* model, mtlora_run** out);
/* Metrics on the val split described by `run` (the model's own settings when
 * NULL). Includes the relative change when `run` has baselines for every task. */
MTLORA_API mtlora_status mtlora_model_evaluate(mtlora_model* model, const mtlora_run* run, char** report_json);
MTLORA_API mtlora_status mtlora_model_save(mtlora_model* model, const char* path);
/* Writes a checkpoint with shared adapters folded into base weights. */
MTLORA_API mtlora_status mtlora_model_export_merged(mtlora_model* model, const char* path);
/* Shape [channels, height, width] of one task's output per image. */
MTLORA_API mtlora_status mtlora_model_output_shape(const mtlora_model* model, const char* task, int64_t shape[3]);
/* images: [batch, 3, size, size] floats. out: batch * prod(output_shape). */
MTLORA_API mtlora_status mtlora_model_predict(mtlora_model* model, const float* images, int64_t batch,
                                              const char* task, float* out, size_t out_len);

/* Parameter and FLOPs accounting. Either `preset` or `run` must be given.
 * `strategy` may be NULL and `rank` 0 to keep the configured values. */
MTLORA_API mtlora_status mtlora_audit(const char* preset, const mtlora_run* run, const char* strategy, int64_t rank,
                                      char** report_json, char** table);

/* Finite-difference check of the tiny two-task model in 64-bit. */
MTLORA_API mtlora_status mtlora_gradcheck(uint64_t seed, double* max_rel_error, char** report_json);

/* Writes the train and val splits of `run` to <dir>/train and <dir>/val,
 * one file per sample. */
MTLORA_API mtlora_status mtlora_generate_dataset(const mtlora_run* run, const char* dir);

#ifdef __cplusplus
}
#endif

#endif /* MTLORA_MTLORA_H_ */
