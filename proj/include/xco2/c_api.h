#ifndef XCO2_C_API_H
#define XCO2_C_API_H

/* C interface to the retrieval library. Every call returns an xco2_status;
 * on failure xco2_last_error() describes the problem for the calling thread.
 * Strings returned through char** are owned by the caller and released with
 * xco2_string_free. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define XCO2_API __declspec(dllexport)
#else
#define XCO2_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum xco2_status {
  XCO2_OK = 0,
  XCO2_ERR_USAGE = 1,
  XCO2_ERR_RUNTIME = 2,
  XCO2_ERR_VALIDATION = 3
} xco2_status;

typedef struct xco2_experiment xco2_experiment;
typedef struct xco2_sampler xco2_sampler;

typedef void (*xco2_log_fn)(const char* message, void* user);

XCO2_API const char* xco2_version(void);
XCO2_API const char* xco2_last_error(void);
XCO2_API void xco2_string_free(char* s);

/* config_path may be NULL (defaults). overrides_json may be NULL or a JSON
 * object merged over the file; unknown keys are rejected. */
XCO2_API xco2_status xco2_experiment_open(const char* config_path, const char* overrides_json,
                                          xco2_experiment** out);
XCO2_API void xco2_experiment_free(xco2_experiment* exp);
XCO2_API xco2_status xco2_experiment_set_logger(xco2_experiment* exp, xco2_log_fn fn, void* user);
/* Effective configuration as JSON. */
XCO2_API xco2_status xco2_experiment_config(const xco2_experiment* exp, char** json_out);
XCO2_API xco2_status xco2_experiment_config_hash(const xco2_experiment* exp, char** hash_out);
XCO2_API xco2_status xco2_default_config(char** json_out);

XCO2_API xco2_status xco2_gen_data(xco2_experiment* exp);
XCO2_API xco2_status xco2_fit_eofs(xco2_experiment* exp);
XCO2_API xco2_status xco2_train_prior(xco2_experiment* exp);
XCO2_API xco2_status xco2_train_diffusion(xco2_experiment* exp);
XCO2_API xco2_status xco2_finetune(xco2_experiment* exp);

/* Options are a JSON object (NULL for defaults):
 *   retrieve:    {"stage": "pre"|"post", "split": "test", "dataset": path,
 *                 "n_samples": n, "output": path}
 *   retrieve_oe: {"split": "test", "dataset": path, "output": path}
 *   evaluate:    {"retrievals": [paths], "truth": path, "output_dir": path}
 * The summary written to result_json (may be NULL) is a JSON object. */
XCO2_API xco2_status xco2_retrieve(xco2_experiment* exp, const char* options_json, char** result_json);
XCO2_API xco2_status xco2_retrieve_oe(xco2_experiment* exp, const char* options_json, char** result_json);
XCO2_API xco2_status xco2_evaluate(xco2_experiment* exp, const char* options_json, char** result_json);

/* In-memory sampler over trained checkpoints (stage "pre" or "post"). */
XCO2_API xco2_status xco2_sampler_open(const xco2_experiment* exp, const char* stage, xco2_sampler** out);
XCO2_API void xco2_sampler_free(xco2_sampler* sampler);
XCO2_API size_t xco2_sampler_covariate_count(const xco2_sampler* sampler);
/* covariates: raw [radiance | sza | p_surf] of length covariate_count.
 * external_prior is used only by samplers whose prior kind is external.
 * Writes n_samples ppm values to out and the prior value to prior_out (may be NULL). */
XCO2_API xco2_status xco2_sampler_draw(const xco2_sampler* sampler, const double* covariates, size_t n_covariates,
                                       double external_prior, size_t n_samples, uint64_t seed,
                                       uint64_t sounding_id, double* out, double* prior_out);

#ifdef __cplusplus
}
#endif

#endif
