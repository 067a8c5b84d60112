#ifndef ICRDN_ICRDN_H
#define ICRDN_ICRDN_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define ICRDN_API __declspec(dllexport)
#else
#define ICRDN_API __attribute__((visibility("default")))
#endif

typedef enum icrdn_status {
    ICRDN_OK = 0,
    ICRDN_ERR_CONFIG = 1,
    ICRDN_ERR_VALIDATION = 2,
    ICRDN_ERR_DEPENDENCY = 3,
    ICRDN_ERR_TRAINING = 4,
    ICRDN_ERR_IO = 5,
    ICRDN_ERR_INTERNAL = 6
} icrdn_status;

typedef enum icrdn_stage {
    ICRDN_STAGE_DATA = 0,
    ICRDN_STAGE_IDENTITY = 1,
    ICRDN_STAGE_CODEC = 2,
    ICRDN_STAGE_DIFFUSION = 3,
    ICRDN_STAGE_CLASSIFIER = 4,
    ICRDN_STAGE_EVAL = 5,
    ICRDN_STAGE_ALL = 6
} icrdn_stage;

/* Opaque experiment configuration. */
typedef struct icrdn_config icrdn_config;

/* Message of the last failed call on this thread; empty after success. */
ICRDN_API const char* icrdn_last_error(void);
ICRDN_API const char* icrdn_status_name(icrdn_status status);

ICRDN_API icrdn_status icrdn_config_load(const char* path, icrdn_config** out);
ICRDN_API icrdn_status icrdn_config_parse(const char* text, icrdn_config** out);
ICRDN_API icrdn_status icrdn_config_preset(const char* name, icrdn_config** out);
ICRDN_API void icrdn_config_free(icrdn_config* config);
/* Sets one key using the config-file value syntax; the result is validated. */
ICRDN_API icrdn_status icrdn_config_set(icrdn_config* config, const char* key, const char* value);
/* Writes the 16-hex-digit config hash plus terminator; `size` >= 17. */
ICRDN_API icrdn_status icrdn_config_hash(const icrdn_config* config, char* buffer, size_t size);
/* Serialised config; release with icrdn_string_free. */
ICRDN_API icrdn_status icrdn_config_serialize(const icrdn_config* config, char** out);

ICRDN_API icrdn_status icrdn_parse_stage(const char* name, icrdn_stage* out);

/* Runs a stage under runs_dir/<hash>/; `report_json` (optional) receives the
   last stage's RunReport. Release with icrdn_string_free. */
ICRDN_API icrdn_status icrdn_run_stage(const icrdn_config* config, icrdn_stage stage, int resume,
                                       const char* runs_dir, int verbose, char** report_json);
/* Merged metrics JSON (sorted keys) of runs_dir/<hash>. */
ICRDN_API icrdn_status icrdn_report(const char* runs_dir, const char* hash, char** metrics_json);
ICRDN_API void icrdn_string_free(char* text);

/* Numerical kernels on caller-owned float64 buffers. */

/* Cumulative products of a linear beta schedule into alpha_bar[steps]. */
ICRDN_API icrdn_status icrdn_noise_schedule(int steps, double beta_start, double beta_end, double* alpha_bar);
/* Summed triplet hinge over n rows of dimension d. */
ICRDN_API icrdn_status icrdn_triplet_loss(const double* anchor, const double* positive, const double* negative,
                                          size_t n, size_t d, double margin, double* out);
/* -log probs[label] over 5 grades. */
ICRDN_API icrdn_status icrdn_cross_entropy(const double* probs, int label, double* out);
/* Inception score of an (n, k) row-major posterior matrix. */
ICRDN_API icrdn_status icrdn_inception_score(const double* probs, size_t n, size_t k, int splits, double* out);
/* Rank-1 identity consistency of paired (n, d) embeddings. */
ICRDN_API icrdn_status icrdn_identity_consistency(const double* baselines, const double* generated, size_t n,
                                                  size_t d, double* out);

#ifdef __cplusplus
}
#endif

#endif
