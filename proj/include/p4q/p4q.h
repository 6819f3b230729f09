/* SPDX-License-Identifier: Apache-2.0 */

/*
 * C interface to libp4q: NormalFloat quantization, LoRA adapters and the
 * quantize -> pretrain -> adapt pipeline.
 *
 * Objects are opaque handles released with the matching *_destroy call
 * (NULL is accepted). Every fallible call returns a p4q_status; on failure
 * p4q_last_error() describes the most recent error of the calling thread.
 *
 * Text results use a caller buffer: pass buf = NULL to learn the size,
 * *needed always receives the byte count including the terminating NUL.
 * A buffer that is too small yields P4Q_ERR_PARAMETER.
 */

#ifndef P4Q_P4Q_H
#define P4Q_P4Q_H

#include <stddef.h>
#include <stdint.h>

#if defined(P4Q_BUILDING_LIBRARY)
#define P4Q_API __attribute__((visibility("default")))
#else
#define P4Q_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum p4q_status {
    P4Q_OK = 0,
    P4Q_ERR_PARAMETER = 1,
    P4Q_ERR_SHAPE = 2,
    P4Q_ERR_DOMAIN = 3,
    P4Q_ERR_DATA = 4,
    P4Q_ERR_FORMAT = 5,
    P4Q_ERR_IO = 6,
    P4Q_ERR_INTERNAL = 7
} p4q_status;

P4Q_API const char* p4q_version(void);
P4Q_API const char* p4q_last_error(void);
P4Q_API const char* p4q_status_name(p4q_status status);

/* ---- codebooks ---- */

typedef struct p4q_codebook p4q_codebook;

/* uniform = 0 builds the NormalFloat codebook, otherwise the evenly spaced one. */
P4Q_API p4q_status p4q_codebook_create(int bits, int uniform, p4q_codebook** out);
P4Q_API size_t p4q_codebook_size(const p4q_codebook* codebook);
P4Q_API p4q_status p4q_codebook_values(const p4q_codebook* codebook, double* out, size_t capacity);
P4Q_API void p4q_codebook_destroy(p4q_codebook* codebook);

/* ---- checkpoints ---- */

typedef struct p4q_checkpoint p4q_checkpoint;

typedef struct p4q_quant_stats {
    size_t tensors;
    uint64_t params;
    double mse;
    double max_abs_err;
    double bits_per_param;
    double compression_ratio;
} p4q_quant_stats;

P4Q_API p4q_status p4q_checkpoint_load(const char* path, p4q_checkpoint** out);
P4Q_API p4q_status p4q_checkpoint_store(const p4q_checkpoint* ckpt, const char* path);
/* One fp32 record holding a row-major rows x cols matrix. */
P4Q_API p4q_status p4q_checkpoint_from_matrix(const char* name, size_t rows, size_t cols, const double* data,
                                              p4q_checkpoint** out);
P4Q_API size_t p4q_checkpoint_count(const p4q_checkpoint* ckpt);
/* NULL when index is out of range. */
P4Q_API const char* p4q_checkpoint_name(const p4q_checkpoint* ckpt, size_t index);
P4Q_API uint64_t p4q_checkpoint_size(const p4q_checkpoint* ckpt);
P4Q_API p4q_status p4q_checkpoint_encode(const p4q_checkpoint* ckpt, uint8_t* buf, size_t capacity, size_t* needed);
P4Q_API p4q_status p4q_checkpoint_quantize(const p4q_checkpoint* ckpt, int bits, size_t block_size, unsigned threads,
                                           p4q_checkpoint** out);
P4Q_API p4q_status p4q_checkpoint_dequantize(const p4q_checkpoint* ckpt, p4q_checkpoint** out);
P4Q_API p4q_status p4q_checkpoint_stats(const p4q_checkpoint* original, const p4q_checkpoint* quantized,
                                        p4q_quant_stats* out);
P4Q_API void p4q_checkpoint_destroy(p4q_checkpoint* ckpt);

/* ---- configuration ---- */

typedef struct p4q_config p4q_config;

P4Q_API p4q_status p4q_config_default(p4q_config** out);
P4Q_API p4q_status p4q_config_parse(const char* text, p4q_config** out);
P4Q_API p4q_status p4q_config_load(const char* path, p4q_config** out);
P4Q_API p4q_status p4q_config_set(p4q_config* config, const char* key, const char* value);
P4Q_API p4q_status p4q_config_render(const p4q_config* config, char* buf, size_t capacity, size_t* needed);
P4Q_API void p4q_config_destroy(p4q_config* config);

/* ---- file-backed pipeline stages ---- */

typedef struct p4q_base_summary {
    double initial_loss;
    double final_loss;
    uint64_t fp32_bytes;
    uint64_t quantized_bytes;
} p4q_base_summary;

typedef struct p4q_pretrain_summary {
    double initial_loss;
    double final_loss;
    size_t adapters;
} p4q_pretrain_summary;

typedef struct p4q_adapt_summary {
    uint64_t speaker_id;
    double initial_loss;
    double final_loss;
} p4q_adapt_summary;

typedef struct p4q_eval_row {
    uint64_t speaker_id;
    double quantized_loss;
    double adapted_loss;
    int has_adapted;
} p4q_eval_row;

typedef struct p4q_eval_summary {
    double clean_fp32;
    double clean_quantized;
    size_t speakers;
} p4q_eval_summary;

P4Q_API p4q_status p4q_train_base(const p4q_config* config, p4q_base_summary* out);
P4Q_API p4q_status p4q_pretrain_lora(const p4q_config* config, p4q_pretrain_summary* out);
P4Q_API p4q_status p4q_adapt(const p4q_config* config, size_t speaker, p4q_adapt_summary* out);
/* rows may be NULL; otherwise min(capacity, out->speakers) rows are written. */
P4Q_API p4q_status p4q_evaluate(const p4q_config* config, p4q_eval_summary* out, p4q_eval_row* rows,
                                size_t capacity);

/* ---- benchmark ---- */

typedef struct p4q_report p4q_report;

#define P4Q_SYSTEM_COUNT 5

typedef struct p4q_system_summary {
    const char* name; /* static storage */
    double mean;
    double stddev;
    double relative_reduction_pct;
} p4q_system_summary;

typedef struct p4q_seed_result {
    uint64_t seed;
    double mean_loss[P4Q_SYSTEM_COUNT]; /* same order as p4q_report_system */
    double fp32_reference;
    double clean_fp32;
    double clean_nf4;
} p4q_seed_result;

typedef struct p4q_size_summary {
    uint64_t fp32_bytes;
    uint64_t quantized_bytes;
    double payload_compression_ratio;
    size_t base_weight_scalars;
    size_t adapter_scalars;
    double adapter_fraction;
} p4q_size_summary;

P4Q_API p4q_status p4q_bench_run(const p4q_config* config, p4q_report** out);
P4Q_API p4q_status p4q_report_system(const p4q_report* report, size_t index, p4q_system_summary* out);
P4Q_API size_t p4q_report_seed_count(const p4q_report* report);
P4Q_API p4q_status p4q_report_seed(const p4q_report* report, size_t index, p4q_seed_result* out);
P4Q_API p4q_status p4q_report_sizes(const p4q_report* report, p4q_size_summary* out);
P4Q_API p4q_status p4q_report_table(const p4q_report* report, char* buf, size_t capacity, size_t* needed);
P4Q_API p4q_status p4q_report_records(const p4q_report* report, char* buf, size_t capacity, size_t* needed);
/* Writes the table and the records to the report_file and records_file of config. */
P4Q_API p4q_status p4q_report_write(const p4q_report* report, const p4q_config* config);
P4Q_API void p4q_report_destroy(p4q_report* report);

/* ---- scheme comparison ---- */

typedef struct p4q_scheme_comparison {
    size_t trials;
    double nf_mse;
    double uniform_mse;
    size_t nf_wins;
} p4q_scheme_comparison;

/* trials N(0, 1) matrices of rows x cols. */
P4Q_API p4q_status p4q_compare_schemes(int bits, size_t block_size, size_t trials, uint64_t seed, size_t rows,
                                       size_t cols, p4q_scheme_comparison* out);

#ifdef __cplusplus
}
#endif

#endif /* P4Q_P4Q_H */
