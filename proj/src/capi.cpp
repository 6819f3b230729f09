// SPDX-License-Identifier: Apache-2.0

#include "p4q/p4q.h"

#include <cstring>
#include <exception>
#include <new>
#include <string>

#include "p4q/checkpoint.hpp"
#include "p4q/config.hpp"
#include "p4q/error.hpp"
#include "p4q/nfq.hpp"
#include "p4q/pipeline.hpp"
#include "p4q/stages.hpp"

struct p4q_codebook {
    p4q::nfq::Codebook value;
};

struct p4q_checkpoint {
    p4q::io::Checkpoint value;
};

struct p4q_config {
    p4q::config::RunConfig value;
};

struct p4q_report {
    p4q::pipeline::ExperimentReport value;
    std::string table;
    std::string records;
};

namespace {

thread_local std::string last_error;

p4q_status status_of(p4q::ErrorKind kind) {
    switch (kind) {
        case p4q::ErrorKind::parameter: return P4Q_ERR_PARAMETER;
        case p4q::ErrorKind::shape: return P4Q_ERR_SHAPE;
        case p4q::ErrorKind::domain: return P4Q_ERR_DOMAIN;
        case p4q::ErrorKind::data: return P4Q_ERR_DATA;
        case p4q::ErrorKind::format: return P4Q_ERR_FORMAT;
        case p4q::ErrorKind::io: return P4Q_ERR_IO;
    }
    return P4Q_ERR_INTERNAL;
}

template <class F>
p4q_status guarded(F&& body) {
    try {
        body();
        last_error.clear();
        return P4Q_OK;
    } catch (const p4q::Error& e) {
        last_error = e.what();
        return status_of(e.kind());
    } catch (const std::bad_alloc&) {
        last_error = "out of memory";
        return P4Q_ERR_INTERNAL;
    } catch (const std::exception& e) {
        last_error = e.what();
        return P4Q_ERR_INTERNAL;
    } catch (...) {
        last_error = "unknown error";
        return P4Q_ERR_INTERNAL;
    }
}

void need(const void* p, const char* what) {
    if (!p) p4q::fail(p4q::ErrorKind::parameter, std::string(what) + " must not be NULL");
}

void copy_text(const std::string& text, char* buf, std::size_t capacity, std::size_t* needed) {
    need(needed, "needed");
    *needed = text.size() + 1;
    if (!buf) return;
    p4q::require(capacity >= *needed, p4q::ErrorKind::parameter, "buffer too small");
    std::memcpy(buf, text.c_str(), *needed);
}

}  // namespace

extern "C" {

const char* p4q_version(void) { return "1.0.0"; }

const char* p4q_last_error(void) { return last_error.c_str(); }

const char* p4q_status_name(p4q_status status) {
    switch (status) {
        case P4Q_OK: return "ok";
        case P4Q_ERR_PARAMETER: return "parameter error";
        case P4Q_ERR_SHAPE: return "shape error";
        case P4Q_ERR_DOMAIN: return "domain error";
        case P4Q_ERR_DATA: return "data error";
        case P4Q_ERR_FORMAT: return "format error";
        case P4Q_ERR_IO: return "io error";
        case P4Q_ERR_INTERNAL: return "internal error";
    }
    return "unknown status";
}

p4q_status p4q_codebook_create(int bits, int uniform, p4q_codebook** out) {
    return guarded([&] {
        need(out, "out");
        const auto kind = uniform ? p4q::nfq::CodebookKind::uniform : p4q::nfq::CodebookKind::normal_float;
        *out = new p4q_codebook{p4q::nfq::build_codebook(bits, kind)};
    });
}

size_t p4q_codebook_size(const p4q_codebook* codebook) { return codebook ? codebook->value.size() : 0; }

p4q_status p4q_codebook_values(const p4q_codebook* codebook, double* out, size_t capacity) {
    return guarded([&] {
        need(codebook, "codebook");
        need(out, "out");
        const auto values = codebook->value.values();
        p4q::require(capacity >= values.size(), p4q::ErrorKind::parameter, "buffer too small");
        std::copy(values.begin(), values.end(), out);
    });
}

void p4q_codebook_destroy(p4q_codebook* codebook) { delete codebook; }

p4q_status p4q_checkpoint_load(const char* path, p4q_checkpoint** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        *out = new p4q_checkpoint{p4q::io::load_checkpoint(path)};
    });
}

p4q_status p4q_checkpoint_store(const p4q_checkpoint* ckpt, const char* path) {
    return guarded([&] {
        need(ckpt, "checkpoint");
        need(path, "path");
        p4q::io::store_checkpoint(path, ckpt->value);
    });
}

p4q_status p4q_checkpoint_from_matrix(const char* name, size_t rows, size_t cols, const double* data,
                                      p4q_checkpoint** out) {
    return guarded([&] {
        need(name, "name");
        need(data, "data");
        need(out, "out");
        const p4q::Matrix m(rows, cols, std::vector<double>(data, data + rows * cols));
        *out = new p4q_checkpoint{{{name, p4q::io::to_fp32(m)}}};
    });
}

size_t p4q_checkpoint_count(const p4q_checkpoint* ckpt) { return ckpt ? ckpt->value.size() : 0; }

const char* p4q_checkpoint_name(const p4q_checkpoint* ckpt, size_t index) {
    if (!ckpt || index >= ckpt->value.size()) return nullptr;
    return ckpt->value[index].name.c_str();
}

uint64_t p4q_checkpoint_size(const p4q_checkpoint* ckpt) {
    return ckpt ? p4q::io::checkpoint_size(ckpt->value) : 0;
}

p4q_status p4q_checkpoint_encode(const p4q_checkpoint* ckpt, uint8_t* buf, size_t capacity, size_t* needed) {
    return guarded([&] {
        need(ckpt, "checkpoint");
        need(needed, "needed");
        const std::vector<std::uint8_t> bytes = p4q::io::encode_checkpoint(ckpt->value);
        *needed = bytes.size();
        if (!buf) return;
        p4q::require(capacity >= bytes.size(), p4q::ErrorKind::parameter, "buffer too small");
        std::copy(bytes.begin(), bytes.end(), buf);
    });
}

p4q_status p4q_checkpoint_quantize(const p4q_checkpoint* ckpt, int bits, size_t block_size, unsigned threads,
                                   p4q_checkpoint** out) {
    return guarded([&] {
        need(ckpt, "checkpoint");
        need(out, "out");
        *out = new p4q_checkpoint{p4q::io::quantize_checkpoint(ckpt->value, bits, block_size, threads)};
    });
}

p4q_status p4q_checkpoint_dequantize(const p4q_checkpoint* ckpt, p4q_checkpoint** out) {
    return guarded([&] {
        need(ckpt, "checkpoint");
        need(out, "out");
        *out = new p4q_checkpoint{p4q::io::dequantize_checkpoint(ckpt->value)};
    });
}

p4q_status p4q_checkpoint_stats(const p4q_checkpoint* original, const p4q_checkpoint* quantized,
                                p4q_quant_stats* out) {
    return guarded([&] {
        need(original, "original");
        need(quantized, "quantized");
        need(out, "out");
        const auto s = p4q::io::checkpoint_stats(original->value, quantized->value);
        *out = {s.tensors, s.params, s.mse, s.max_abs_err, s.bits_per_param, s.compression_ratio_vs_fp32};
    });
}

void p4q_checkpoint_destroy(p4q_checkpoint* ckpt) { delete ckpt; }

p4q_status p4q_config_default(p4q_config** out) {
    return guarded([&] {
        need(out, "out");
        *out = new p4q_config{};
    });
}

p4q_status p4q_config_parse(const char* text, p4q_config** out) {
    return guarded([&] {
        need(text, "text");
        need(out, "out");
        *out = new p4q_config{p4q::config::parse(text)};
    });
}

p4q_status p4q_config_load(const char* path, p4q_config** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        *out = new p4q_config{p4q::config::load(path)};
    });
}

p4q_status p4q_config_set(p4q_config* config, const char* key, const char* value) {
    return guarded([&] {
        need(config, "config");
        need(key, "key");
        need(value, "value");
        p4q::config::RunConfig next = config->value;
        p4q::config::set(next, key, value);
        p4q::pipeline::validate(next.experiment);
        config->value = std::move(next);
    });
}

p4q_status p4q_config_render(const p4q_config* config, char* buf, size_t capacity, size_t* needed) {
    return guarded([&] {
        need(config, "config");
        copy_text(p4q::config::render(config->value), buf, capacity, needed);
    });
}

void p4q_config_destroy(p4q_config* config) { delete config; }

p4q_status p4q_train_base(const p4q_config* config, p4q_base_summary* out) {
    return guarded([&] {
        need(config, "config");
        need(out, "out");
        const auto s = p4q::stages::train_base(config->value);
        *out = {s.initial_loss, s.final_loss, s.fp32_bytes, s.quantized_bytes};
    });
}

p4q_status p4q_pretrain_lora(const p4q_config* config, p4q_pretrain_summary* out) {
    return guarded([&] {
        need(config, "config");
        need(out, "out");
        const auto s = p4q::stages::pretrain_lora(config->value);
        *out = {s.initial_loss, s.final_loss, s.adapters};
    });
}

p4q_status p4q_adapt(const p4q_config* config, size_t speaker, p4q_adapt_summary* out) {
    return guarded([&] {
        need(config, "config");
        need(out, "out");
        const auto s = p4q::stages::adapt(config->value, speaker);
        *out = {s.speaker_id, s.initial_loss, s.final_loss};
    });
}

p4q_status p4q_evaluate(const p4q_config* config, p4q_eval_summary* out, p4q_eval_row* rows, size_t capacity) {
    return guarded([&] {
        need(config, "config");
        need(out, "out");
        const auto s = p4q::stages::evaluate(config->value);
        *out = {s.clean_fp32, s.clean_quantized, s.speakers.size()};
        if (!rows) return;
        for (std::size_t i = 0; i < s.speakers.size() && i < capacity; ++i) {
            const auto& r = s.speakers[i];
            rows[i] = {r.speaker_id, r.quantized_loss, r.adapted_loss.value_or(0.0), r.adapted_loss ? 1 : 0};
        }
    });
}

p4q_status p4q_bench_run(const p4q_config* config, p4q_report** out) {
    return guarded([&] {
        need(config, "config");
        need(out, "out");
        auto report = p4q::pipeline::run_benchmark(config->value.experiment);
        std::string table = p4q::pipeline::render_table(report);
        std::string records = p4q::pipeline::render_records(report);
        *out = new p4q_report{std::move(report), std::move(table), std::move(records)};
    });
}

p4q_status p4q_report_system(const p4q_report* report, size_t index, p4q_system_summary* out) {
    return guarded([&] {
        need(report, "report");
        need(out, "out");
        p4q::require(index < report->value.systems.size(), p4q::ErrorKind::parameter, "system index out of range");
        const auto& s = report->value.systems[index];
        *out = {p4q::pipeline::system_name(s.system), s.mean, s.stddev, s.relative_reduction_pct};
    });
}

size_t p4q_report_seed_count(const p4q_report* report) { return report ? report->value.seeds.size() : 0; }

p4q_status p4q_report_seed(const p4q_report* report, size_t index, p4q_seed_result* out) {
    return guarded([&] {
        need(report, "report");
        need(out, "out");
        p4q::require(index < report->value.seeds.size(), p4q::ErrorKind::parameter, "seed index out of range");
        const auto& s = report->value.seeds[index];
        out->seed = s.seed;
        std::copy(s.mean_loss.begin(), s.mean_loss.end(), out->mean_loss);
        out->fp32_reference = s.fp32_reference;
        out->clean_fp32 = s.clean_fp32;
        out->clean_nf4 = s.clean_nf4;
    });
}

p4q_status p4q_report_sizes(const p4q_report* report, p4q_size_summary* out) {
    return guarded([&] {
        need(report, "report");
        need(out, "out");
        const auto& r = report->value;
        *out = {r.fp32_model_bytes,    r.quantized_model_bytes, r.payload_compression_ratio,
                r.base_weight_scalars, r.adapter_scalars,       r.adapter_fraction};
    });
}

p4q_status p4q_report_table(const p4q_report* report, char* buf, size_t capacity, size_t* needed) {
    return guarded([&] {
        need(report, "report");
        copy_text(report->table, buf, capacity, needed);
    });
}

p4q_status p4q_report_records(const p4q_report* report, char* buf, size_t capacity, size_t* needed) {
    return guarded([&] {
        need(report, "report");
        copy_text(report->records, buf, capacity, needed);
    });
}

p4q_status p4q_report_write(const p4q_report* report, const p4q_config* config) {
    return guarded([&] {
        need(report, "report");
        need(config, "config");
        auto bytes = [](const std::string& s) {
            return std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
        };
        p4q::io::write_file_atomic(config->value.report_file, bytes(report->table));
        p4q::io::write_file_atomic(config->value.records_file, bytes(report->records));
    });
}

void p4q_report_destroy(p4q_report* report) { delete report; }

p4q_status p4q_compare_schemes(int bits, size_t block_size, size_t trials, uint64_t seed, size_t rows, size_t cols,
                               p4q_scheme_comparison* out) {
    return guarded([&] {
        need(out, "out");
        const auto c = p4q::nfq::compare_schemes(bits, block_size, trials, seed, rows, cols);
        *out = {c.trials, c.nf_mse, c.uniform_mse, c.nf_wins};
    });
}

}  // extern "C"
