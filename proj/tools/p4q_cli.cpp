// SPDX-License-Identifier: Apache-2.0
//
// p4q command-line tool. A thin shell over the C API in p4q/p4q.h.
//
// Exit codes: 0 success, 1 usage or parameter error, 2 data, format or io error.

#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "p4q/p4q.h"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

struct Failure {
    p4q_status status;
};

struct UsageError {
    std::string what;
};

void check(p4q_status s) {
    if (s != P4Q_OK) throw Failure{s};
}

template <class T, void (*Destroy)(T*)>
struct Handle {
    T* ptr = nullptr;
    Handle() = default;
    Handle(const Handle&) = delete;
    Handle& operator=(const Handle&) = delete;
    ~Handle() { Destroy(ptr); }
    T** out() { return &ptr; }
    T* get() const { return ptr; }
};

using Codebook = Handle<p4q_codebook, p4q_codebook_destroy>;
using Checkpoint = Handle<p4q_checkpoint, p4q_checkpoint_destroy>;
using Config = Handle<p4q_config, p4q_config_destroy>;
using Report = Handle<p4q_report, p4q_report_destroy>;

void load_config(Config& config, const std::string& path, const std::vector<std::string>& overrides) {
    if (path.empty()) {
        check(p4q_config_default(config.out()));
    } else {
        check(p4q_config_load(path.c_str(), config.out()));
    }
    for (const std::string& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw UsageError{"--set expects key=value, got '" + kv + "'"};
        }
        check(p4q_config_set(config.get(), kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
    }
}

template <class F>
std::string fetch_text(F&& call) {
    std::size_t needed = 0;
    check(call(nullptr, 0, &needed));
    std::string text(needed, '\0');
    check(call(text.data(), text.size(), &needed));
    text.resize(needed - 1);
    return text;
}

int exit_code(p4q_status s) {
    switch (s) {
        case P4Q_OK: return 0;
        case P4Q_ERR_PARAMETER: return kExitUsage;
        default: return kExitData;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"P4Q: NormalFloat quantization and LoRA speaker adaptation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", p4q_version());

    std::string config_path;
    std::vector<std::string> overrides;
    auto add_config = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key = value configuration file")->check(CLI::ExistingFile);
        cmd->add_option("--set", overrides, "override one setting, key=value (repeatable)");
    };

    int bits = 4;
    std::size_t block = 64;
    bool uniform = false;
    std::string in_path, out_path, quant_path;
    unsigned threads = 1;
    std::size_t speaker = 0;
    std::size_t trials = 100;
    std::uint64_t seed = 1;
    std::size_t rows = 256, cols = 256;

    auto* codebook = app.add_subcommand("codebook", "print the codebook values, ascending");
    codebook->add_option("--bits", bits, "bit width k")->required();
    codebook->add_flag("--uniform", uniform, "evenly spaced codebook instead of NormalFloat");

    auto* quantize = app.add_subcommand("quantize", "quantize every weight matrix of a checkpoint");
    quantize->add_option("--in", in_path, "input checkpoint")->required();
    quantize->add_option("--out", out_path, "output checkpoint")->required();
    quantize->add_option("--bits", bits, "bit width k");
    quantize->add_option("--block", block, "block size B");
    quantize->add_option("--threads", threads, "worker threads");

    auto* dequantize = app.add_subcommand("dequantize", "expand a quantized checkpoint to fp32");
    dequantize->add_option("--in", in_path, "input checkpoint")->required();
    dequantize->add_option("--out", out_path, "output checkpoint")->required();

    auto* stats = app.add_subcommand("stats", "quantization error and size of a quantized checkpoint");
    stats->add_option("--in", in_path, "original fp32 checkpoint")->required();
    stats->add_option("--quant", quant_path, "quantized checkpoint")->required();

    auto* train_base = app.add_subcommand("train-base", "train and quantize the base model");
    add_config(train_base);
    auto* pretrain = app.add_subcommand("pretrain-lora", "train shared adapters on the speaker pool");
    add_config(pretrain);
    auto* adapt = app.add_subcommand("adapt", "adapt the pretrained adapters to one test speaker");
    add_config(adapt);
    adapt->add_option("--speaker", speaker, "test speaker index")->required();
    auto* eval = app.add_subcommand("eval", "score the stored models on the test speakers");
    add_config(eval);
    auto* bench = app.add_subcommand("bench", "run the full five-system benchmark");
    add_config(bench);
    auto* show = app.add_subcommand("config", "print every setting with its effective value");
    add_config(show);

    auto* compare = app.add_subcommand("compare-schemes", "NormalFloat vs uniform error on Gaussian matrices");
    compare->add_option("--bits", bits, "bit width k")->required();
    compare->add_option("--block", block, "block size B")->required();
    compare->add_option("--trials", trials, "number of matrices")->required();
    compare->add_option("--seed", seed, "random seed");
    compare->add_option("--rows", rows, "matrix rows");
    compare->add_option("--cols", cols, "matrix columns");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    try {
        if (*codebook) {
            Codebook cb;
            check(p4q_codebook_create(bits, uniform ? 1 : 0, cb.out()));
            std::vector<double> values(p4q_codebook_size(cb.get()));
            check(p4q_codebook_values(cb.get(), values.data(), values.size()));
            for (double v : values) std::printf("%.17g\n", v);
        } else if (*quantize) {
            Checkpoint in, out;
            check(p4q_checkpoint_load(in_path.c_str(), in.out()));
            check(p4q_checkpoint_quantize(in.get(), bits, block, threads, out.out()));
            check(p4q_checkpoint_store(out.get(), out_path.c_str()));
            std::printf("wrote %s: %zu tensors, %llu bytes (input %llu bytes)\n", out_path.c_str(),
                        p4q_checkpoint_count(out.get()),
                        static_cast<unsigned long long>(p4q_checkpoint_size(out.get())),
                        static_cast<unsigned long long>(p4q_checkpoint_size(in.get())));
        } else if (*dequantize) {
            Checkpoint in, out;
            check(p4q_checkpoint_load(in_path.c_str(), in.out()));
            check(p4q_checkpoint_dequantize(in.get(), out.out()));
            check(p4q_checkpoint_store(out.get(), out_path.c_str()));
            std::printf("wrote %s: %zu tensors, %llu bytes\n", out_path.c_str(), p4q_checkpoint_count(out.get()),
                        static_cast<unsigned long long>(p4q_checkpoint_size(out.get())));
        } else if (*stats) {
            Checkpoint orig, quant;
            check(p4q_checkpoint_load(in_path.c_str(), orig.out()));
            check(p4q_checkpoint_load(quant_path.c_str(), quant.out()));
            p4q_quant_stats s{};
            check(p4q_checkpoint_stats(orig.get(), quant.get(), &s));
            std::printf("tensors            %zu\n", s.tensors);
            std::printf("params             %llu\n", static_cast<unsigned long long>(s.params));
            std::printf("mse                %.9e\n", s.mse);
            std::printf("max_abs_err        %.9e\n", s.max_abs_err);
            std::printf("bits_per_param     %.17g\n", s.bits_per_param);
            std::printf("compression_ratio  %.17g\n", s.compression_ratio);
        } else if (*train_base) {
            Config config;
            load_config(config, config_path, overrides);
            p4q_base_summary s{};
            check(p4q_train_base(config.get(), &s));
            std::printf("base training loss %.9e -> %.9e\n", s.initial_loss, s.final_loss);
            std::printf("checkpoint bytes: fp32 %llu, quantized %llu\n",
                        static_cast<unsigned long long>(s.fp32_bytes),
                        static_cast<unsigned long long>(s.quantized_bytes));
        } else if (*pretrain) {
            Config config;
            load_config(config, config_path, overrides);
            p4q_pretrain_summary s{};
            check(p4q_pretrain_lora(config.get(), &s));
            std::printf("pool test loss %.9e -> %.9e (%zu adapters)\n", s.initial_loss, s.final_loss, s.adapters);
        } else if (*adapt) {
            Config config;
            load_config(config, config_path, overrides);
            p4q_adapt_summary s{};
            check(p4q_adapt(config.get(), speaker, &s));
            std::printf("speaker %llu test loss %.9e -> %.9e\n", static_cast<unsigned long long>(s.speaker_id),
                        s.initial_loss, s.final_loss);
        } else if (*eval) {
            Config config;
            load_config(config, config_path, overrides);
            p4q_eval_summary s{};
            check(p4q_evaluate(config.get(), &s, nullptr, 0));
            std::vector<p4q_eval_row> rows_out(s.speakers);
            check(p4q_evaluate(config.get(), &s, rows_out.data(), rows_out.size()));
            std::printf("clean held-out loss: fp32 %.9e, quantized %.9e\n", s.clean_fp32, s.clean_quantized);
            std::printf("%8s %16s %16s\n", "speaker", "quantized", "adapted");
            for (const p4q_eval_row& r : rows_out) {
                if (r.has_adapted) {
                    std::printf("%8llu %16.9e %16.9e\n", static_cast<unsigned long long>(r.speaker_id),
                                r.quantized_loss, r.adapted_loss);
                } else {
                    std::printf("%8llu %16.9e %16s\n", static_cast<unsigned long long>(r.speaker_id),
                                r.quantized_loss, "-");
                }
            }
        } else if (*bench) {
            Config config;
            load_config(config, config_path, overrides);
            Report report;
            check(p4q_bench_run(config.get(), report.out()));
            check(p4q_report_write(report.get(), config.get()));
            const std::string table = fetch_text([&](char* b, std::size_t c, std::size_t* n) {
                return p4q_report_table(report.get(), b, c, n);
            });
            std::fputs(table.c_str(), stdout);
        } else if (*show) {
            Config config;
            load_config(config, config_path, overrides);
            const std::string text = fetch_text([&](char* b, std::size_t c, std::size_t* n) {
                return p4q_config_render(config.get(), b, c, n);
            });
            std::fputs(text.c_str(), stdout);
        } else if (*compare) {
            p4q_scheme_comparison c{};
            check(p4q_compare_schemes(bits, block, trials, seed, rows, cols, &c));
            std::printf("%-10s %16s\n", "scheme", "mean_mse");
            std::printf("%-10s %16.9e\n", "nf", c.nf_mse);
            std::printf("%-10s %16.9e\n", "uniform", c.uniform_mse);
            std::printf("nf lower in %zu/%zu trials (bits=%d, block=%zu, %zux%zu)\n", c.nf_wins, c.trials, bits,
                        block, rows, cols);
        }
    } catch (const Failure& f) {
        const char* msg = p4q_last_error();
        std::fprintf(stderr, "error: %s%s%s\n", p4q_status_name(f.status), *msg ? ": " : "", msg);
        return exit_code(f.status);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what.c_str());
        return kExitUsage;
    }
    return 0;
}
