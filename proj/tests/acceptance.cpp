// SPDX-License-Identifier: Apache-2.0
//
// Acceptance checks. Prints one PASS/FAIL line per criterion.
//
//   p4q_acceptance            run all nine
//   p4q_acceptance 3 7        run the listed ones
//
// Exit status is 0 only if every selected criterion passed.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "p4q/checkpoint.hpp"
#include "p4q/lora.hpp"
#include "p4q/net.hpp"
#include "p4q/nfq.hpp"
#include "p4q/pipeline.hpp"

#ifndef P4Q_CLI_PATH
#error "P4Q_CLI_PATH must name the command-line binary"
#endif

namespace {

namespace fs = std::filesystem;
using namespace p4q;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

const fs::path& work_dir() {
    static const fs::path d = [] {
        const fs::path p = fs::temp_directory_path() / "p4q_acceptance";
        fs::create_directories(p);
        return p;
    }();
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Runs the CLI, returning its exit code; stdout goes to `out`.
int cli(const std::string& args, std::string* out = nullptr) {
    const fs::path o = work_dir() / "cli_stdout.txt";
    const std::string cmd = std::string("'") + P4Q_CLI_PATH + "' " + args + " >'" + o.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    if (out) *out = slurp(o);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// 1. NF4 codebook against the bisection oracle.
Outcome codebook_correctness() {
    const nfq::Codebook cb = nfq::build_nf_codebook(4);
    const std::vector<double> want = oracle::nf_codebook(4);
    if (cb.size() != 16 || want.size() != 16) return {false, "codebook does not have 16 entries"};
    double worst = 0.0;
    for (std::size_t i = 0; i < 16; ++i) worst = std::max(worst, std::fabs(cb[i] - want[i]));
    const bool ends = cb[0] == -1.0 && cb[15] == 1.0;
    const bool zero = std::count(cb.values().begin(), cb.values().end(), 0.0) == 1;
    return {worst <= 1e-6 && ends && zero,
            fmt("max |value - oracle| = %.3g (limit 1e-6), endpoints %s, exact zero %s", worst, ends ? "+-1" : "WRONG",
                zero ? "present" : "MISSING")};
}

// 2. Stored codes against the exhaustive nearest entry.
Outcome nearest_code() {
    const nfq::Codebook cb = nfq::build_nf_codebook(4);
    const std::vector<double> values(cb.values().begin(), cb.values().end());
    RngStream rng(2024);
    const std::size_t blocks = 100, block = 1000;
    // One block per row, each with its own spread so scales differ widely.
    Matrix w(blocks, block);
    for (std::size_t b = 0; b < blocks; ++b) {
        const double spread = std::exp(6.0 * rng.uniform() - 3.0);
        const Matrix row = random_normal(rng, 1, block, spread);
        for (std::size_t j = 0; j < block; ++j) w(b, j) = row[j];
    }
    const nfq::QuantizedTensor qt = nfq::quantize_tensor(w, cb, block);
    const std::vector<std::uint32_t> codes = nfq::unpack_codes(qt.codes, 4, w.size());
    std::size_t mismatches = 0;
    for (std::size_t b = 0; b < blocks; ++b) {
        double absmax = 0.0;
        for (std::size_t j = 0; j < block; ++j) absmax = std::max(absmax, std::fabs(w(b, j)));
        const double scale = static_cast<float>(absmax);
        if (qt.scales[b] != static_cast<float>(absmax)) ++mismatches;
        for (std::size_t j = 0; j < block; ++j)
            if (codes[b * block + j] != oracle::argmin(values, w(b, j) / scale)) ++mismatches;
    }
    return {mismatches == 0, fmt("%zu values in %zu blocks, %zu mismatches", w.size(), blocks, mismatches)};
}

// 3. NF4 against uniform-4 on N(0, 1) matrices.
Outcome nf_beats_uniform() {
    const nfq::SchemeComparison c = nfq::compare_schemes(4, 64, 100, 7, 256, 256);
    return {c.nf_wins >= 95, fmt("NF4 lower MSE in %zu/100 matrices (need >= 95); mean MSE NF4 %.4g, uniform %.4g",
                                 c.nf_wins, c.nf_mse, c.uniform_mse)};
}

// 4. Bits per parameter, file sizes and the toy model's payload ratio.
Outcome compression_arithmetic() {
    std::vector<std::string> problems;
    RngStream rng(4);
    const fs::path dir = work_dir();

    // Bits per parameter through the stats command.
    const io::Checkpoint big{{"w", io::to_fp32(random_normal(rng, 256, 256, 1.0))}};
    io::store_checkpoint(dir / "big.nfq", big);
    std::string out;
    double bpp = 0.0, ratio = 0.0;
    if (cli("quantize --in " + q(dir / "big.nfq") + " --out " + q(dir / "big4.nfq") + " --bits 4 --block 64") != 0 ||
        cli("stats --in " + q(dir / "big.nfq") + " --quant " + q(dir / "big4.nfq"), &out) != 0) {
        problems.push_back("stats command failed");
    } else {
        std::istringstream in(out);
        for (std::string key; in >> key;) {
            if (key == "bits_per_param") in >> bpp;
            else if (key == "compression_ratio") in >> ratio;
            else in.ignore(1 << 20, '\n');
        }
        if (bpp != 4.0 + 32.0 / 64.0) problems.push_back(fmt("bits/param %.17g", bpp));
        if (ratio != 32.0 / (4.0 + 32.0 / 64.0)) problems.push_back(fmt("ratio %.17g", ratio));
    }

    // File sizes, each worked out by hand from the record layout:
    // 12-byte header; per record 2 + name + 1 + 1 + 4 + 1 + 8 * ndim, then the payload.
    struct Case {
        const char* what;
        io::Checkpoint ckpt;
        std::uint64_t bytes;
    };
    auto quantized = [&](const char* name, std::size_t r, std::size_t c, int k, std::size_t b) {
        return io::TensorRecord{name, nfq::quantize_tensor(random_normal(rng, r, c, 1.0), nfq::build_nf_codebook(k), b)};
    };
    const std::vector<Case> cases{
        // 26 + 64 * 4 / 8 code bytes + 1 scale
        {"8x8 k=4 B=64", {quantized("w", 8, 8, 4, 64)}, 12 + 26 + 32 + 4},
        // 27 + ceil(15 * 3 / 8) + 4 scales; 18 + 3 floats
        {"3x5 k=3 B=4 + fp32[3]",
         {quantized("ab", 3, 5, 3, 4), io::TensorRecord{"b", io::to_fp32(random_normal(rng, 3, 1, 1.0), true)}},
         12 + (27 + 6 + 16) + (18 + 12)},
        // 30 + 100 * 2 / 8 code bytes + ceil(100 / 30) scales
        {"10x10 k=2 B=30", {quantized("layer", 10, 10, 2, 30)}, 12 + 30 + 25 + 16},
    };
    std::string sizes;
    for (const Case& c : cases) {
        const fs::path p = dir / "size_case.nfq";
        io::store_checkpoint(p, c.ckpt);
        const auto got = fs::file_size(p);
        sizes += fmt("%s%llu", sizes.empty() ? "" : "/", static_cast<unsigned long long>(got));
        if (got != c.bytes || io::checkpoint_size(c.ckpt) != c.bytes)
            problems.push_back(fmt("%s: %llu bytes, expected %llu", c.what, static_cast<unsigned long long>(got),
                                   static_cast<unsigned long long>(c.bytes)));
    }

    // Whole toy model, every weight matrix at k=4, B=64; biases stay fp32.
    RngStream mrng(5);
    const io::Checkpoint fp = io::model_to_checkpoint(net::make_model(net::ModelShape{}, mrng, 0.1));
    const io::Checkpoint qc = io::quantize_checkpoint(fp, 4, 64);
    std::uint64_t fp_payload = 0, q_payload = 0;
    for (const auto& t : fp) fp_payload += io::payload_size(t);
    for (const auto& t : qc) q_payload += io::payload_size(t);
    const double model_ratio = static_cast<double>(fp_payload) / static_cast<double>(q_payload);
    if (model_ratio < 6.5 || model_ratio > 7.3) problems.push_back(fmt("model payload ratio %.4f", model_ratio));

    std::string detail = fmt("bits/param %.17g, ratio %.17g; file sizes %s bytes; toy model payload ratio %.4f "
                             "(%llu / %llu bytes, limit [6.5, 7.3])",
                             bpp, ratio, sizes.c_str(), model_ratio, static_cast<unsigned long long>(fp_payload),
                             static_cast<unsigned long long>(q_payload));
    for (const auto& p : problems) detail += "; " + p;
    return {problems.empty(), detail};
}

// 5. Adapted product against merge-then-multiply.
Outcome lora_equivalence() {
    RngStream rng(5);
    double worst = 0.0;
    bool transparent = true;
    for (int t = 0; t < 50; ++t) {
        RngStream trial = rng.child(static_cast<std::uint64_t>(t));
        const std::size_t o = 1 + trial.below(48), i = 1 + trial.below(48);
        const std::size_t r = 1 + trial.below(std::min(o, i));
        const int bits = 2 + static_cast<int>(trial.below(7));
        const nfq::Codebook cb = nfq::build_nf_codebook(bits);
        const nfq::QuantizedTensor qt = nfq::quantize_tensor(random_normal(trial, o, i, 1.0), cb, 1 + trial.below(128));
        const lora::LoraAdapter a{random_normal(trial, r, i, 1.0), random_normal(trial, o, r, 1.0),
                                  0.5 + 8.0 * trial.uniform()};
        const Matrix x = random_normal(trial, i, 1 + trial.below(16), 1.0);
        const Matrix merged = lora::merge(qt, cb, a);
        worst = std::max(worst, oracle::relative_error(lora::apply_adapted(qt, cb, a, x), oracle::matmul(merged, x)));

        const lora::LoraAdapter fresh = lora::init_adapter(o, i, r, lora::default_alpha(r), trial);
        transparent &= lora::apply_adapted(qt, cb, fresh, x) == lora::apply_adapted(qt, cb, std::nullopt, x);
    }
    // Whole model: fresh adapters everywhere change nothing.
    RngStream mrng(6);
    const net::ToyModel base =
        net::quantize_weights(net::make_model(net::ModelShape{}, mrng, 0.1), nfq::build_nf_codebook(4), 64);
    const net::ToyModel adapted = net::attach_fresh_adapters(base, 4, 8.0, mrng);
    const Matrix x = random_normal(mrng, 16, 16, 1.0);
    transparent &= net::forward(adapted, x) == net::forward(base, x);
    return {worst <= 1e-9 && transparent,
            fmt("max relative Frobenius error %.3g over 50 cases (limit 1e-9); fresh adapters %s", worst,
                transparent ? "bit-identical" : "CHANGE THE OUTPUT")};
}

// 6. Reverse-mode gradients against central differences.
Outcome gradient_correctness() {
    using namespace gradcheck;
    RngStream rng(6);
    const Matrix x = random_normal(rng, 4, 5, 1.0);
    const Matrix t = random_normal(rng, 3, 5, 1.0);
    net::ToyModel a = linear_only(rng), b = linear_tanh(rng), c = linear_attention(rng);
    const double ea = max_gradient_error(a, x, t, TrainMode::fft);
    const double eb = max_gradient_error(b, x, t, TrainMode::fft);
    const double ec = max_gradient_error(c, x, t, TrainMode::fft);
    // The attention model again, quantized, through non-zero adapters.
    net::ToyModel d = net::quantize_weights(linear_attention(rng), nfq::build_nf_codebook(4), 16);
    for (auto& [name, w] : d.weights())
        w->adapter = lora::LoraAdapter{random_normal(rng, 2, w->value.cols(), 0.5),
                                       random_normal(rng, w->value.rows(), 2, 0.5), 3.0};
    const double ed = max_gradient_error(d, x, t, TrainMode::lora);
    const double worst = std::max({ea, eb, ec, ed});
    return {worst < 1e-4, fmt("max relative error: linear %.2g, linear+tanh %.2g, linear+attention %.2g, "
                              "attention via adapters %.2g (limit 1e-4)",
                              ea, eb, ec, ed)};
}

// 7. Ordering of the systems over ten seeds of the default configuration.
Outcome p4q_ordering() {
    const pipeline::ExperimentConfig config;
    const pipeline::ExperimentReport r = pipeline::run_benchmark(config);
    constexpr std::size_t base = 0, scratch = 3, pretrain = 4;
    std::size_t pre_lt_scratch = 0, scratch_lt_base = 0, degraded = 0;
    for (const auto& s : r.seeds) {
        pre_lt_scratch += s.mean_loss[pretrain] < s.mean_loss[scratch];
        scratch_lt_base += s.mean_loss[scratch] < s.mean_loss[base];
        degraded += s.clean_nf4 > s.clean_fp32;
    }
    const std::size_t n = r.seeds.size();
    const auto mean = [&](std::size_t k) { return r.systems[k].mean; };
    const bool means = mean(pretrain) < mean(scratch) && mean(scratch) < mean(base);
    const std::size_t need = (9 * n + 9) / 10;
    return {n == 10 && means && pre_lt_scratch >= need && scratch_lt_base >= need && degraded >= need,
            fmt("mean loss pretrain %.4f < scratch %.4f < baseline %.4f: %s; per seed pretrain<scratch %zu/%zu, "
                "scratch<baseline %zu/%zu, NF4 base > FP32 base %zu/%zu (need >= 9/10 each)",
                mean(pretrain), mean(scratch), mean(base), means ? "yes" : "no", pre_lt_scratch, n, scratch_lt_base, n,
                degraded, n)};
}

// 8. Repeated runs give identical bytes.
Outcome determinism() {
    const fs::path dir = work_dir();
    std::vector<std::string> problems;
    for (int run : {1, 2}) {
        const std::string tag = std::to_string(run);
        if (cli("bench --set report_file=" + q(dir / ("report" + tag + ".txt")) +
                " --set records_file=" + q(dir / ("records" + tag + ".csv"))) != 0)
            problems.push_back("bench run " + tag + " failed");
    }
    const bool report_same = slurp(dir / "report1.txt") == slurp(dir / "report2.txt") &&
                             !slurp(dir / "report1.txt").empty();
    const bool records_same = slurp(dir / "records1.csv") == slurp(dir / "records2.csv") &&
                              !slurp(dir / "records1.csv").empty();
    if (!report_same) problems.push_back("report files differ");
    if (!records_same) problems.push_back("records files differ");

    // One matrix, quantized repeatedly and with different thread counts.
    RngStream rng(8);
    const io::Checkpoint in{{"m", io::to_fp32(random_normal(rng, 300, 257, 1.0))}};
    io::store_checkpoint(dir / "det.nfq", in);
    const std::string ref = [&] {
        const auto b = io::encode_checkpoint(io::quantize_checkpoint(in, 4, 64, 1));
        return std::string(b.begin(), b.end());
    }();
    std::size_t variants = 0;
    for (unsigned threads : {1u, 1u, 2u, 3u, 8u}) {
        const fs::path out = dir / ("det_" + std::to_string(variants++) + ".nfq");
        if (cli("quantize --in " + q(dir / "det.nfq") + " --out " + q(out) + " --threads " + std::to_string(threads)) !=
                0 ||
            slurp(out) != ref)
            problems.push_back("quantize with " + std::to_string(threads) + " threads differs");
        const auto b = io::encode_checkpoint(io::quantize_checkpoint(in, 4, 64, threads));
        if (std::string(b.begin(), b.end()) != ref) problems.push_back("in-process quantize differs");
    }
    std::string detail = fmt("bench x2: report %s, records %s; matrix checkpoint identical over %zu runs "
                             "(threads 1,1,2,3,8)",
                             report_same ? "identical" : "DIFFERENT", records_same ? "identical" : "DIFFERENT",
                             variants);
    for (const auto& p : problems) detail += "; " + p;
    return {problems.empty(), detail};
}

// 9. Adapter scalars relative to the frozen base.
Outcome adapter_overhead() {
    const pipeline::ExperimentConfig config;
    RngStream rng(9);
    const net::ToyModel base = net::make_model(config.shape, rng);
    const net::ToyModel adapted = net::attach_fresh_adapters(base, config.rank, config.alpha, rng);
    const double share = static_cast<double>(adapted.adapter_scalars()) / static_cast<double>(base.weight_scalars());
    return {share < 0.02, fmt("%zu adapter scalars / %zu base weight scalars = %.2f%% (limit < 2%%)",
                              adapted.adapter_scalars(), base.weight_scalars(), 100.0 * share)};
}

struct Criterion {
    int id;
    const char* name;
    double limit_s;  // 0: no runtime limit
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all{
        {1, "codebook correctness", 1.0, codebook_correctness},
        {2, "nearest-code oracle", 10.0, nearest_code},
        {3, "NF4 beats uniform-4", 30.0, nf_beats_uniform},
        {4, "compression arithmetic", 0.0, compression_arithmetic},
        {5, "LoRA path equivalence", 0.0, lora_equivalence},
        {6, "gradient correctness", 60.0, gradient_correctness},
        {7, "P4Q ordering", 300.0, p4q_ordering},
        {8, "determinism", 0.0, determinism},
        {9, "adapter overhead", 0.0, adapter_overhead},
    };
    std::vector<int> selected;
    for (int i = 1; i < argc; ++i) {
        const int id = std::atoi(argv[i]);
        if (id < 1 || id > 9) {
            std::fprintf(stderr, "usage: %s [criterion 1-9]...\n", argv[0]);
            return 2;
        }
        selected.push_back(id);
    }
    if (selected.empty())
        for (const auto& c : all) selected.push_back(c.id);

    bool ok = true;
    for (int id : selected) {
        const Criterion& c = all[static_cast<std::size_t>(id - 1)];
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (c.limit_s > 0.0 && secs >= c.limit_s) {
            o.pass = false;
            o.detail += fmt("; took %.1f s, limit %.0f s", secs, c.limit_s);
        }
        std::printf("criterion %d %-4s %s: %s [%.2f s]\n", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(),
                    secs);
        std::fflush(stdout);
        ok &= o.pass;
    }
    return ok ? 0 : 1;
}
