// SPDX-License-Identifier: Apache-2.0

#include "p4q/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <thread>

#include <fmt/format.h>

#include "p4q/checkpoint.hpp"
#include "p4q/error.hpp"

namespace p4q::pipeline {

void validate(const ExperimentConfig& c) {
    require(c.shape.d_in > 0 && c.shape.d_model > 0 && c.shape.d_out > 0, ErrorKind::parameter,
            "model dimensions must be positive");
    require(c.batch_size >= 1, ErrorKind::parameter, "batch_size must be at least 1");
    require(c.bits >= nfq::kMinBits && c.bits <= nfq::kMaxBits, ErrorKind::parameter, "bits must lie in [2, 8]");
    require(c.block_size >= 1, ErrorKind::parameter, "block_size must be at least 1");
    require(c.rank >= 1 && c.rank <= std::min({c.shape.d_in, c.shape.d_model, c.shape.d_out}), ErrorKind::parameter,
            "rank must lie in [1, smallest layer dimension]");
    require(std::isfinite(c.alpha) && c.alpha > 0.0, ErrorKind::parameter, "alpha must be positive");
    require(std::isfinite(c.epsilon) && c.epsilon >= 0.0, ErrorKind::parameter, "epsilon must be non-negative");
    require(c.domain_share >= 0.0 && c.domain_share <= 1.0, ErrorKind::parameter, "domain_share must lie in [0, 1]");
    require(c.pretrain_speakers >= 1 && c.test_speakers >= 1, ErrorKind::parameter, "speaker counts must be positive");
    require(c.train_samples >= 1 && c.test_samples >= 1 && c.base_samples >= 1, ErrorKind::parameter,
            "sample counts must be positive");
    require(c.seeds >= 1, ErrorKind::parameter, "seeds must be at least 1");
    require(c.threads >= 1, ErrorKind::parameter, "threads must be at least 1");
    require(std::isfinite(c.teacher_bias_std) && c.teacher_bias_std >= 0.0, ErrorKind::parameter,
            "teacher_bias_std must be non-negative");
    net::validate(c.adam);
}

std::uint64_t role_seed(std::uint64_t seed, Role role) { return mix_seed(seed, static_cast<std::uint64_t>(role)); }

net::ToyModel make_teacher(const ExperimentConfig& config, std::uint64_t seed) {
    RngStream rng(role_seed(seed, Role::teacher));
    return net::make_model(config.shape, rng, config.teacher_bias_std);
}

net::Dataset draw_dataset(RngStream& rng, std::size_t n, const Matrix& transform, const Matrix& offset,
                          const net::ToyModel& teacher, std::size_t batch_size) {
    require(n >= 1, ErrorKind::parameter, "draw_dataset: need at least one sample");
    require(batch_size >= 1, ErrorKind::parameter, "draw_dataset: batch size must be at least 1");
    const std::size_t d = teacher.input_dim();
    require(transform.rows() == d && transform.cols() == d && offset.rows() == d && offset.cols() == 1,
            ErrorKind::shape, "draw_dataset: transform does not match the teacher input");
    net::Dataset data;
    for (std::size_t first = 0; first < n; first += batch_size) {
        const std::size_t len = std::min(batch_size, n - first);
        Matrix clean = random_normal(rng, d, len, 1.0);
        Matrix observed = matmul(transform, clean);
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t c = 0; c < len; ++c) observed(r, c) += offset[r];
        Matrix target = net::forward(teacher, clean);
        data.push_back({std::move(observed), std::move(target)});
    }
    return data;
}

std::vector<SpeakerTask> gen_speakers(std::uint64_t seed, std::size_t count, double epsilon, std::size_t n_train,
                                      std::size_t n_test, const net::ToyModel& teacher, std::size_t batch_size,
                                      std::uint64_t first_id, double domain_share) {
    require(count >= 1, ErrorKind::parameter, "gen_speakers: count must be at least 1");
    require(std::isfinite(epsilon) && epsilon >= 0.0, ErrorKind::parameter, "gen_speakers: epsilon must be >= 0");
    require(domain_share >= 0.0 && domain_share <= 1.0, ErrorKind::parameter,
            "gen_speakers: domain_share must lie in [0, 1]");
    const std::size_t d = teacher.input_dim();
    const double g_std = 1.0 / std::sqrt(static_cast<double>(d));
    RngStream domain_rng(mix_seed(seed, 0));
    const Matrix domain_g = random_normal(domain_rng, d, d, g_std);
    const Matrix domain_u = random_normal(domain_rng, d, 1, 1.0);
    const double shared = std::sqrt(domain_share), own = std::sqrt(1.0 - domain_share);
    std::vector<SpeakerTask> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        SpeakerTask task;
        task.id = first_id + i;
        task.shift_strength = epsilon;
        RngStream rng = RngStream(seed).child(task.id);
        const Matrix g = add(scaled(domain_g, shared), scaled(random_normal(rng, d, d, g_std), own));
        const Matrix u = add(scaled(domain_u, shared), scaled(random_normal(rng, d, 1, 1.0), own));
        task.transform = add(Matrix::identity(d), scaled(g, epsilon));
        task.offset = scaled(u, epsilon);
        RngStream train_rng(mix_seed(rng.seed(), 1));
        RngStream test_rng(mix_seed(rng.seed(), 2));
        task.train = draw_dataset(train_rng, n_train, task.transform, task.offset, teacher, batch_size);
        task.test = draw_dataset(test_rng, n_test, task.transform, task.offset, teacher, batch_size);
        out.push_back(std::move(task));
    }
    return out;
}

net::ToyModel stage1_quantize(const net::ToyModel& model, int bits, std::size_t block_size) {
    if (model.is_quantized()) fail(ErrorKind::parameter, "stage 1: model bases are already quantized");
    return net::quantize_weights(model, nfq::build_nf_codebook(bits), block_size);
}

namespace {

void require_adapted(const net::ToyModel& model, const char* stage) {
    require(model.is_quantized(), ErrorKind::parameter, fmt::format("{}: model must be quantized", stage));
    for (const auto& [name, w] : model.weights()) {
        require(w->state == net::BaseState::quantized, ErrorKind::parameter,
                fmt::format("{}: weight {} is not quantized", stage, name));
        require(w->adapter.has_value(), ErrorKind::parameter, fmt::format("{}: weight {} has no adapter", stage, name));
    }
}

}  // namespace

net::ToyModel stage2_pretrain_lora(const net::ToyModel& model, std::span<const SpeakerTask> pool,
                                   const net::TrainConfig& config) {
    require(!pool.empty(), ErrorKind::parameter, "stage 2: empty speaker pool");
    require(config.mode == net::TrainMode::lora, ErrorKind::parameter, "stage 2 trains adapters only");
    require_adapted(model, "stage 2");
    std::vector<net::Dataset> sets;
    sets.reserve(pool.size());
    for (const SpeakerTask& s : pool) sets.push_back(s.train);
    return net::train(model, sets, config).model;
}

net::ToyModel stage3_adapt(const net::ToyModel& model, const SpeakerTask& speaker, const net::TrainConfig& config) {
    require(net::sample_count(speaker.train) > 0, ErrorKind::parameter, "stage 3: speaker has no training data");
    require(config.mode == net::TrainMode::lora, ErrorKind::parameter, "stage 3 trains adapters only");
    require_adapted(model, "stage 3");
    return net::train(model, speaker.train, config).model;
}

net::ToyModel to_full_precision(const net::ToyModel& model) {
    net::ToyModel out = model;
    for (auto& [name, w] : out.weights()) {
        w->state = net::BaseState::trainable;
        w->quantized.reset();
        w->codebook.reset();
    }
    return out;
}

const char* system_name(System s) {
    switch (s) {
        case System::baseline_nf4: return "baseline-NF4-noSA";
        case System::fft_fp32: return "FFT-FP32";
        case System::fft_nf4: return "FFT-NF4";
        case System::lora_scratch_nf4: return "LoRA-scratch-NF4";
        case System::lora_pretrain_nf4: return "LoRA-pretrain-NF4";
    }
    return "?";
}

net::TrainConfig lora_config(const ExperimentConfig& config, std::size_t epochs, std::uint64_t seed) {
    return {net::TrainMode::lora, config.adam, epochs, seed};
}

net::TrainConfig fft_config(const ExperimentConfig& config, std::size_t epochs, std::uint64_t seed) {
    return {net::TrainMode::fft, config.adam, epochs, seed};
}

net::ToyModel train_base(const ExperimentConfig& config, std::uint64_t seed, double* initial_loss,
                         double* final_loss) {
    validate(config);
    const net::ToyModel teacher = make_teacher(config, seed);
    const std::size_t d = config.shape.d_in;
    RngStream data_rng(mix_seed(role_seed(seed, Role::teacher), 1));
    const net::Dataset data =
        draw_dataset(data_rng, config.base_samples, Matrix::identity(d), Matrix(d, 1), teacher, config.batch_size);
    RngStream init_rng(role_seed(seed, Role::student));
    net::ToyModel student = net::make_model(config.shape, init_rng);
    if (initial_loss) *initial_loss = net::evaluate(student, data);
    net::ToyModel trained =
        net::train(std::move(student), data, fft_config(config, config.base_epochs, role_seed(seed, Role::base_shuffle)))
            .model;
    if (final_loss) *final_loss = net::evaluate(trained, data);
    return trained;
}

net::Dataset clean_test_set(const ExperimentConfig& config, std::uint64_t seed, const net::ToyModel& teacher) {
    const std::size_t d = config.shape.d_in;
    RngStream rng(mix_seed(role_seed(seed, Role::teacher), 2));
    return draw_dataset(rng, config.test_samples, Matrix::identity(d), Matrix(d, 1), teacher, config.batch_size);
}

std::vector<SpeakerTask> pool_speakers(const ExperimentConfig& config, std::uint64_t seed,
                                       const net::ToyModel& teacher) {
    return gen_speakers(role_seed(seed, Role::speakers), config.pretrain_speakers, config.epsilon,
                        config.train_samples, config.test_samples, teacher, config.batch_size, 0,
                        config.domain_share);
}

SpeakerTask test_speaker(const ExperimentConfig& config, std::uint64_t seed, const net::ToyModel& teacher,
                         std::size_t index) {
    require(index < config.test_speakers, ErrorKind::parameter,
            fmt::format("test speaker {} out of range (have {})", index, config.test_speakers));
    // Test speakers follow the pool in id space, so the two sets never overlap.
    return std::move(gen_speakers(role_seed(seed, Role::speakers), 1, config.epsilon, config.train_samples,
                                  config.test_samples, teacher, config.batch_size,
                                  config.pretrain_speakers + index, config.domain_share)
                         .front());
}

SeedSetup prepare_seed(const ExperimentConfig& config, std::uint64_t seed) {
    validate(config);
    SeedSetup s;
    s.teacher = make_teacher(config, seed);
    s.base = train_base(config, seed, &s.base_train_initial, &s.base_train_final);
    s.quantized = stage1_quantize(s.base, config.bits, config.block_size);
    RngStream adapter_rng(role_seed(seed, Role::adapters));
    s.scratch = net::attach_fresh_adapters(s.quantized, config.rank, config.alpha, adapter_rng);
    s.pool = pool_speakers(config, seed, s.teacher);
    s.test = gen_speakers(role_seed(seed, Role::speakers), config.test_speakers, config.epsilon,
                          config.train_samples, config.test_samples, s.teacher, config.batch_size,
                          config.pretrain_speakers, config.domain_share);
    s.pretrained = stage2_pretrain_lora(s.scratch, s.pool,
                                        lora_config(config, config.pretrain_epochs, role_seed(seed, Role::pretrain)));
    return s;
}

SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed, std::vector<Record>& records) {
    const SeedSetup s = prepare_seed(config, seed);
    SeedResult result;
    result.seed = seed;
    result.base_train_initial = s.base_train_initial;
    result.base_train_final = s.base_train_final;
    const net::Dataset clean = clean_test_set(config, seed, s.teacher);
    result.clean_fp32 = net::evaluate(s.base, clean);
    result.clean_nf4 = net::evaluate(s.quantized, clean);

    const net::ToyModel fft_nf4_start = config.fft_requantize ? s.base : to_full_precision(s.quantized);
    double fp32_sum = 0.0;
    for (const SpeakerTask& speaker : s.test) {
        const std::uint64_t adapt_seed = role_seed(seed, Role::adapt) ^ speaker.id;
        const std::uint64_t fft_seed = role_seed(seed, Role::fft) ^ speaker.id;
        const auto adapt = lora_config(config, config.adapt_epochs, adapt_seed);
        const auto fft = fft_config(config, config.adapt_epochs, fft_seed);

        std::array<double, 5> loss{};
        loss[0] = net::evaluate(s.quantized, speaker.test);
        loss[1] = net::evaluate(net::train(s.base, speaker.train, fft).model, speaker.test);
        net::ToyModel fft_nf4 = net::train(fft_nf4_start, speaker.train, fft).model;
        if (config.fft_requantize) fft_nf4 = stage1_quantize(fft_nf4, config.bits, config.block_size);
        loss[2] = net::evaluate(fft_nf4, speaker.test);
        loss[3] = net::evaluate(stage3_adapt(s.scratch, speaker, adapt), speaker.test);
        loss[4] = net::evaluate(stage3_adapt(s.pretrained, speaker, adapt), speaker.test);
        fp32_sum += net::evaluate(s.base, speaker.test);

        for (std::size_t k = 0; k < kSystems.size(); ++k) {
            records.push_back({kSystems[k], seed, speaker.id, loss[k]});
            result.mean_loss[k] += loss[k];
        }
    }
    const auto n = static_cast<double>(s.test.size());
    for (double& m : result.mean_loss) m /= n;
    result.fp32_reference = fp32_sum / n;
    return result;
}

ExperimentReport run_benchmark(const ExperimentConfig& config) {
    validate(config);
    ExperimentReport report;
    report.config = config;

    const std::size_t nseeds = config.seeds;
    std::vector<SeedResult> results(nseeds);
    std::vector<std::vector<Record>> per_seed(nseeds);
    std::vector<std::exception_ptr> errors(nseeds);
    auto work = [&](std::size_t i) {
        try {
            results[i] = run_seed(config, config.seed + i, per_seed[i]);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    const std::size_t workers = std::min<std::size_t>(config.threads, nseeds);
    if (workers <= 1) {
        for (std::size_t i = 0; i < nseeds; ++i) work(i);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < nseeds; i += workers) work(i);
            });
        }
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    report.seeds = std::move(results);
    for (auto& r : per_seed) report.records.insert(report.records.end(), r.begin(), r.end());
    std::stable_sort(report.records.begin(), report.records.end(), [](const Record& a, const Record& b) {
        if (a.system != b.system) return a.system < b.system;
        if (a.seed != b.seed) return a.seed < b.seed;
        return a.speaker < b.speaker;
    });

    for (System sys : kSystems) {
        SystemSummary sum{sys};
        std::vector<double> losses;
        for (const Record& r : report.records)
            if (r.system == sys) losses.push_back(r.loss);
        for (double l : losses) sum.mean += l;
        sum.mean /= static_cast<double>(losses.size());
        if (losses.size() > 1) {
            double ss = 0.0;
            for (double l : losses) ss += (l - sum.mean) * (l - sum.mean);
            sum.stddev = std::sqrt(ss / static_cast<double>(losses.size() - 1));
        }
        report.systems.push_back(sum);
    }
    const double baseline = report.systems.front().mean;
    for (SystemSummary& s : report.systems) s.relative_reduction_pct = 100.0 * (baseline - s.mean) / baseline;
    for (const SeedResult& r : report.seeds) report.fp32_reference_mean += r.fp32_reference;
    report.fp32_reference_mean /= static_cast<double>(report.seeds.size());

    // Sizes depend only on the shapes, so an untrained model of the same layout suffices.
    RngStream rng(0);
    const net::ToyModel probe = net::make_model(config.shape, rng);
    const io::Checkpoint fp32 = io::model_to_checkpoint(probe);
    const io::Checkpoint quant = io::model_to_checkpoint(stage1_quantize(probe, config.bits, config.block_size));
    report.fp32_model_bytes = io::checkpoint_size(fp32);
    report.quantized_model_bytes = io::checkpoint_size(quant);
    std::uint64_t fp32_payload = 0, quant_payload = 0;
    for (const auto& t : fp32) fp32_payload += io::payload_size(t);
    for (const auto& t : quant) quant_payload += io::payload_size(t);
    report.payload_compression_ratio = static_cast<double>(fp32_payload) / static_cast<double>(quant_payload);
    report.base_weight_scalars = probe.weight_scalars();
    RngStream arng(0);
    report.adapter_scalars = net::attach_fresh_adapters(probe, config.rank, config.alpha, arng).adapter_scalars();
    report.adapter_fraction =
        static_cast<double>(report.adapter_scalars) / static_cast<double>(report.base_weight_scalars);
    return report;
}

std::string render_table(const ExperimentReport& report) {
    const ExperimentConfig& c = report.config;
    std::string out;
    out += fmt::format("P4Q benchmark: seeds={} (from {}), pretrain_speakers={}, test_speakers={}, epsilon={}\n",
                       c.seeds, c.seed, c.pretrain_speakers, c.test_speakers, c.epsilon);
    out += fmt::format("model {}->{}->{}, bits={}, block_size={}, rank={}, alpha={}\n\n", c.shape.d_in,
                       c.shape.d_model, c.shape.d_out, c.bits, c.block_size, c.rank, c.alpha);
    out += fmt::format("{:<20} {:>14} {:>14} {:>16}\n", "system", "mean_loss", "stddev", "rel_reduction_%");
    for (const SystemSummary& s : report.systems) {
        out += fmt::format("{:<20} {:>14.6e} {:>14.6e} {:>16.2f}\n", system_name(s.system), s.mean, s.stddev,
                           s.relative_reduction_pct);
    }
    out += fmt::format("{:<20} {:>14.6e}\n\n", "(FP32-noSA)", report.fp32_reference_mean);

    out += fmt::format("{:>6}", "seed");
    for (System s : kSystems) out += fmt::format(" {:>18}", system_name(s));
    out += fmt::format(" {:>18} {:>12} {:>12}\n", "FP32-noSA", "clean-FP32", "clean-NF4");
    for (const SeedResult& r : report.seeds) {
        out += fmt::format("{:>6}", r.seed);
        for (double l : r.mean_loss) out += fmt::format(" {:>18.6e}", l);
        out += fmt::format(" {:>18.6e} {:>12.4e} {:>12.4e}\n", r.fp32_reference, r.clean_fp32, r.clean_nf4);
    }

    auto count = [&](auto pred) {
        std::size_t n = 0;
        for (const SeedResult& r : report.seeds) n += pred(r) ? 1 : 0;
        return n;
    };
    const std::size_t n = report.seeds.size();
    out += "\nordering (seeds satisfying):\n";
    out += fmt::format("  LoRA-pretrain < LoRA-scratch : {}/{}\n",
                       count([](const SeedResult& r) { return r.mean_loss[4] < r.mean_loss[3]; }), n);
    out += fmt::format("  LoRA-scratch  < baseline     : {}/{}\n",
                       count([](const SeedResult& r) { return r.mean_loss[3] < r.mean_loss[0]; }), n);
    out += fmt::format("  FFT-FP32      < baseline     : {}/{}\n",
                       count([](const SeedResult& r) { return r.mean_loss[1] < r.mean_loss[0]; }), n);
    out += fmt::format("  NF4 base      > FP32 base    : {}/{} (unshifted held-out data)\n",
                       count([](const SeedResult& r) { return r.clean_nf4 > r.clean_fp32; }), n);

    out += fmt::format("\nmodel size: fp32 {} bytes, nf{} {} bytes (file ratio {:.3f}, payload ratio {:.3f})\n",
                       report.fp32_model_bytes, c.bits, report.quantized_model_bytes,
                       static_cast<double>(report.fp32_model_bytes) / static_cast<double>(report.quantized_model_bytes),
                       report.payload_compression_ratio);
    out += fmt::format("adapter parameters: {} ({:.2f}% of {} base weight scalars)\n", report.adapter_scalars,
                       100.0 * report.adapter_fraction, report.base_weight_scalars);
    return out;
}

std::string render_records(const ExperimentReport& report) {
    std::string out = "system,seed,speaker,loss\n";
    for (const Record& r : report.records) {
        out += fmt::format("{},{},{},{:.17g}\n", system_name(r.system), r.seed, r.speaker, r.loss);
    }
    return out;
}

}  // namespace p4q::pipeline
