// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "p4q/net.hpp"
#include "p4q/nfq.hpp"

namespace p4q::pipeline {

/// Every knob of the quantize -> pretrain -> adapt experiment.
struct ExperimentConfig {
    net::ModelShape shape;
    std::size_t batch_size = 16;  // positions per sequence, one sequence per optimizer step

    int bits = 4;
    std::size_t block_size = nfq::kDefaultBlockSize;
    std::size_t rank = 4;
    double alpha = 8.0;

    double epsilon = 0.5;       // speaker shift strength
    double domain_share = 0.5;  // fraction of shift variance common to all speakers of a run
    std::size_t pretrain_speakers = 8;
    std::size_t test_speakers = 4;
    std::size_t train_samples = 200;
    std::size_t test_samples = 200;

    std::size_t base_samples = 1000;
    std::size_t base_epochs = 50;
    std::size_t pretrain_epochs = 30;
    std::size_t adapt_epochs = 20;
    net::AdamConfig adam;
    double teacher_bias_std = 0.1;

    std::uint64_t seed = 1;
    std::size_t seeds = 10;
    /// FFT-NF4: fine-tune in full precision, then re-quantize (true), or
    /// fine-tune the dequantized weights and keep them in full precision (false).
    bool fft_requantize = true;
    unsigned threads = 1;
};

void validate(const ExperimentConfig& config);

/// A synthetic speaker: inputs x ~ N(0, I) are observed as S x + t with
/// S = I + eps G and t = eps u, while targets are teacher(x).
///
/// G and u mix a domain component shared by every speaker generated from the
/// same seed with a speaker-specific one:
/// G = sqrt(rho) G_domain + sqrt(1 - rho) G_speaker, entries of each N(0, 1/d_in),
/// so marginally G still has N(0, 1/d_in) entries.
struct SpeakerTask {
    std::uint64_t id = 0;
    double shift_strength = 0.0;
    Matrix transform;  // d_in x d_in
    Matrix offset;     // d_in x 1
    net::Dataset train;
    net::Dataset test;
};

net::ToyModel make_teacher(const ExperimentConfig& config, std::uint64_t seed);

/// n samples through (transform, offset), labelled by the teacher on the clean
/// inputs. The teacher sees the same sequence grouping as the returned batches.
net::Dataset draw_dataset(RngStream& rng, std::size_t n, const Matrix& transform, const Matrix& offset,
                          const net::ToyModel& teacher, std::size_t batch_size);

/// Speakers first_id .. first_id + count - 1; speaker i draws from the stream
/// seeded with seed ^ i, with separate child streams for train and test data.
/// The domain component comes from its own stream derived from seed.
std::vector<SpeakerTask> gen_speakers(std::uint64_t seed, std::size_t count, double epsilon, std::size_t n_train,
                                      std::size_t n_test, const net::ToyModel& teacher, std::size_t batch_size,
                                      std::uint64_t first_id = 0, double domain_share = 0.0);

/// Stage 1: block-wise NormalFloat quantization of every weight matrix.
net::ToyModel stage1_quantize(const net::ToyModel& model, int bits, std::size_t block_size);

/// Stage 2: one shared adapter set trained round-robin over the pool.
net::ToyModel stage2_pretrain_lora(const net::ToyModel& model, std::span<const SpeakerTask> pool,
                                   const net::TrainConfig& config);

/// Stage 3: continue adapter (and bias) training on one speaker. The input
/// model is left untouched.
net::ToyModel stage3_adapt(const net::ToyModel& model, const SpeakerTask& speaker, const net::TrainConfig& config);

/// Thaws every weight: quantized weights keep their dequantized values but
/// become trainable full-precision parameters.
net::ToyModel to_full_precision(const net::ToyModel& model);

enum class System : std::uint8_t { baseline_nf4, fft_fp32, fft_nf4, lora_scratch_nf4, lora_pretrain_nf4 };
inline constexpr std::array<System, 5> kSystems = {System::baseline_nf4, System::fft_fp32, System::fft_nf4,
                                                   System::lora_scratch_nf4, System::lora_pretrain_nf4};
const char* system_name(System s);

struct Record {
    System system;
    std::uint64_t seed;
    std::uint64_t speaker;
    double loss;
};

struct SeedResult {
    std::uint64_t seed = 0;
    std::array<double, 5> mean_loss{};  // indexed like kSystems, averaged over test speakers
    double fp32_reference = 0.0;        // unadapted full-precision base
    double clean_fp32 = 0.0;            // full-precision base on unshifted held-out data
    double clean_nf4 = 0.0;             // quantized base on the same data
    double base_train_initial = 0.0;
    double base_train_final = 0.0;
};

struct SystemSummary {
    System system;
    double mean = 0.0;
    double stddev = 0.0;
    double relative_reduction_pct = 0.0;  // vs baseline-NF4-noSA
};

struct ExperimentReport {
    ExperimentConfig config;
    std::vector<Record> records;  // sorted by (system, seed, speaker)
    std::vector<SeedResult> seeds;
    std::vector<SystemSummary> systems;
    double fp32_reference_mean = 0.0;
    std::uint64_t fp32_model_bytes = 0;
    std::uint64_t quantized_model_bytes = 0;
    double payload_compression_ratio = 0.0;  // fp32 payload / quantized payload, headers excluded
    std::size_t base_weight_scalars = 0;
    std::size_t adapter_scalars = 0;
    double adapter_fraction = 0.0;
};

/// Everything built once per seed before the per-speaker systems run.
struct SeedSetup {
    net::ToyModel teacher;
    net::ToyModel base;       // full-precision student trained on unshifted data
    net::ToyModel quantized;  // stage 1
    net::ToyModel scratch;    // quantized with fresh adapters
    net::ToyModel pretrained; // stage 2
    std::vector<SpeakerTask> pool;
    std::vector<SpeakerTask> test;
    double base_train_initial = 0.0;
    double base_train_final = 0.0;
};

/// Trains the full-precision base on unshifted teacher data. Returns the
/// trained model; initial and final full-dataset losses go to the out-params
/// when given.
net::ToyModel train_base(const ExperimentConfig& config, std::uint64_t seed, double* initial_loss = nullptr,
                         double* final_loss = nullptr);

/// Unshifted held-out data (test_samples of them) from the teacher of a seed.
net::Dataset clean_test_set(const ExperimentConfig& config, std::uint64_t seed, const net::ToyModel& teacher);

std::vector<SpeakerTask> pool_speakers(const ExperimentConfig& config, std::uint64_t seed,
                                       const net::ToyModel& teacher);
SpeakerTask test_speaker(const ExperimentConfig& config, std::uint64_t seed, const net::ToyModel& teacher,
                         std::size_t index);

net::TrainConfig lora_config(const ExperimentConfig& config, std::size_t epochs, std::uint64_t seed);
net::TrainConfig fft_config(const ExperimentConfig& config, std::size_t epochs, std::uint64_t seed);

/// Seed-derived stream seeds for each role of one run.
enum class Role : std::uint64_t { teacher = 1, student, base_shuffle, speakers, adapters, pretrain, adapt, fft };
std::uint64_t role_seed(std::uint64_t seed, Role role);

SeedSetup prepare_seed(const ExperimentConfig& config, std::uint64_t seed);
SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed, std::vector<Record>& records);

ExperimentReport run_benchmark(const ExperimentConfig& config);

/// Aligned plain-text summary.
std::string render_table(const ExperimentReport& report);
/// CSV with a "system,seed,speaker,loss" header line.
std::string render_records(const ExperimentReport& report);

}  // namespace p4q::pipeline
