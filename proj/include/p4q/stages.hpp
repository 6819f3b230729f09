// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "p4q/config.hpp"

namespace p4q::stages {

// File-backed versions of the pipeline stages. Each one reads what the
// previous stage wrote to the paths named in the RunConfig and uses
// experiment.seed for every random choice.

struct BaseSummary {
    double initial_loss = 0.0;  // training data, before training
    double final_loss = 0.0;
    std::uint64_t fp32_bytes = 0;
    std::uint64_t quantized_bytes = 0;
};

/// Trains the base, stores it at base_checkpoint, quantizes it and stores the
/// result at quant_checkpoint.
BaseSummary train_base(const config::RunConfig& config);

/// Mean loss over the pool speakers' test sets before and after stage 2.
struct PretrainSummary {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::size_t adapters = 0;
};

/// Loads quant_checkpoint, trains shared adapters on the pool and stores them
/// at adapter_file.
PretrainSummary pretrain_lora(const config::RunConfig& config);

struct AdaptSummary {
    std::uint64_t speaker_id = 0;
    double initial_loss = 0.0;  // speaker test set, pretrained adapters
    double final_loss = 0.0;
};

/// Continues the adapters from adapter_file on test speaker `index` and stores
/// the result at speaker_adapter_file.
AdaptSummary adapt(const config::RunConfig& config, std::size_t index);

struct EvalRow {
    std::uint64_t speaker_id = 0;
    double quantized_loss = 0.0;
    std::optional<double> adapted_loss;  // with adapter_file, when it exists
};

struct EvalSummary {
    double clean_fp32 = 0.0;  // base_checkpoint on unshifted held-out data
    double clean_quantized = 0.0;
    std::vector<EvalRow> speakers;
};

/// Scores the stored models on every test speaker.
EvalSummary evaluate(const config::RunConfig& config);

}  // namespace p4q::stages
