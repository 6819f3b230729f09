// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "p4q/autodiff.hpp"
#include "p4q/lora.hpp"
#include "p4q/nfq.hpp"
#include "p4q/numerics.hpp"

namespace p4q::net {

enum class BaseState : std::uint8_t { trainable, frozen, quantized };

/// One weight matrix of the model.
///
/// `value` always holds the matrix used in the forward pass: the parameter
/// itself for full-precision states, the cached dequantization for quantized
/// ones.
struct Weight {
    Matrix value;
    BaseState state = BaseState::trainable;
    std::optional<nfq::QuantizedTensor> quantized;
    std::optional<nfq::Codebook> codebook;
    std::optional<lora::LoraAdapter> adapter;
};

struct Linear {
    Weight weight;  // d_out x d_in
    Matrix bias;    // d_out x 1
};

/// Single-head self-attention over the columns of its input with a residual
/// connection: h + Wo (Wv h) softmax((Wq h)^T (Wk h) / sqrt(d))^T.
struct SelfAttention {
    Weight query, key, value, output;
};

struct Tanh {};

using Block = std::variant<Linear, SelfAttention, Tanh>;

struct ModelShape {
    std::size_t d_in = 16;
    std::size_t d_model = 32;
    std::size_t d_out = 8;
};

class ToyModel {
public:
    ToyModel() = default;
    explicit ToyModel(std::vector<Block> blocks);

    std::span<Block> blocks() noexcept { return blocks_; }
    std::span<const Block> blocks() const noexcept { return blocks_; }

    std::size_t input_dim() const;
    std::size_t output_dim() const;

    /// Every weight in a fixed order, named "<block>.<role>" (e.g. "2.wq").
    std::vector<std::pair<std::string, Weight*>> weights();
    std::vector<std::pair<std::string, const Weight*>> weights() const;
    /// Every bias, named "<block>.bias".
    std::vector<std::pair<std::string, Matrix*>> biases();
    std::vector<std::pair<std::string, const Matrix*>> biases() const;

    bool is_quantized() const;
    std::size_t weight_scalars() const;
    std::size_t bias_scalars() const;
    std::size_t adapter_scalars() const;

private:
    void check_dims() const;

    std::vector<Block> blocks_;
};

/// Linear(d_model <- d_in) -> tanh -> SelfAttention(d_model) -> Linear(d_out <- d_model).
/// Weights ~ N(0, 1/fan_in), biases ~ N(0, bias_std^2).
ToyModel make_model(const ModelShape& shape, RngStream& rng, double bias_std = 0.0);

/// Same layout with every weight and bias set to zero.
ToyModel make_zero_model(const ModelShape& shape);

enum class TrainMode : std::uint8_t { fft, lora };

/// Named handle to one trainable matrix.
struct ParamRef {
    std::string name;
    Matrix* value;
};

/// The trainable set of a mode. FFT: every full-precision trainable weight
/// plus biases (adapters are left alone). LoRA: every adapter factor plus
/// biases.
std::vector<ParamRef> trainable_parameters(ToyModel& model, TrainMode mode);

/// Forward pass; x is d_in x sequence, each column a position.
Matrix forward(const ToyModel& model, const Matrix& x);

double loss_mse(const Matrix& pred, const Matrix& target);

struct Gradients {
    double loss = 0.0;
    std::vector<ParamRef> params;
    std::vector<Matrix> grads;  // aligned with params
};

/// Exact gradients of loss_mse(forward(model, x), target) for the mode's trainable set.
Gradients backward(ToyModel& model, const Matrix& x, const Matrix& target, TrainMode mode);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    std::uint64_t step = 0;
};

void validate(const AdamConfig& config);

/// One bias-corrected Adam update. State is lazily sized on the first call.
void adam_step(std::span<const ParamRef> params, std::span<const Matrix> grads, AdamState& state,
               const AdamConfig& config);

/// A dataset is a list of sequences; one sequence (d_in x len inputs with
/// d_out x len targets) is one optimizer step.
struct Batch {
    Matrix x;
    Matrix y;
};
using Dataset = std::vector<Batch>;

/// Splits column-aligned inputs/targets into consecutive batches of batch_size
/// columns (the last may be shorter).
Dataset make_dataset(const Matrix& x, const Matrix& y, std::size_t batch_size);
std::size_t sample_count(const Dataset& data);

/// Mean squared error over every target entry of the dataset.
double evaluate(const ToyModel& model, const Dataset& data);

struct TrainConfig {
    TrainMode mode = TrainMode::fft;
    AdamConfig adam;
    std::size_t epochs = 0;
    std::uint64_t seed = 0;
};

struct TrainResult {
    ToyModel model;
    std::vector<double> epoch_losses;  // mean training loss per epoch
};

/// Mini-batch Adam over one or more datasets. Every epoch shuffles the batch
/// order of each dataset, then visits them round-robin (batch 0 of each,
/// batch 1 of each, ...).
TrainResult train(ToyModel model, std::span<const Dataset> datasets, const TrainConfig& config);
TrainResult train(ToyModel model, const Dataset& dataset, const TrainConfig& config);

/// Adds freshly initialized adapters to every weight matrix.
ToyModel attach_fresh_adapters(ToyModel model, std::size_t rank, double alpha, RngStream& rng);

/// Replaces every weight by its block-wise quantization, freezing it. Biases
/// stay full precision.
ToyModel quantize_weights(ToyModel model, const nfq::Codebook& codebook, std::size_t block_size);

}  // namespace p4q::net
