// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "p4q/lora.hpp"
#include "p4q/net.hpp"
#include "p4q/nfq.hpp"

namespace p4q::io {

// "NFQ1" checkpoint layout, all integers little-endian:
//
//   magic "NFQ1" | u32 version = 1 | u32 tensor count
//   per tensor:
//     u16 name length | name bytes (UTF-8) | u8 kind (0 = fp32, 1 = quantized)
//     u8 bit width (0 for fp32) | u32 block size (0 for fp32)
//     u8 ndim | ndim x u64 dims
//     fp32:      numel x f32, row-major
//     quantized: ceil(numel * k / 8) packed code bytes, then ceil(numel / B) x f32 scales
//
// "NFA1" adapter layout:
//
//   magic "NFA1" | u32 version = 1 | u32 adapter count
//   per adapter:
//     u16 name length | name (target tensor) | u32 rank | f32 alpha
//     u64 d_out | u64 d_in | a (rank x d_in f32) | b (d_out x rank f32)

inline constexpr std::uint32_t kFormatVersion = 1;

struct Fp32Tensor {
    std::vector<std::uint64_t> shape;
    std::vector<float> data;

    friend bool operator==(const Fp32Tensor&, const Fp32Tensor&) = default;
};

struct TensorRecord {
    std::string name;
    std::variant<Fp32Tensor, nfq::QuantizedTensor> payload;

    bool quantized() const noexcept { return std::holds_alternative<nfq::QuantizedTensor>(payload); }
    std::uint64_t numel() const noexcept;

    friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

using Checkpoint = std::vector<TensorRecord>;

struct NamedAdapter {
    std::string target;
    lora::LoraAdapter adapter;

    friend bool operator==(const NamedAdapter&, const NamedAdapter&) = default;
};

std::vector<std::uint8_t> encode_checkpoint(std::span<const TensorRecord> tensors);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
/// Byte size of the encoding, computed from metadata alone.
std::uint64_t checkpoint_size(std::span<const TensorRecord> tensors);
/// Payload bytes only (codes, scales and fp32 data), without any header.
std::uint64_t payload_size(const TensorRecord& tensor);

void store_checkpoint(const std::filesystem::path& path, std::span<const TensorRecord> tensors);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_adapters(std::span<const NamedAdapter> adapters);
std::vector<NamedAdapter> decode_adapters(std::span<const std::uint8_t> bytes);
std::uint64_t adapters_size(std::span<const NamedAdapter> adapters);

void store_adapters(const std::filesystem::path& path, std::span<const NamedAdapter> adapters);
std::vector<NamedAdapter> load_adapters(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Full-precision conversions. 2-D records map to matrices, 1-D records to
/// column vectors.
Fp32Tensor to_fp32(const Matrix& m, bool as_vector = false);
Matrix to_matrix(const Fp32Tensor& t);

/// Quantizes every fp32 record of rank >= 2 with an NF codebook; 1-D records
/// and already quantized records are copied.
Checkpoint quantize_checkpoint(const Checkpoint& in, int bits, std::size_t block_size, unsigned threads = 1);
/// Expands every quantized record back to fp32.
Checkpoint dequantize_checkpoint(const Checkpoint& in);

struct CheckpointStats {
    std::size_t tensors = 0;  // quantized records compared
    std::uint64_t params = 0;
    double mse = 0.0;          // over all compared elements
    double max_abs_err = 0.0;
    double bits_per_param = 0.0;
    double compression_ratio_vs_fp32 = 0.0;
};

/// Compares every quantized record of `quantized` with the fp32 record of the
/// same name in `original`.
CheckpointStats checkpoint_stats(const Checkpoint& original, const Checkpoint& quantized);

/// Weights as stored in the model: full-precision weights as fp32, quantized
/// weights as their codes and scales. Biases are 1-D fp32 records.
Checkpoint model_to_checkpoint(const net::ToyModel& model);
/// Rebuilds the default toy layout from its records. Quantized records become
/// frozen quantized weights (NormalFloat codebook of the stored bit width).
net::ToyModel model_from_checkpoint(const Checkpoint& ckpt);

/// Just the 1-D bias records of model_to_checkpoint.
Checkpoint biases_to_checkpoint(const net::ToyModel& model);
/// Overwrites biases from records of matching name and length; fails on a
/// record that names no bias of the model.
void assign_biases(net::ToyModel& model, const Checkpoint& ckpt);

std::vector<NamedAdapter> collect_adapters(const net::ToyModel& model);
/// Fails if an adapter names a weight the model does not have or has the wrong shape.
void attach_adapters(net::ToyModel& model, std::span<const NamedAdapter> adapters);

}  // namespace p4q::io
