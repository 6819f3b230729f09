// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "p4q/numerics.hpp"

namespace p4q::nfq {

enum class CodebookKind : std::uint8_t { normal_float, uniform };

inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 8;
inline constexpr std::size_t kDefaultBlockSize = 64;

/// Ascending table of 2^k representable values in [-1, 1], with -1, +1 and an
/// exact 0 always present.
class Codebook {
public:
    Codebook(int bits, CodebookKind kind, std::vector<double> values);

    int bits() const noexcept { return bits_; }
    CodebookKind kind() const noexcept { return kind_; }
    std::span<const double> values() const noexcept { return values_; }
    std::size_t size() const noexcept { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }

    /// Index of the exact-zero entry.
    std::uint32_t zero_index() const noexcept { return zero_index_; }
    /// Largest distance between adjacent entries.
    double max_gap() const noexcept;

    /// Nearest entry to x; ties go to the lower index.
    std::uint32_t nearest(double x) const noexcept;

private:
    int bits_;
    CodebookKind kind_;
    std::vector<double> values_;
    std::uint32_t zero_index_ = 0;
};

/// k-bit NormalFloat codebook.
///
/// Standard-normal quantiles at evenly spaced probabilities: 2^(k-1) points
/// from delta to 0.5 (the last one being the shared zero) and 2^(k-1) points
/// above 0.5 up to 1 - delta, with delta = 2^-(k+1). The result is divided by
/// its largest magnitude so that both endpoints are exactly -1 and +1.
Codebook build_nf_codebook(int bits);

/// Evenly spaced baseline: v_i = -1 + 2i / (2^k - 1), with the entry nearest
/// to zero (lower index on a tie) snapped to exactly 0.
Codebook build_uniform_codebook(int bits);

Codebook build_codebook(int bits, CodebookKind kind);

struct QuantizedBlock {
    std::vector<std::uint32_t> codes;
    float scale = 0.0f;
};

/// Absmax quantization of one block: scale is max|v| rounded to float, each
/// v / scale goes to its nearest codebook entry.
QuantizedBlock quantize_block(std::span<const double> values, const Codebook& codebook);

/// Block-wise quantized tensor with packed codes and one float scale per block.
struct QuantizedTensor {
    std::vector<std::uint64_t> shape;
    std::uint32_t block_size = 0;
    int bits = 0;
    std::vector<std::uint8_t> codes;  // packed, see pack_codes
    std::vector<float> scales;

    std::uint64_t numel() const noexcept;
    std::size_t block_count() const noexcept { return scales.size(); }

    friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

/// Expected byte counts for a tensor of `numel` elements.
std::uint64_t packed_code_bytes(std::uint64_t numel, int bits);
std::uint64_t block_count(std::uint64_t numel, std::uint64_t block_size);

/// Quantizes the row-major flattening of w in blocks of block_size. With
/// threads > 1 the blocks are split across workers; the output is identical
/// to the single-threaded result.
QuantizedTensor quantize_tensor(const Matrix& w, const Codebook& codebook,
                                std::size_t block_size = kDefaultBlockSize, unsigned threads = 1);

/// Reconstructs codebook[code] * scale for every element. The tensor must be
/// two-dimensional (or one-dimensional, returned as a single row).
Matrix dequantize(const QuantizedTensor& qt, const Codebook& codebook);

/// Little-endian bitstream: code j occupies stream bits [j*k, (j+1)*k), and
/// stream bit b lives at position b % 8 of byte b / 8.
std::vector<std::uint8_t> pack_codes(std::span<const std::uint32_t> codes, int bits);
std::vector<std::uint32_t> unpack_codes(std::span<const std::uint8_t> bytes, int bits, std::size_t count);

struct QuantStats {
    double mse = 0.0;
    double max_abs_err = 0.0;
    double bits_per_param = 0.0;
    double compression_ratio_vs_fp32 = 0.0;
};

QuantStats quant_stats(const Matrix& original, const QuantizedTensor& qt, const Codebook& codebook);

/// bits + 32 / block_size.
double bits_per_param(int bits, std::size_t block_size);

struct SchemeComparison {
    std::size_t trials = 0;
    double nf_mse = 0.0;       // mean over trials
    double uniform_mse = 0.0;  // mean over trials
    std::size_t nf_wins = 0;   // trials with strictly lower NF error
};

/// Quantizes `trials` N(0, 1) matrices of rows x cols with both codebooks.
/// Trial t draws from RngStream(seed).child(t).
SchemeComparison compare_schemes(int bits, std::size_t block_size, std::size_t trials, std::uint64_t seed,
                                 std::size_t rows = 256, std::size_t cols = 256);

}  // namespace p4q::nfq
