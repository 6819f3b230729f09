// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>

#include "p4q/nfq.hpp"
#include "p4q/numerics.hpp"

namespace p4q::lora {

/// Low-rank update delta = (alpha / rank) * b * a with a: rank x d_in and
/// b: d_out x rank. alpha == rank gives the plain product b * a.
struct LoraAdapter {
    Matrix a;
    Matrix b;
    double alpha = 1.0;

    std::size_t rank() const noexcept { return a.rows(); }
    std::size_t d_in() const noexcept { return a.cols(); }
    std::size_t d_out() const noexcept { return b.rows(); }
    double scaling() const noexcept { return alpha / static_cast<double>(rank()); }
    std::size_t parameter_count() const noexcept { return a.size() + b.size(); }

    friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

/// Default alpha for a given rank (alpha / rank = 2).
inline double default_alpha(std::size_t rank) { return 2.0 * static_cast<double>(rank); }

/// a ~ N(0, 1/rank), b = 0, so the initial delta is exactly zero.
LoraAdapter init_adapter(std::size_t d_out, std::size_t d_in, std::size_t rank, double alpha, RngStream& rng);

/// Checks shapes and rank bounds of an adapter built elsewhere (e.g. loaded from disk).
void validate(const LoraAdapter& adapter);

Matrix delta(const LoraAdapter& adapter);

/// dequantize(base) * x + scaling * b * (a * x). The low-rank path never forms
/// the d_out x d_in delta.
Matrix apply_adapted(const nfq::QuantizedTensor& base, const nfq::Codebook& codebook,
                     const std::optional<LoraAdapter>& adapter, const Matrix& x);

/// Same computation with an already dequantized base.
Matrix apply_adapted(const Matrix& base, const std::optional<LoraAdapter>& adapter, const Matrix& x);

/// dequantize(base) + delta(adapter), in full precision.
Matrix merge(const nfq::QuantizedTensor& base, const nfq::Codebook& codebook, const LoraAdapter& adapter);

}  // namespace p4q::lora
