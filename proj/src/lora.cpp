// SPDX-License-Identifier: Apache-2.0

#include "p4q/lora.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "p4q/error.hpp"

namespace p4q::lora {

LoraAdapter init_adapter(std::size_t d_out, std::size_t d_in, std::size_t rank, double alpha, RngStream& rng) {
    if (rank < 1 || rank > std::min(d_out, d_in)) {
        fail(ErrorKind::parameter, fmt::format("rank {} outside [1, min({}, {})]", rank, d_out, d_in));
    }
    require(std::isfinite(alpha) && alpha > 0.0, ErrorKind::parameter, "alpha must be positive");
    LoraAdapter adapter;
    adapter.a = random_normal(rng, rank, d_in, 1.0 / std::sqrt(static_cast<double>(rank)));
    adapter.b = Matrix(d_out, rank);
    adapter.alpha = alpha;
    return adapter;
}

void validate(const LoraAdapter& adapter) {
    require(!adapter.a.empty() && !adapter.b.empty(), ErrorKind::shape, "adapter factors must be non-empty");
    require(adapter.b.cols() == adapter.a.rows(), ErrorKind::shape, "adapter factors disagree on rank");
    require(adapter.rank() <= std::min(adapter.d_out(), adapter.d_in()), ErrorKind::parameter,
            "adapter rank exceeds min(d_out, d_in)");
    require(std::isfinite(adapter.alpha) && adapter.alpha > 0.0, ErrorKind::parameter, "alpha must be positive");
}

Matrix delta(const LoraAdapter& adapter) { return scaled(matmul(adapter.b, adapter.a), adapter.scaling()); }

Matrix apply_adapted(const Matrix& base, const std::optional<LoraAdapter>& adapter, const Matrix& x) {
    if (base.cols() != x.rows()) {
        fail(ErrorKind::parameter, fmt::format("apply_adapted: base {}x{} cannot take input with {} rows",
                                               base.rows(), base.cols(), x.rows()));
    }
    Matrix y = matmul(base, x);
    if (!adapter) return y;
    if (adapter->d_in() != base.cols() || adapter->d_out() != base.rows()) {
        fail(ErrorKind::parameter, "apply_adapted: adapter shape does not match base");
    }
    const Matrix low = scaled(matmul(adapter->b, matmul(adapter->a, x)), adapter->scaling());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += low[i];
    return y;
}

Matrix apply_adapted(const nfq::QuantizedTensor& base, const nfq::Codebook& codebook,
                     const std::optional<LoraAdapter>& adapter, const Matrix& x) {
    return apply_adapted(nfq::dequantize(base, codebook), adapter, x);
}

Matrix merge(const nfq::QuantizedTensor& base, const nfq::Codebook& codebook, const LoraAdapter& adapter) {
    const Matrix w = nfq::dequantize(base, codebook);
    if (adapter.d_out() != w.rows() || adapter.d_in() != w.cols()) {
        fail(ErrorKind::parameter, "merge: adapter shape does not match base");
    }
    return add(w, delta(adapter));
}

}  // namespace p4q::lora
