// SPDX-License-Identifier: Apache-2.0
//
// Small models and a finite-difference check shared by the unit and
// acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "p4q/net.hpp"

namespace gradcheck {

using namespace p4q;
using namespace p4q::net;

inline Weight weight(RngStream& rng, std::size_t o, std::size_t i) {
    Weight w;
    w.value = random_normal(rng, o, i, 1.0 / std::sqrt(static_cast<double>(i)));
    return w;
}

inline Linear linear(RngStream& rng, std::size_t o, std::size_t i) { return {weight(rng, o, i), random_normal(rng, o, 1, 0.3)}; }

inline ToyModel linear_only(RngStream& rng) { return ToyModel({linear(rng, 5, 4), linear(rng, 3, 5)}); }

inline ToyModel linear_tanh(RngStream& rng) { return ToyModel({linear(rng, 6, 4), Tanh{}, linear(rng, 3, 6)}); }

inline ToyModel linear_attention(RngStream& rng) {
    const std::size_t d = 6;
    // Larger projections than the default init so the softmax is far from uniform.
    auto proj = [&] {
        Weight w;
        w.value = random_normal(rng, d, d, 0.8);
        return w;
    };
    return ToyModel({linear(rng, d, 4), SelfAttention{proj(), proj(), proj(), proj()}, linear(rng, 3, d)});
}

// Largest relative error between reverse-mode and central-difference
// gradients over every trainable entry. Gradients below 1e-5 are compared
// against 1e-5 instead of their own size.
inline double max_gradient_error(ToyModel& model, const Matrix& x, const Matrix& t, TrainMode mode) {
    const Gradients g = backward(model, x, t, mode);
    double worst = 0.0;
    for (std::size_t p = 0; p < g.params.size(); ++p) {
        Matrix& m = *g.params[p].value;
        for (std::size_t i = 0; i < m.size(); ++i) {
            const double fd = oracle::central_difference([&] { return loss_mse(forward(model, x), t); }, m, i, 1e-5);
            const double an = g.grads[p][i];
            const double scale = std::max({std::fabs(fd), std::fabs(an), 1e-5});
            worst = std::max(worst, std::fabs(fd - an) / scale);
        }
    }
    return worst;
}

}  // namespace gradcheck
