// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "p4q/numerics.hpp"

namespace p4q::ad {

struct Var {
    std::size_t index = 0;
};

/// Minimal reverse-mode tape over matrices.
///
/// Nodes are appended in evaluation order; backward() walks them in reverse.
/// Constants and parameters may reference caller-owned matrices, which must
/// outlive the tape. Gradients are only formed for nodes that depend on a
/// parameter.
class Tape {
public:
    Var constant(const Matrix& ref);
    Var constant(Matrix&& value);
    Var parameter(const Matrix& ref);

    Var matmul(Var a, Var b);
    Var add(Var a, Var b);
    /// x + bias broadcast over columns; bias is rows x 1.
    Var add_column(Var x, Var bias);
    Var scale(Var a, double factor);
    Var tanh(Var a);
    Var transpose(Var a);
    /// Row-wise softmax with max subtraction.
    Var softmax_rows(Var a);
    /// Mean squared error against a fixed target, as a 1x1 node.
    Var mse(Var pred, const Matrix& target);

    const Matrix& value(Var v) const;
    bool requires_grad(Var v) const { return nodes_[v.index].requires_grad; }
    /// Gradient accumulated by the last backward(); empty if none reached v.
    const Matrix& grad(Var v) const { return nodes_[v.index].grad; }

    /// Seeds d(out)/d(out) = 1 on a 1x1 node and propagates.
    void backward(Var out);

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        const Matrix* ref = nullptr;
        Matrix owned;
        Matrix grad;
        bool requires_grad = false;
        std::function<void(Tape&, std::size_t)> backprop;
    };

    Var push(Matrix&& value, bool requires_grad, std::function<void(Tape&, std::size_t)> backprop);
    void accumulate(Var v, const Matrix& g);
    Node& node(Var v) { return nodes_[v.index]; }

    std::vector<Node> nodes_;
};

}  // namespace p4q::ad
