// SPDX-License-Identifier: Apache-2.0

#include "p4q/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "p4q/error.hpp"

namespace p4q::ad {

Var Tape::constant(const Matrix& ref) {
    Node n;
    n.ref = &ref;
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
}

Var Tape::constant(Matrix&& value) { return push(std::move(value), false, nullptr); }

Var Tape::parameter(const Matrix& ref) {
    Node n;
    n.ref = &ref;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
}

const Matrix& Tape::value(Var v) const {
    const Node& n = nodes_[v.index];
    return n.ref ? *n.ref : n.owned;
}

Var Tape::push(Matrix&& value, bool requires_grad, std::function<void(Tape&, std::size_t)> backprop) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
}

void Tape::accumulate(Var v, const Matrix& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
        n.grad = g;
    } else {
        for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }
}

Var Tape::matmul(Var a, Var b) {
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(p4q::matmul(value(a), value(b)), rg, [a, b](Tape& t, std::size_t self) {
        const Matrix& g = t.nodes_[self].grad;
        if (t.requires_grad(a)) t.accumulate(a, p4q::matmul(g, p4q::transpose(t.value(b))));
        if (t.requires_grad(b)) t.accumulate(b, p4q::matmul(p4q::transpose(t.value(a)), g));
    });
}

Var Tape::add(Var a, Var b) {
    const bool rg = requires_grad(a) || requires_grad(b);
    Matrix sum = value(a);
    const Matrix& rhs = value(b);
    require(sum.same_shape(rhs), ErrorKind::shape, "tape add: shape mismatch");
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += rhs[i];
    return push(std::move(sum), rg, [a, b](Tape& t, std::size_t self) {
        const Matrix& g = t.nodes_[self].grad;
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var Tape::add_column(Var x, Var bias) {
    const bool rg = requires_grad(x) || requires_grad(bias);
    Matrix out = value(x);
    const Matrix& bv = value(bias);
    require(bv.rows() == out.rows() && bv.cols() == 1, ErrorKind::shape, "tape add_column: bias shape");
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[r];
    return push(std::move(out), rg, [x, bias](Tape& t, std::size_t self) {
        const Matrix& g = t.nodes_[self].grad;
        t.accumulate(x, g);
        if (t.requires_grad(bias)) {
            Matrix gb(g.rows(), 1);
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) gb[r] += g(r, c);
            t.accumulate(bias, gb);
        }
    });
}

Var Tape::scale(Var a, double factor) {
    return push(p4q::scaled(value(a), factor), requires_grad(a), [a, factor](Tape& t, std::size_t self) {
        t.accumulate(a, p4q::scaled(t.nodes_[self].grad, factor));
    });
}

Var Tape::tanh(Var a) {
    Matrix out = value(a);
    for (double& v : out.values()) v = std::tanh(v);
    return push(std::move(out), requires_grad(a), [a](Tape& t, std::size_t self) {
        const Node& n = t.nodes_[self];
        Matrix g = n.grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - n.owned[i] * n.owned[i];
        t.accumulate(a, g);
    });
}

Var Tape::transpose(Var a) {
    return push(p4q::transpose(value(a)), requires_grad(a), [a](Tape& t, std::size_t self) {
        t.accumulate(a, p4q::transpose(t.nodes_[self].grad));
    });
}

Var Tape::softmax_rows(Var a) {
    Matrix out = value(a);
    for (std::size_t r = 0; r < out.rows(); ++r) {
        double hi = out(r, 0);
        for (std::size_t c = 1; c < out.cols(); ++c) hi = std::max(hi, out(r, c));
        double sum = 0.0;
        for (std::size_t c = 0; c < out.cols(); ++c) {
            out(r, c) = std::exp(out(r, c) - hi);
            sum += out(r, c);
        }
        for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) /= sum;
    }
    return push(std::move(out), requires_grad(a), [a](Tape& t, std::size_t self) {
        const Node& n = t.nodes_[self];
        const Matrix& y = n.owned;
        Matrix g(y.rows(), y.cols());
        for (std::size_t r = 0; r < y.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < y.cols(); ++c) dot += n.grad(r, c) * y(r, c);
            for (std::size_t c = 0; c < y.cols(); ++c) g(r, c) = y(r, c) * (n.grad(r, c) - dot);
        }
        t.accumulate(a, g);
    });
}

Var Tape::mse(Var pred, const Matrix& target) {
    const Matrix& p = value(pred);
    require(p.same_shape(target), ErrorKind::shape, "mse: prediction and target shapes differ");
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = p[i] - target[i];
        sum += d * d;
    }
    const auto n = static_cast<double>(p.size());
    Matrix out(1, 1);
    out[0] = sum / n;
    return push(std::move(out), requires_grad(pred), [pred, &target, n](Tape& t, std::size_t self) {
        const double upstream = t.nodes_[self].grad[0];
        const Matrix& pv = t.value(pred);
        Matrix g(pv.rows(), pv.cols());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = upstream * 2.0 * (pv[i] - target[i]) / n;
        t.accumulate(pred, g);
    });
}

void Tape::backward(Var out) {
    require(value(out).size() == 1, ErrorKind::shape, "backward: output must be a scalar");
    for (Node& n : nodes_) n.grad = Matrix();
    if (!requires_grad(out)) return;
    nodes_[out.index].grad = Matrix::filled(1, 1, 1.0);
    for (std::size_t i = out.index + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backprop && !n.grad.empty()) n.backprop(*this, i);
    }
}

}  // namespace p4q::ad
