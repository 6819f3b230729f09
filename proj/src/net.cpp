// SPDX-License-Identifier: Apache-2.0

#include "p4q/net.hpp"

#include <cmath>
#include <unordered_map>

#include <fmt/format.h>

#include "p4q/error.hpp"

namespace p4q::net {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

Weight make_weight(std::size_t d_out, std::size_t d_in, RngStream& rng) {
    Weight w;
    w.value = random_normal(rng, d_out, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)));
    return w;
}

std::size_t block_in(const Block& b) {
    return std::visit(overloaded{[](const Linear& l) { return l.weight.value.cols(); },
                                 [](const SelfAttention& a) { return a.query.value.cols(); },
                                 [](const Tanh&) { return std::size_t{0}; }},
                      b);
}

std::size_t block_out(const Block& b) {
    return std::visit(overloaded{[](const Linear& l) { return l.weight.value.rows(); },
                                 [](const SelfAttention& a) { return a.output.value.rows(); },
                                 [](const Tanh&) { return std::size_t{0}; }},
                      b);
}

void check_weight(const Weight& w, const std::string& name) {
    require(!w.value.empty(), ErrorKind::shape, name + ": empty weight");
    if (w.state == BaseState::quantized) {
        require(w.quantized.has_value() && w.codebook.has_value(), ErrorKind::parameter,
                name + ": quantized weight without codes or codebook");
    }
    if (w.adapter) {
        lora::validate(*w.adapter);
        require(w.adapter->d_out() == w.value.rows() && w.adapter->d_in() == w.value.cols(), ErrorKind::shape,
                name + ": adapter shape does not match weight");
    }
}

}  // namespace

ToyModel::ToyModel(std::vector<Block> blocks) : blocks_(std::move(blocks)) { check_dims(); }

void ToyModel::check_dims() const {
    std::size_t width = 0;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::size_t in = block_in(blocks_[i]);
        if (in == 0) continue;
        if (width != 0 && in != width) {
            fail(ErrorKind::shape, fmt::format("block {} expects width {}, previous block produces {}", i, in, width));
        }
        width = block_out(blocks_[i]);
        if (const auto* l = std::get_if<Linear>(&blocks_[i])) {
            require(l->bias.rows() == l->weight.value.rows() && l->bias.cols() == 1, ErrorKind::shape,
                    fmt::format("block {}: bias must be d_out x 1", i));
        }
        if (const auto* a = std::get_if<SelfAttention>(&blocks_[i])) {
            for (const Weight* w : {&a->query, &a->key, &a->value, &a->output}) {
                require(w->value.rows() == in && w->value.cols() == in, ErrorKind::shape,
                        fmt::format("block {}: attention projections must be square", i));
            }
        }
    }
    for (const auto& [name, w] : weights()) check_weight(*w, name);
}

std::size_t ToyModel::input_dim() const {
    for (const auto& b : blocks_)
        if (const std::size_t in = block_in(b)) return in;
    return 0;
}

std::size_t ToyModel::output_dim() const {
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it)
        if (const std::size_t out = block_out(*it)) return out;
    return 0;
}

std::vector<std::pair<std::string, Weight*>> ToyModel::weights() {
    std::vector<std::pair<std::string, Weight*>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        if (auto* l = std::get_if<Linear>(&blocks_[i])) out.emplace_back(fmt::format("{}.weight", i), &l->weight);
        if (auto* a = std::get_if<SelfAttention>(&blocks_[i])) {
            out.emplace_back(fmt::format("{}.wq", i), &a->query);
            out.emplace_back(fmt::format("{}.wk", i), &a->key);
            out.emplace_back(fmt::format("{}.wv", i), &a->value);
            out.emplace_back(fmt::format("{}.wo", i), &a->output);
        }
    }
    return out;
}

std::vector<std::pair<std::string, const Weight*>> ToyModel::weights() const {
    auto mutable_list = const_cast<ToyModel*>(this)->weights();
    return {mutable_list.begin(), mutable_list.end()};
}

std::vector<std::pair<std::string, Matrix*>> ToyModel::biases() {
    std::vector<std::pair<std::string, Matrix*>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i)
        if (auto* l = std::get_if<Linear>(&blocks_[i])) out.emplace_back(fmt::format("{}.bias", i), &l->bias);
    return out;
}

std::vector<std::pair<std::string, const Matrix*>> ToyModel::biases() const {
    auto mutable_list = const_cast<ToyModel*>(this)->biases();
    return {mutable_list.begin(), mutable_list.end()};
}

bool ToyModel::is_quantized() const {
    for (const auto& [name, w] : weights())
        if (w->state == BaseState::quantized) return true;
    return false;
}

std::size_t ToyModel::weight_scalars() const {
    std::size_t n = 0;
    for (const auto& [name, w] : weights()) n += w->value.size();
    return n;
}

std::size_t ToyModel::bias_scalars() const {
    std::size_t n = 0;
    for (const auto& [name, b] : biases()) n += b->size();
    return n;
}

std::size_t ToyModel::adapter_scalars() const {
    std::size_t n = 0;
    for (const auto& [name, w] : weights())
        if (w->adapter) n += w->adapter->parameter_count();
    return n;
}

ToyModel make_model(const ModelShape& shape, RngStream& rng, double bias_std) {
    require(shape.d_in > 0 && shape.d_model > 0 && shape.d_out > 0, ErrorKind::parameter,
            "model dimensions must be positive");
    Linear in{make_weight(shape.d_model, shape.d_in, rng), random_normal(rng, shape.d_model, 1, bias_std)};
    SelfAttention attn{make_weight(shape.d_model, shape.d_model, rng), make_weight(shape.d_model, shape.d_model, rng),
                       make_weight(shape.d_model, shape.d_model, rng), make_weight(shape.d_model, shape.d_model, rng)};
    Linear out{make_weight(shape.d_out, shape.d_model, rng), random_normal(rng, shape.d_out, 1, bias_std)};
    return ToyModel({std::move(in), Tanh{}, std::move(attn), std::move(out)});
}

ToyModel make_zero_model(const ModelShape& shape) {
    auto zero = [](std::size_t r, std::size_t c) {
        Weight w;
        w.value = Matrix(r, c);
        return w;
    };
    const std::size_t d = shape.d_model;
    return ToyModel({Linear{zero(d, shape.d_in), Matrix(d, 1)}, Tanh{},
                     SelfAttention{zero(d, d), zero(d, d), zero(d, d), zero(d, d)},
                     Linear{zero(shape.d_out, d), Matrix(shape.d_out, 1)}});
}

std::vector<ParamRef> trainable_parameters(ToyModel& model, TrainMode mode) {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < model.blocks().size(); ++i) {
        Block& block = model.blocks()[i];
        auto add_weight = [&](Weight& w, const std::string& name) {
            if (mode == TrainMode::fft) {
                if (w.state == BaseState::quantized) {
                    fail(ErrorKind::parameter, name + ": full fine-tuning needs a full-precision base");
                }
                if (w.state == BaseState::trainable) out.push_back({name, &w.value});
            } else if (w.adapter) {
                out.push_back({name + ".lora_a", &w.adapter->a});
                out.push_back({name + ".lora_b", &w.adapter->b});
            }
        };
        if (auto* l = std::get_if<Linear>(&block)) {
            add_weight(l->weight, fmt::format("{}.weight", i));
            out.push_back({fmt::format("{}.bias", i), &l->bias});
        } else if (auto* a = std::get_if<SelfAttention>(&block)) {
            add_weight(a->query, fmt::format("{}.wq", i));
            add_weight(a->key, fmt::format("{}.wk", i));
            add_weight(a->value, fmt::format("{}.wv", i));
            add_weight(a->output, fmt::format("{}.wo", i));
        }
    }
    return out;
}

namespace {

/// Records the forward pass on a tape, marking the matrices in `trainable` as parameters.
class Recorder {
public:
    Recorder(ad::Tape& tape, std::span<const ParamRef> trainable) : tape_(tape) {
        for (const ParamRef& p : trainable) wanted_.emplace(p.value, ad::Var{});
    }

    ad::Var bind(const Matrix& m) {
        auto it = wanted_.find(&m);
        if (it == wanted_.end()) return tape_.constant(m);
        it->second = tape_.parameter(m);
        return it->second;
    }

    ad::Var var_of(const Matrix* m) const { return wanted_.at(m); }

    ad::Var weight(const Weight& w, ad::Var x) {
        ad::Var y = tape_.matmul(bind(w.value), x);
        if (!w.adapter) return y;
        const ad::Var ax = tape_.matmul(bind(w.adapter->a), x);
        const ad::Var low = tape_.scale(tape_.matmul(bind(w.adapter->b), ax), w.adapter->scaling());
        return tape_.add(y, low);
    }

    ad::Var run(const ToyModel& model, const Matrix& x) {
        if (x.rows() != model.input_dim()) {
            fail(ErrorKind::parameter,
                 fmt::format("forward: input has {} rows, model expects {}", x.rows(), model.input_dim()));
        }
        ad::Var h = tape_.constant(x);
        for (const Block& block : model.blocks()) {
            std::visit(overloaded{[&](const Linear& l) { h = tape_.add_column(weight(l.weight, h), bind(l.bias)); },
                                  [&](const Tanh&) { h = tape_.tanh(h); },
                                  [&](const SelfAttention& a) { h = attention(a, h); }},
                       block);
        }
        return h;
    }

private:
    ad::Var attention(const SelfAttention& a, ad::Var h) {
        const ad::Var q = weight(a.query, h);
        const ad::Var k = weight(a.key, h);
        const ad::Var v = weight(a.value, h);
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(a.query.value.rows()));
        const ad::Var scores = tape_.scale(tape_.matmul(tape_.transpose(q), k), inv_sqrt_d);
        const ad::Var probs = tape_.softmax_rows(scores);
        const ad::Var mixed = tape_.matmul(v, tape_.transpose(probs));
        return tape_.add(h, weight(a.output, mixed));
    }

    ad::Tape& tape_;
    std::unordered_map<const Matrix*, ad::Var> wanted_;
};

Gradients gradients_for(const ToyModel& model, std::vector<ParamRef> params, const Matrix& x, const Matrix& target) {
    ad::Tape tape;
    Recorder rec(tape, params);
    const ad::Var pred = rec.run(model, x);
    const ad::Var loss = tape.mse(pred, target);
    tape.backward(loss);

    Gradients g;
    g.loss = tape.value(loss)[0];
    g.grads.reserve(params.size());
    for (const ParamRef& p : params) {
        const Matrix& grad = tape.grad(rec.var_of(p.value));
        g.grads.push_back(grad.empty() ? Matrix(p.value->rows(), p.value->cols()) : grad);
    }
    g.params = std::move(params);
    return g;
}

}  // namespace

Matrix forward(const ToyModel& model, const Matrix& x) {
    ad::Tape tape;
    Recorder rec(tape, {});
    return tape.value(rec.run(model, x));
}

double loss_mse(const Matrix& pred, const Matrix& target) {
    if (!pred.same_shape(target)) {
        fail(ErrorKind::shape, fmt::format("loss_mse: {}x{} vs {}x{}", pred.rows(), pred.cols(), target.rows(),
                                           target.cols()));
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        sum += d * d;
    }
    return sum / static_cast<double>(pred.size());
}

Gradients backward(ToyModel& model, const Matrix& x, const Matrix& target, TrainMode mode) {
    return gradients_for(model, trainable_parameters(model, mode), x, target);
}

void validate(const AdamConfig& c) {
    require(std::isfinite(c.learning_rate) && c.learning_rate > 0.0, ErrorKind::parameter,
            "learning rate must be positive");
    require(c.beta1 > 0.0 && c.beta1 < 1.0 && c.beta2 > 0.0 && c.beta2 < 1.0, ErrorKind::parameter,
            "Adam betas must lie in (0, 1)");
    require(std::isfinite(c.epsilon) && c.epsilon > 0.0, ErrorKind::parameter, "Adam epsilon must be positive");
}

void adam_step(std::span<const ParamRef> params, std::span<const Matrix> grads, AdamState& state,
               const AdamConfig& config) {
    require(params.size() == grads.size(), ErrorKind::shape, "adam_step: parameter/gradient count mismatch");
    if (state.m.empty()) {
        for (const ParamRef& p : params) {
            state.m.emplace_back(p.value->rows(), p.value->cols());
            state.v.emplace_back(p.value->rows(), p.value->cols());
        }
    }
    require(state.m.size() == params.size(), ErrorKind::shape, "adam_step: state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        require(params[i].value->same_shape(grads[i]) && state.m[i].same_shape(grads[i]), ErrorKind::shape,
                "adam_step: shape mismatch for " + params[i].name);
    }

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& w = *params[i].value;
        Matrix& m = state.m[i];
        Matrix& v = state.v[i];
        const Matrix& g = grads[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            const double m_hat = m[j] / c1;
            const double v_hat = v[j] / c2;
            w[j] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
        }
    }
}

Dataset make_dataset(const Matrix& x, const Matrix& y, std::size_t batch_size) {
    require(batch_size >= 1, ErrorKind::parameter, "batch size must be at least 1");
    require(x.cols() == y.cols(), ErrorKind::shape, "inputs and targets must have the same number of columns");
    Dataset data;
    for (std::size_t first = 0; first < x.cols(); first += batch_size) {
        const std::size_t n = std::min(batch_size, x.cols() - first);
        data.push_back({column_slice(x, first, n), column_slice(y, first, n)});
    }
    return data;
}

std::size_t sample_count(const Dataset& data) {
    std::size_t n = 0;
    for (const Batch& b : data) n += b.x.cols();
    return n;
}

double evaluate(const ToyModel& model, const Dataset& data) {
    require(!data.empty(), ErrorKind::parameter, "evaluate: empty dataset");
    double sum = 0.0;
    std::size_t count = 0;
    for (const Batch& b : data) {
        sum += loss_mse(forward(model, b.x), b.y) * static_cast<double>(b.y.size());
        count += b.y.size();
    }
    return sum / static_cast<double>(count);
}

TrainResult train(ToyModel model, std::span<const Dataset> datasets, const TrainConfig& config) {
    require(!datasets.empty(), ErrorKind::parameter, "train: no datasets");
    for (const Dataset& d : datasets) require(sample_count(d) > 0, ErrorKind::parameter, "train: empty dataset");
    validate(config.adam);

    TrainResult result{std::move(model), {}};
    const std::vector<ParamRef> params = trainable_parameters(result.model, config.mode);
    AdamState state;
    RngStream rng(config.seed);

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<std::vector<std::size_t>> orders;
        std::size_t longest = 0;
        for (const Dataset& d : datasets) {
            std::vector<std::size_t> order(d.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
            longest = std::max(longest, order.size());
            orders.push_back(std::move(order));
        }

        double weighted = 0.0;
        std::size_t entries = 0;
        for (std::size_t round = 0; round < longest; ++round) {
            for (std::size_t s = 0; s < datasets.size(); ++s) {
                if (round >= orders[s].size()) continue;
                const Batch& batch = datasets[s][orders[s][round]];
                Gradients g = gradients_for(result.model, params, batch.x, batch.y);
                adam_step(params, g.grads, state, config.adam);
                weighted += g.loss * static_cast<double>(batch.y.size());
                entries += batch.y.size();
            }
        }
        result.epoch_losses.push_back(weighted / static_cast<double>(entries));
    }
    return result;
}

TrainResult train(ToyModel model, const Dataset& dataset, const TrainConfig& config) {
    return train(std::move(model), std::span<const Dataset>(&dataset, 1), config);
}

ToyModel attach_fresh_adapters(ToyModel model, std::size_t rank, double alpha, RngStream& rng) {
    for (auto& [name, w] : model.weights()) {
        w->adapter = lora::init_adapter(w->value.rows(), w->value.cols(), rank, alpha, rng);
    }
    return model;
}

ToyModel quantize_weights(ToyModel model, const nfq::Codebook& codebook, std::size_t block_size) {
    for (auto& [name, w] : model.weights()) {
        if (w->state == BaseState::quantized) fail(ErrorKind::parameter, name + " is already quantized");
    }
    for (auto& [name, w] : model.weights()) {
        w->quantized = nfq::quantize_tensor(w->value, codebook, block_size);
        w->codebook = codebook;
        w->value = nfq::dequantize(*w->quantized, codebook);
        w->state = BaseState::quantized;
    }
    return model;
}

}  // namespace p4q::net
