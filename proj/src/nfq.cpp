// SPDX-License-Identifier: Apache-2.0

#include "p4q/nfq.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <thread>

#include <fmt/format.h>

#include "p4q/error.hpp"

namespace p4q::nfq {

namespace {

void check_bits(int bits) {
    if (bits < kMinBits || bits > kMaxBits) {
        fail(ErrorKind::parameter, fmt::format("bit width {} outside [{}, {}]", bits, kMinBits, kMaxBits));
    }
}

}  // namespace

Codebook::Codebook(int bits, CodebookKind kind, std::vector<double> values)
    : bits_(bits), kind_(kind), values_(std::move(values)) {
    check_bits(bits);
    require(values_.size() == (std::size_t{1} << bits), ErrorKind::parameter, "codebook must hold 2^k values");
    require(values_.front() == -1.0 && values_.back() == 1.0, ErrorKind::parameter,
            "codebook endpoints must be exactly -1 and +1");
    int zeros = 0;
    for (std::size_t i = 0; i < values_.size(); ++i) {
        if (i > 0) require(values_[i] > values_[i - 1], ErrorKind::parameter, "codebook must be strictly increasing");
        if (values_[i] == 0.0) {
            ++zeros;
            zero_index_ = static_cast<std::uint32_t>(i);
        }
    }
    require(zeros == 1, ErrorKind::parameter, "codebook must contain exactly one exact zero");
}

double Codebook::max_gap() const noexcept {
    double gap = 0.0;
    for (std::size_t i = 1; i < values_.size(); ++i) gap = std::max(gap, values_[i] - values_[i - 1]);
    return gap;
}

std::uint32_t Codebook::nearest(double x) const noexcept {
    // First entry >= x; the answer is it or its left neighbour.
    const auto it = std::lower_bound(values_.begin(), values_.end(), x);
    if (it == values_.begin()) return 0;
    if (it == values_.end()) return static_cast<std::uint32_t>(values_.size() - 1);
    const auto hi = static_cast<std::uint32_t>(it - values_.begin());
    const std::uint32_t lo = hi - 1;
    return std::abs(x - values_[lo]) <= std::abs(x - values_[hi]) ? lo : hi;
}

Codebook build_nf_codebook(int bits) {
    check_bits(bits);
    const std::size_t half = std::size_t{1} << (bits - 1);
    const double delta = std::ldexp(1.0, -(bits + 1));

    std::vector<double> values;
    values.reserve(2 * half);
    for (std::size_t i = 0; i + 1 < half; ++i) {
        const double p = delta + static_cast<double>(i) * (0.5 - delta) / static_cast<double>(half - 1);
        values.push_back(inv_normal_cdf(p));
    }
    values.push_back(0.0);
    for (std::size_t i = 1; i <= half; ++i) {
        const double p = i == half ? 1.0 - delta
                                   : 0.5 + static_cast<double>(i) * (0.5 - delta) / static_cast<double>(half);
        values.push_back(inv_normal_cdf(p));
    }
    const double norm = std::max(std::abs(values.front()), std::abs(values.back()));
    for (double& v : values) v /= norm;
    return Codebook(bits, CodebookKind::normal_float, std::move(values));
}

Codebook build_uniform_codebook(int bits) {
    check_bits(bits);
    const std::size_t n = std::size_t{1} << bits;
    const auto steps = static_cast<double>(n - 1);
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = -1.0 + 2.0 * static_cast<double>(i) / steps;
    // |v_i| is proportional to |2i - (n - 1)|; compare in integers for an exact tie rule.
    std::size_t snap = 0;
    auto dist = [n](std::size_t i) {
        const auto twice = static_cast<long long>(2 * i), mid = static_cast<long long>(n - 1);
        return std::llabs(twice - mid);
    };
    for (std::size_t i = 1; i < n; ++i) {
        if (dist(i) < dist(snap)) snap = i;
    }
    values[snap] = 0.0;
    return Codebook(bits, CodebookKind::uniform, std::move(values));
}

Codebook build_codebook(int bits, CodebookKind kind) {
    return kind == CodebookKind::normal_float ? build_nf_codebook(bits) : build_uniform_codebook(bits);
}

namespace {

float block_scale(std::span<const double> values) {
    double absmax = 0.0;
    for (double v : values) {
        if (!std::isfinite(v)) fail(ErrorKind::data, "cannot quantize non-finite value");
        absmax = std::max(absmax, std::abs(v));
    }
    const auto scale = static_cast<float>(absmax);
    if (!std::isfinite(scale)) fail(ErrorKind::data, "block absmax overflows a 32-bit scale");
    return scale;
}

void quantize_into(std::span<const double> values, const Codebook& codebook, std::uint32_t* codes, float& scale) {
    scale = block_scale(values);
    if (scale == 0.0f) {
        std::fill_n(codes, values.size(), codebook.zero_index());
        return;
    }
    const double divisor = scale;
    for (std::size_t i = 0; i < values.size(); ++i) codes[i] = codebook.nearest(values[i] / divisor);
}

}  // namespace

QuantizedBlock quantize_block(std::span<const double> values, const Codebook& codebook) {
    require(!values.empty(), ErrorKind::parameter, "quantize_block: empty block");
    QuantizedBlock block;
    block.codes.resize(values.size());
    quantize_into(values, codebook, block.codes.data(), block.scale);
    return block;
}

std::uint64_t QuantizedTensor::numel() const noexcept {
    std::uint64_t n = shape.empty() ? 0 : 1;
    for (auto d : shape) n *= d;
    return n;
}

std::uint64_t packed_code_bytes(std::uint64_t numel, int bits) {
    return (numel * static_cast<std::uint64_t>(bits) + 7) / 8;
}

std::uint64_t block_count(std::uint64_t numel, std::uint64_t block_size) {
    return (numel + block_size - 1) / block_size;
}

QuantizedTensor quantize_tensor(const Matrix& w, const Codebook& codebook, std::size_t block_size,
                                unsigned threads) {
    require(block_size >= 1, ErrorKind::parameter, "block size must be at least 1");
    require(block_size <= std::numeric_limits<std::uint32_t>::max(), ErrorKind::parameter, "block size too large");
    require(!w.empty(), ErrorKind::shape, "cannot quantize an empty matrix");

    const std::span<const double> flat = w.values();
    const std::size_t nblocks = block_count(flat.size(), block_size);
    std::vector<std::uint32_t> codes(flat.size());
    std::vector<float> scales(nblocks);

    auto run = [&](std::size_t first, std::size_t last) {
        for (std::size_t b = first; b < last; ++b) {
            const std::size_t begin = b * block_size;
            const std::size_t len = std::min(block_size, flat.size() - begin);
            quantize_into(flat.subspan(begin, len), codebook, codes.data() + begin, scales[b]);
        }
    };

    const std::size_t workers = std::clamp<std::size_t>(threads, 1, nblocks);
    if (workers == 1) {
        run(0, nblocks);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(workers);
        const std::size_t per = (nblocks + workers - 1) / workers;
        for (std::size_t t = 0; t < workers; ++t) {
            const std::size_t first = std::min(nblocks, t * per), last = std::min(nblocks, first + per);
            pool.emplace_back([&, t, first, last] {
                try {
                    run(first, last);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    QuantizedTensor qt;
    qt.shape = {w.rows(), w.cols()};
    qt.block_size = static_cast<std::uint32_t>(block_size);
    qt.bits = codebook.bits();
    qt.codes = pack_codes(codes, codebook.bits());
    qt.scales = std::move(scales);
    return qt;
}

Matrix dequantize(const QuantizedTensor& qt, const Codebook& codebook) {
    if (qt.bits != codebook.bits()) {
        fail(ErrorKind::parameter,
             fmt::format("dequantize: tensor has {}-bit codes, codebook is {}-bit", qt.bits, codebook.bits()));
    }
    require(qt.shape.size() == 1 || qt.shape.size() == 2, ErrorKind::shape,
            "dequantize: only 1-D and 2-D tensors map to a matrix");
    require(qt.block_size >= 1, ErrorKind::parameter, "dequantize: zero block size");
    const std::uint64_t n = qt.numel();
    require(qt.codes.size() == packed_code_bytes(n, qt.bits), ErrorKind::format, "dequantize: code byte count");
    require(qt.scales.size() == block_count(n, qt.block_size), ErrorKind::format, "dequantize: scale count");

    const std::size_t rows = qt.shape.size() == 2 ? qt.shape[0] : 1;
    const std::size_t cols = qt.shape.back();
    const std::vector<std::uint32_t> codes = unpack_codes(qt.codes, qt.bits, n);
    Matrix out(rows, cols);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = codebook[codes[i]] * static_cast<double>(qt.scales[i / qt.block_size]);
    }
    return out;
}

std::vector<std::uint8_t> pack_codes(std::span<const std::uint32_t> codes, int bits) {
    check_bits(bits);
    const std::uint32_t limit = 1u << bits;
    std::vector<std::uint8_t> out(packed_code_bytes(codes.size(), bits), 0);
    std::uint64_t bit = 0;
    for (std::uint32_t code : codes) {
        if (code >= limit) fail(ErrorKind::parameter, fmt::format("code {} does not fit in {} bits", code, bits));
        for (int j = 0; j < bits; ++j, ++bit) {
            if ((code >> j) & 1u) out[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
        }
    }
    return out;
}

std::vector<std::uint32_t> unpack_codes(std::span<const std::uint8_t> bytes, int bits, std::size_t count) {
    check_bits(bits);
    require(bytes.size() >= packed_code_bytes(count, bits), ErrorKind::format, "unpack_codes: stream too short");
    std::vector<std::uint32_t> out(count, 0);
    std::uint64_t bit = 0;
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t code = 0;
        for (int j = 0; j < bits; ++j, ++bit) code |= static_cast<std::uint32_t>((bytes[bit / 8] >> (bit % 8)) & 1u) << j;
        out[i] = code;
    }
    return out;
}

double bits_per_param(int bits, std::size_t block_size) {
    check_bits(bits);
    require(block_size >= 1, ErrorKind::parameter, "block size must be at least 1");
    return static_cast<double>(bits) + 32.0 / static_cast<double>(block_size);
}

QuantStats quant_stats(const Matrix& original, const QuantizedTensor& qt, const Codebook& codebook) {
    const Matrix restored = dequantize(qt, codebook);
    if (!restored.same_shape(original)) {
        fail(ErrorKind::parameter, fmt::format("quant_stats: original is {}x{}, quantized is {}x{}", original.rows(),
                                               original.cols(), restored.rows(), restored.cols()));
    }
    QuantStats st;
    double sum = 0.0;
    for (std::size_t i = 0; i < original.size(); ++i) {
        const double err = restored[i] - original[i];
        sum += err * err;
        st.max_abs_err = std::max(st.max_abs_err, std::abs(err));
    }
    st.mse = sum / static_cast<double>(original.size());
    st.bits_per_param = bits_per_param(qt.bits, qt.block_size);
    st.compression_ratio_vs_fp32 = 32.0 / st.bits_per_param;
    return st;
}

SchemeComparison compare_schemes(int bits, std::size_t block_size, std::size_t trials, std::uint64_t seed,
                                 std::size_t rows, std::size_t cols) {
    require(trials >= 1, ErrorKind::parameter, "compare_schemes: trials must be at least 1");
    const Codebook nf = build_nf_codebook(bits);
    const Codebook uni = build_uniform_codebook(bits);
    SchemeComparison out;
    out.trials = trials;
    const RngStream root(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        RngStream rng = root.child(t);
        const Matrix w = random_normal(rng, rows, cols, 1.0);
        const double e_nf = quant_stats(w, quantize_tensor(w, nf, block_size), nf).mse;
        const double e_uni = quant_stats(w, quantize_tensor(w, uni, block_size), uni).mse;
        out.nf_mse += e_nf;
        out.uniform_mse += e_uni;
        if (e_nf < e_uni) ++out.nf_wins;
    }
    out.nf_mse /= static_cast<double>(trials);
    out.uniform_mse /= static_cast<double>(trials);
    return out;
}

}  // namespace p4q::nfq
