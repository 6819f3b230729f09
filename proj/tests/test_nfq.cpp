// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "p4q/error.hpp"
#include "p4q/nfq.hpp"

using namespace p4q;
using namespace p4q::nfq;

namespace {

template <class F>
ErrorKind kind_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::io;
}

std::vector<double> to_vector(std::span<const double> s) { return {s.begin(), s.end()}; }

std::vector<std::uint32_t> codes_of(const QuantizedTensor& qt) {
    return unpack_codes(qt.codes, qt.bits, static_cast<std::size_t>(qt.numel()));
}

}  // namespace

TEST_CASE("nf codebook invariants for every width") {
    for (int k = kMinBits; k <= kMaxBits; ++k) {
        const Codebook cb = build_nf_codebook(k);
        REQUIRE(cb.size() == (std::size_t{1} << k));
        CHECK(cb[0] == -1.0);
        CHECK(cb[cb.size() - 1] == 1.0);
        int zeros = 0;
        for (std::size_t i = 0; i < cb.size(); ++i) {
            zeros += cb[i] == 0.0 ? 1 : 0;
            if (i > 0) CHECK(cb[i] > cb[i - 1]);
        }
        CHECK(zeros == 1);
        CHECK(cb[cb.zero_index()] == 0.0);
        CHECK(cb.zero_index() == (std::size_t{1} << (k - 1)) - 1);
    }
}

TEST_CASE("nf codebook matches the bisection oracle") {
    for (int k = kMinBits; k <= kMaxBits; ++k) {
        const std::vector<double> want = oracle::nf_codebook(k);
        const Codebook cb = build_nf_codebook(k);
        REQUIRE(want.size() == cb.size());
        for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::fabs(cb[i] - want[i]) <= 1e-6);
    }
}

TEST_CASE("nf2 has the form -1, 0, c, 1") {
    const Codebook cb = build_nf_codebook(2);
    const std::vector<double> want = oracle::nf_codebook(2);
    CHECK(cb[0] == -1.0);
    CHECK(cb[1] == 0.0);
    CHECK(cb[2] > 0.0);
    CHECK(cb[2] < 1.0);
    CHECK(std::fabs(cb[2] - want[2]) <= 1e-9);
    // c is the 0.5 + 0.375/2 quantile over the 1 - 1/8 quantile.
    CHECK(cb[2] == doctest::Approx(oracle::inv_cdf(0.6875L) / oracle::inv_cdf(0.875L)).epsilon(1e-12));
}

TEST_CASE("uniform codebook") {
    const Codebook two = build_uniform_codebook(2);
    REQUIRE(two.size() == 4);
    CHECK(two[0] == -1.0);
    CHECK(two[1] == 0.0);
    CHECK(two[2] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(two[3] == 1.0);

    const Codebook three = build_uniform_codebook(3);
    REQUIRE(three.size() == 8);
    CHECK(three[0] == -1.0);
    CHECK(three[7] == 1.0);
    CHECK(three[3] == 0.0);  // -1/7 and 1/7 tie, the lower index is snapped
    for (std::size_t i = 1; i < 8; ++i)
        if (i != 3 && i != 4) CHECK(three[i] - three[i - 1] == doctest::Approx(2.0 / 7.0));

    const Codebook four = build_uniform_codebook(4);
    for (std::size_t i = 1; i < 16; ++i) {
        if (i == 7 || i == 8) continue;  // neighbours of the snapped entry
        CHECK(four[i] - four[i - 1] == doctest::Approx(2.0 / 15.0));
    }
    CHECK(four[7] == 0.0);
}

TEST_CASE("bit width bounds") {
    CHECK(kind_of([] { build_nf_codebook(1); }) == ErrorKind::parameter);
    CHECK(kind_of([] { build_nf_codebook(9); }) == ErrorKind::parameter);
    CHECK(kind_of([] { build_uniform_codebook(0); }) == ErrorKind::parameter);
}

TEST_CASE("nearest with ties to the lower index") {
    const Codebook cb = build_uniform_codebook(2);  // -1, 0, 1/3, 1
    CHECK(cb.nearest(-0.5) == 0);
    CHECK(cb.nearest(-0.49) == 1);
    CHECK(cb.nearest(1.0 / 6.0) == oracle::argmin(to_vector(cb.values()), 1.0 / 6.0));
    CHECK(cb.nearest(2.0 / 3.0) == 2);
    CHECK(cb.nearest(1.0) == 3);
    CHECK(cb.nearest(-1.0) == 0);
}

TEST_CASE("quantize_block edge cases") {
    const Codebook cb = build_nf_codebook(4);
    const std::vector<double> zeros(10, 0.0);
    const QuantizedBlock z = quantize_block(zeros, cb);
    CHECK(z.scale == 0.0f);
    for (auto c : z.codes) CHECK(c == cb.zero_index());

    const std::vector<double> constant(7, 3.5);
    const QuantizedBlock c = quantize_block(constant, cb);
    CHECK(c.scale == 3.5f);
    for (auto code : c.codes) CHECK(code == 15);

    const std::vector<double> bad{1.0, std::nan("")};
    CHECK(kind_of([&] { quantize_block(bad, cb); }) == ErrorKind::data);
    CHECK(kind_of([&] { quantize_block(std::span<const double>{}, cb); }) == ErrorKind::parameter);
}

TEST_CASE("quantize_block picks the exhaustive argmin") {
    const Codebook cb = build_nf_codebook(4);
    const std::vector<double> values = to_vector(cb.values());
    RngStream rng(4);
    for (int t = 0; t < 50; ++t) {
        const Matrix v = random_normal(rng, 1, 64, 1.0);
        const QuantizedBlock q = quantize_block(v.values(), cb);
        for (std::size_t i = 0; i < 64; ++i)
            CHECK(q.codes[i] == oracle::argmin(values, v[i] / static_cast<double>(q.scale)));
    }
}

TEST_CASE("block partition arithmetic") {
    RngStream rng(5);
    const Matrix w = random_normal(rng, 8, 8, 1.0);
    const Codebook cb = build_nf_codebook(4);
    const QuantizedTensor one = quantize_tensor(w, cb, 64);
    CHECK(one.block_count() == 1);
    CHECK(one.codes.size() == 32);
    const QuantizedTensor seven = quantize_tensor(w, cb, 10);
    CHECK(seven.block_count() == 7);
    CHECK(block_count(64, 10) == 7);
    CHECK(packed_code_bytes(63, 4) == 32);
    CHECK(packed_code_bytes(8, 3) == 3);
    CHECK(kind_of([&] { quantize_tensor(w, cb, 0); }) == ErrorKind::parameter);

    // Scales are the float absmax of each block.
    for (std::size_t b = 0; b < 7; ++b) {
        double m = 0.0;
        for (std::size_t i = b * 10; i < std::min<std::size_t>(64, b * 10 + 10); ++i) m = std::max(m, std::fabs(w[i]));
        CHECK(seven.scales[b] == static_cast<float>(m));
    }
}

TEST_CASE("constant and zero matrices round-trip exactly") {
    const Codebook cb = build_nf_codebook(4);
    const Matrix c = Matrix::filled(5, 7, -2.25);
    CHECK(dequantize(quantize_tensor(c, cb, 16), cb) == c);
    const Matrix z(4, 4);
    const QuantizedTensor qz = quantize_tensor(z, cb, 5);
    for (float s : qz.scales) CHECK(s == 0.0f);
    CHECK(dequantize(qz, cb) == z);
    CHECK(quant_stats(c, quantize_tensor(c, cb, 16), cb).mse == 0.0);
}

TEST_CASE("outliers stay in their block") {
    RngStream rng(6);
    Matrix w = random_normal(rng, 16, 16, 1.0);
    const Codebook cb = build_nf_codebook(4);
    const Matrix plain = dequantize(quantize_tensor(w, cb, 64), cb);
    Matrix spiked = w;
    spiked[5] = 100.0;
    const Matrix with = dequantize(quantize_tensor(spiked, cb, 64), cb);
    for (std::size_t i = 64; i < w.size(); ++i) CHECK(with[i] == plain[i]);
    bool changed = false;
    for (std::size_t i = 0; i < 64; ++i) changed |= i != 5 && with[i] != plain[i];
    CHECK(changed);
}

TEST_CASE("round-trip error bound and absmax exactness") {
    for (int k : {2, 3, 4, 8}) {
        const Codebook cb = build_nf_codebook(k);
        const double g = cb.max_gap();
        RngStream rng(100 + k);
        for (int t = 0; t < 100; ++t) {
            const Matrix w = random_normal(rng, 12, 11, 1.0);
            const QuantizedTensor qt = quantize_tensor(w, cb, 64);
            const Matrix r = dequantize(qt, cb);
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double s = qt.scales[i / 64];
                REQUIRE(std::fabs(r[i] - w[i]) <= s * g / 2 * (1 + 1e-12) + 1e-300);
            }
            for (std::size_t b = 0; b < qt.block_count(); ++b) {
                double best = INFINITY;
                for (std::size_t i = b * 64; i < std::min<std::size_t>(w.size(), b * 64 + 64); ++i)
                    best = std::min(best, std::fabs(r[i] - w[i]));
                CHECK(best <= std::fabs(static_cast<double>(qt.scales[b])) * 6e-8);
            }
        }
    }
}

TEST_CASE("threads do not change the result") {
    RngStream rng(7);
    const Matrix w = random_normal(rng, 64, 48, 1.0);
    const Codebook cb = build_nf_codebook(4);
    const QuantizedTensor ref = quantize_tensor(w, cb, 64, 1);
    for (unsigned t : {2u, 3u, 8u}) CHECK(quantize_tensor(w, cb, 64, t) == ref);
}

TEST_CASE("pack and unpack") {
    CHECK(pack_codes(std::vector<std::uint32_t>{0x1, 0xF}, 4) == std::vector<std::uint8_t>{0xF1});
    CHECK(pack_codes(std::vector<std::uint32_t>{0xA}, 4) == std::vector<std::uint8_t>{0x0A});
    CHECK(pack_codes(std::vector<std::uint32_t>(8, 7), 3) == std::vector<std::uint8_t>{0xFF, 0xFF, 0xFF});
    CHECK(kind_of([] { pack_codes(std::vector<std::uint32_t>{16}, 4); }) == ErrorKind::parameter);

    RngStream rng(8);
    for (int k = 2; k <= 8; ++k) {
        std::vector<std::uint32_t> codes(101);
        for (auto& c : codes) c = static_cast<std::uint32_t>(rng.below(std::uint64_t{1} << k));
        const auto packed = pack_codes(codes, k);
        CHECK(packed.size() == packed_code_bytes(codes.size(), k));
        CHECK(unpack_codes(packed, k, codes.size()) == codes);
    }
}

TEST_CASE("dequantize validates the codebook") {
    RngStream rng(9);
    const Matrix w = random_normal(rng, 4, 4, 1.0);
    const QuantizedTensor qt = quantize_tensor(w, build_nf_codebook(4), 8);
    CHECK(kind_of([&] { dequantize(qt, build_nf_codebook(3)); }) == ErrorKind::parameter);
    CHECK(kind_of([&] { quant_stats(Matrix(2, 8), qt, build_nf_codebook(4)); }) == ErrorKind::parameter);
}

TEST_CASE("stats arithmetic") {
    CHECK(bits_per_param(4, 64) == 4.5);
    RngStream rng(10);
    const Matrix w = random_normal(rng, 16, 16, 1.0);
    const Codebook cb = build_nf_codebook(4);
    const QuantStats s = quant_stats(w, quantize_tensor(w, cb, 64), cb);
    CHECK(s.bits_per_param == 4.5);
    CHECK(s.compression_ratio_vs_fp32 == 32.0 / 4.5);
    CHECK(s.mse > 0.0);
    CHECK(s.max_abs_err > 0.0);
}

TEST_CASE("nf4 beats uniform4 on a gaussian matrix") {
    const SchemeComparison c = compare_schemes(4, 64, 3, 21);
    CHECK(c.nf_wins == 3);
    CHECK(c.nf_mse < c.uniform_mse);
}

namespace {

std::vector<double> code_frequencies(const Matrix& w, CodebookKind kind, std::size_t block) {
    const Codebook cb = build_codebook(4, kind);
    const auto codes = codes_of(quantize_tensor(w, cb, block));
    std::vector<double> freq(cb.size(), 0.0);
    for (auto c : codes) freq[c] += 1.0 / static_cast<double>(codes.size());
    return freq;
}

double entropy(const std::vector<double>& freq) {
    double h = 0.0;
    for (double f : freq)
        if (f > 0.0) h -= f * std::log2(f);
    return h;
}

}  // namespace

// With B = 1024 the block absmax sits near 3.2 sigma while the outer NF4 entries
// sit at the 1/32 quantile (1.86 sigma) before normalization, so the outermost
// codes are rare: about 0.2% each, measured here and by an independent numpy
// run. The equal-mass band therefore only holds for small blocks, whose absmax
// is close to that quantile; at B = 1024 NF4 is checked to be the more
// balanced of the two schemes.
TEST_CASE("bin balance over 10^6 gaussian samples") {
    RngStream rng(31);
    const Matrix w = random_normal(rng, 1000, 1000, 1.0);

    const auto nf_small = code_frequencies(w, CodebookKind::normal_float, 16);
    for (double f : nf_small) {
        CHECK(f >= 1.0 / 32);
        CHECK(f <= 3.0 / 32);
    }

    const auto nf = code_frequencies(w, CodebookKind::normal_float, 1024);
    const auto uni = code_frequencies(w, CodebookKind::uniform, 1024);
    CHECK(uni.front() < 1.0 / 64);
    CHECK(uni.back() < 1.0 / 64);
    CHECK(entropy(nf) > entropy(uni));
    CHECK(*std::max_element(nf.begin(), nf.end()) < *std::max_element(uni.begin(), uni.end()));
    CHECK(*std::max_element(nf.begin(), nf.end()) < 0.125);
}
