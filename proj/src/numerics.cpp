// SPDX-License-Identifier: Apache-2.0

#include "p4q/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <fmt/format.h>

#include "p4q/error.hpp"

namespace p4q {

Matrix::Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols) {
    require(rows > 0 && cols > 0, ErrorKind::shape, "matrix dimensions must be positive");
    data_.assign(rows * cols, 0.0);
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(rows > 0 && cols > 0, ErrorKind::shape, "matrix dimensions must be positive");
    require(data_.size() == rows * cols, ErrorKind::shape,
            fmt::format("matrix data has {} entries, expected {}x{}", data_.size(), rows, cols));
    for (double v : data_) {
        require(std::isfinite(v), ErrorKind::data, "matrix entries must be finite");
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::filled(std::size_t rows, std::size_t cols, double value) {
    Matrix m(rows, cols);
    std::fill(m.data_.begin(), m.data_.end(), value);
    return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        fail(ErrorKind::shape, fmt::format("matmul: {}x{} * {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
    }
    const std::size_t m = a.rows(), n = a.cols(), p = b.cols();
    Matrix c(m, p);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* pc = c.values().data();
    // i-k-j order: c(i, j) still sums its terms for k = 0, 1, ... in sequence.
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = pc + i * p;
        for (std::size_t k = 0; k < n; ++k) {
            const double aik = pa[i * n + k];
            const double* brow = pb + k * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
    return t;
}

namespace {

void check_same(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        fail(ErrorKind::shape, fmt::format("{}: {}x{} vs {}x{}", op, a.rows(), a.cols(), b.rows(), b.cols()));
    }
}

}  // namespace

Matrix add(const Matrix& a, const Matrix& b) {
    check_same(a, b, "add");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
    return c;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
    check_same(a, b, "subtract");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
    return c;
}

Matrix scaled(const Matrix& m, double factor) {
    Matrix c = m;
    for (double& v : c.values()) v *= factor;
    return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    check_same(a, b, "hadamard");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
    return c;
}

double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.values()) s += v * v;
    return std::sqrt(s);
}

double max_abs(const Matrix& m) {
    double best = 0.0;
    for (double v : m.values()) best = std::max(best, std::abs(v));
    return best;
}

Matrix column_slice(const Matrix& m, std::size_t first, std::size_t count) {
    require(count > 0 && first + count <= m.cols(), ErrorKind::shape, "column slice out of range");
    Matrix out(m.rows(), count);
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < count; ++c) out(r, c) = m(r, first + c);
    return out;
}

RngStream::RngStream(std::uint64_t seed) : seed_(seed), engine_(seed) {}

std::uint64_t RngStream::next_u64() { return engine_(); }

double RngStream::uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1p-53;
}

double RngStream::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::uint64_t RngStream::below(std::uint64_t bound) {
    require(bound > 0, ErrorKind::parameter, "below: bound must be positive");
    // Rejection sampling keeps the draw unbiased and platform independent.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % bound;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Matrix sample_normal(RngStream& rng, std::size_t n, double mean, double stddev) {
    require(std::isfinite(mean), ErrorKind::parameter, "sample_normal: mean must be finite");
    require(std::isfinite(stddev) && stddev >= 0.0, ErrorKind::parameter,
            "sample_normal: stddev must be finite and non-negative");
    Matrix out(1, n);
    for (double& v : out.values()) v = mean + stddev * rng.normal();
    return out;
}

Matrix random_normal(RngStream& rng, std::size_t rows, std::size_t cols, double stddev) {
    Matrix out(rows, cols);
    for (double& v : out.values()) v = stddev * rng.normal();
    return out;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

namespace {

double poly(const double* c, int n, double x) {
    double acc = c[n - 1];
    for (int i = n - 2; i >= 0; --i) acc = acc * x + c[i];
    return acc;
}

// Wichura, Algorithm AS 241 (PPND16), valid for p in (0, 0.5].
double ppnd16_lower(double p) {
    static constexpr double a[] = {3.3871328727963666080e0, 1.3314166789178437745e+2, 1.9715909503065514427e+3,
                                   1.3731693765509461125e+4, 4.5921953931549871457e+4, 6.7265770927008700853e+4,
                                   3.3430575583588128105e+4, 2.5090809287301226727e+3};
    static constexpr double b[] = {1.0, 4.2313330701600911252e+1, 6.8718700749205790830e+2,
                                   5.3941960214247511077e+3, 2.1213794301586595867e+4, 3.9307895800092710610e+4,
                                   2.8729085735721942674e+4, 5.2264952788528545610e+3};
    static constexpr double c[] = {1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
                                   3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
                                   2.27238449892691845833e-2, 7.74545014278341407640e-4};
    static constexpr double d[] = {1.0, 2.05319162663775882187e0, 1.67638483018380384940e0,
                                   6.89767334985100004550e-1, 1.48103976427480074590e-1, 1.51986665636164571966e-2,
                                   5.47593808499534494600e-4, 1.05075007164441684324e-9};
    static constexpr double e[] = {6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
                                   2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
                                   2.71155556874348757815e-5, 2.01033439929228813265e-7};
    static constexpr double f[] = {1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1,
                                   1.48753612908506148525e-2, 7.86869131145613259100e-4, 1.84631831751005468180e-5,
                                   1.42151175831644588870e-7, 2.04426310338993978564e-15};

    const double q = p - 0.5;
    if (std::abs(q) <= 0.425) {
        const double r = 0.180625 - q * q;
        return q * poly(a, 8, r) / poly(b, 8, r);
    }
    double r = std::sqrt(-std::log(p));
    double z;
    if (r <= 5.0) {
        r -= 1.6;
        z = poly(c, 8, r) / poly(d, 8, r);
    } else {
        r -= 5.0;
        z = poly(e, 8, r) / poly(f, 8, r);
    }
    return -z;
}

}  // namespace

double inv_normal_cdf(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        fail(ErrorKind::domain, fmt::format("inv_normal_cdf: p = {} outside (0, 1)", p));
    }
    if (p == 0.5) return 0.0;
    // 1 - p is exact for p in (0.5, 1), which gives bitwise antisymmetry.
    if (p > 0.5) return -inv_normal_cdf(1.0 - p);

    double z = ppnd16_lower(p);
    // One Newton step against the erfc-based CDF.
    const double density = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    if (density > 0.0) z -= (normal_cdf(z) - p) / density;
    return z;
}

}  // namespace p4q
