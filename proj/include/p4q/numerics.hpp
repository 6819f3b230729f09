// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace p4q {

/// Dense row-major matrix of doubles.
///
/// A default-constructed matrix is empty (0x0) and only serves as a
/// placeholder; every sized constructor requires positive dimensions.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix filled(std::size_t rows, std::size_t cols, double value);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Product a*b. Each output entry accumulates its inner products in
/// ascending index order, so results do not depend on blocking or threads.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scaled(const Matrix& m, double factor);
Matrix hadamard(const Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
/// Columns [first, first + count) of m.
Matrix column_slice(const Matrix& m, std::size_t first, std::size_t count);

/// Deterministic random stream.
///
/// The generator is std::mt19937_64 (fully specified by the standard).
/// Uniform reals use the top 53 bits mapped to the open interval (0, 1);
/// normal variates use the Box-Muller transform, consuming the cosine
/// variate first and the cached sine variate on the following call.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed);

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64();
    /// Uniform on (0, 1); never returns 0 or 1.
    double uniform();
    double normal();
    /// Uniform integer in [0, bound).
    std::uint64_t below(std::uint64_t bound);

    /// Independent stream for parallel or per-item work: seeded with seed ^ index.
    RngStream child(std::uint64_t index) const { return RngStream(seed_ ^ index); }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// SplitMix64 finalizer; used to derive well-separated seeds for distinct roles.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

Matrix sample_normal(RngStream& rng, std::size_t n, double mean, double stddev);
Matrix random_normal(RngStream& rng, std::size_t rows, std::size_t cols, double stddev);

/// Standard normal CDF.
double normal_cdf(double z);

/// Inverse of the standard normal CDF on (0, 1), absolute error below 1e-9.
/// Exactly antisymmetric: inv_normal_cdf(p) == -inv_normal_cdf(1 - p) whenever
/// 1 - p is representable.
double inv_normal_cdf(double p);

}  // namespace p4q
