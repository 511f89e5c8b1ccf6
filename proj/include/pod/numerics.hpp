#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pod/errors.hpp"

namespace pod {

// Row-major dense matrix of doubles. All heavy math in this project runs in
// 64-bit; 32-bit precision appears only at the file-format boundary.
class RealMatrix {
public:
    RealMatrix() = default;
    RealMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> flat() { return data_; }
    std::span<const double> flat() const { return data_; }

    bool all_finite() const;

    bool operator==(const RealMatrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// A probability vector: entries >= 0 summing to 1 (within 1e-9). Operations
// that return one guarantee the invariant; is_probability_vector() checks it.
using ProbVector = std::vector<double>;

bool is_probability_vector(std::span<const double> p, double tol = 1e-9);

// Softmax with max-shift so inputs of any magnitude neither overflow nor
// underflow to an all-zero row. Output sums to 1 within 1e-12.
// Throws InvalidInput on empty input or any non-finite entry.
ProbVector stable_softmax(std::span<const double> logits);

// log(sum(exp(logits))) computed around the maximum.
// Throws InvalidInput on empty input or any non-finite entry.
double log_sum_exp(std::span<const double> logits);

// Jensen-Shannon divergence with base-2 logarithms, so the result lies in
// [0, 1] with 1 reached exactly on disjoint supports. Zero-probability
// entries contribute zero to their own KL term (0 * log 0 := 0).
// Throws InvalidInput on length mismatch or negative/non-finite entries.
double js_divergence(std::span<const double> p, std::span<const double> q);

// Rotary embedding for a single row: adjacent pairs (x[2k], x[2k+1]) are
// rotated by angle position / base^(2k/dim). Preserves the row norm.
void rope_rotate_inplace(std::span<double> row, std::int64_t position, double base);

// Rotary embedding applied row-wise; positions[r] gives row r's position.
// Positions are signed so a rotation can be undone by negating them.
// Throws InvalidInput on odd column count, non-positive base, or a
// positions length that does not match the row count.
RealMatrix rope_apply(const RealMatrix& vectors, std::span<const std::int64_t> positions, double base);

// c = a * b, plain triple loop, fixed summation order.
RealMatrix matmul(const RealMatrix& a, const RealMatrix& b);

// out = row * m for a single row vector (len == m.rows()).
std::vector<double> vecmat(std::span<const double> row, const RealMatrix& m);

double dot(std::span<const double> a, std::span<const double> b);

} // namespace pod
