#include "pod/numerics.hpp"

#include <algorithm>
#include <cmath>

namespace pod {

bool RealMatrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool is_probability_vector(std::span<const double> p, double tol) {
    double sum = 0.0;
    for (double v : p) {
        if (!std::isfinite(v) || v < 0.0) {
            return false;
        }
        sum += v;
    }
    return std::abs(sum - 1.0) <= tol;
}

namespace {

void require_finite_nonempty(std::span<const double> logits, const char* op) {
    if (logits.empty()) {
        throw InvalidInput(std::string(op) + ": empty input");
    }
    for (double v : logits) {
        if (!std::isfinite(v)) {
            throw InvalidInput(std::string(op) + ": non-finite entry");
        }
    }
}

} // namespace

ProbVector stable_softmax(std::span<const double> logits) {
    require_finite_nonempty(logits, "stable_softmax");
    const double max_logit = *std::max_element(logits.begin(), logits.end());
    ProbVector out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - max_logit);
        sum += out[i];
    }
    for (double& v : out) {
        v /= sum;
    }
    return out;
}

double log_sum_exp(std::span<const double> logits) {
    require_finite_nonempty(logits, "log_sum_exp");
    const double max_logit = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double v : logits) {
        sum += std::exp(v - max_logit);
    }
    return max_logit + std::log(sum);
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw InvalidInput("js_divergence: length mismatch");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!std::isfinite(p[i]) || !std::isfinite(q[i]) || p[i] < 0.0 || q[i] < 0.0) {
            throw InvalidInput("js_divergence: entries must be finite and non-negative");
        }
    }
    // JS = (KL(p||m) + KL(q||m)) / 2 with m the midpoint, logs base 2.
    // m > 0 wherever p > 0 or q > 0, so no division by zero arises.
    constexpr double inv_ln2 = 1.4426950408889634073599246810019; // 1/ln(2)
    double kl_p = 0.0;
    double kl_q = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) {
            kl_p += p[i] * std::log(p[i] / m) * inv_ln2;
        }
        if (q[i] > 0.0) {
            kl_q += q[i] * std::log(q[i] / m) * inv_ln2;
        }
    }
    const double js = 0.5 * (kl_p + kl_q);
    return std::clamp(js, 0.0, 1.0);
}

void rope_rotate_inplace(std::span<double> row, std::int64_t position, double base) {
    const std::size_t dim = row.size();
    for (std::size_t k = 0; 2 * k + 1 < dim; ++k) {
        const double inv_freq = std::pow(base, -(2.0 * static_cast<double>(k)) / static_cast<double>(dim));
        const double angle = static_cast<double>(position) * inv_freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x = row[2 * k];
        const double y = row[2 * k + 1];
        row[2 * k] = x * c - y * s;
        row[2 * k + 1] = x * s + y * c;
    }
}

RealMatrix rope_apply(const RealMatrix& vectors, std::span<const std::int64_t> positions, double base) {
    if (vectors.cols() % 2 != 0) {
        throw InvalidInput("rope_apply: column count must be even");
    }
    if (positions.size() != vectors.rows()) {
        throw InvalidInput("rope_apply: positions length must equal row count");
    }
    if (!(base > 0.0)) {
        throw InvalidInput("rope_apply: base must be positive");
    }
    RealMatrix out = vectors;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        rope_rotate_inplace(out.row(r), positions[r], base);
    }
    return out;
}

RealMatrix matmul(const RealMatrix& a, const RealMatrix& b) {
    if (a.cols() != b.rows()) {
        throw InvalidInput("matmul: inner dimensions differ");
    }
    RealMatrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) {
                continue;
            }
            for (std::size_t j = 0; j < b.cols(); ++j) {
                c.at(i, j) += aik * b.at(k, j);
            }
        }
    }
    return c;
}

std::vector<double> vecmat(std::span<const double> row, const RealMatrix& m) {
    if (row.size() != m.rows()) {
        throw InvalidInput("vecmat: length must equal matrix row count");
    }
    std::vector<double> out(m.cols(), 0.0);
    for (std::size_t k = 0; k < m.rows(); ++k) {
        const double v = row[k];
        if (v == 0.0) {
            continue;
        }
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out[j] += v * m.at(k, j);
        }
    }
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sum += a[i] * b[i];
    }
    return sum;
}

} // namespace pod
