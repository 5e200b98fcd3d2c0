#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "metastate/random.hpp"
#include "metastate/tape.hpp"

namespace testing_support {

using metastate::Rng;
using metastate::Tensor;

inline Tensor<double> random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return metastate::uniform_tensor<double>(r, c, lo, hi, rng);
}

inline std::vector<std::size_t> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
    std::vector<std::size_t> out(n);
    for (auto& t : out) t = static_cast<std::size_t>(rng() % vocab);
    return out;
}

// Relative error used throughout the gradient checks:
// |a - b| / max(|a|, |b|, floor).
inline double rel_err(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Largest relative error between an analytic gradient and central differences
// of `loss` with respect to every entry of `x`.
inline double fd_check(Tensor<double> x, const Tensor<double>& analytic,
                       const std::function<double(const Tensor<double>&)>& loss, double h = 1e-5,
                       double floor = 1e-8) {
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double up = loss(x);
        x[i] = keep - h;
        const double down = loss(x);
        x[i] = keep;
        worst = std::max(worst, rel_err(analytic[i], (up - down) / (2 * h), floor));
    }
    return worst;
}

} // namespace testing_support

namespace testing_support {

// Triple loop, no blocking: the reference every matmul is compared against.
inline Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
    Tensor<double> out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            out(i, j) = s;
        }
    return out;
}

inline Tensor<double> outer(const std::vector<double>& a, const std::vector<double>& b) {
    Tensor<double> out(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) out(i, j) = a[i] * b[j];
    return out;
}

inline Tensor<double> add(const Tensor<double>& a, const Tensor<double>& b) {
    Tensor<double> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

inline Tensor<double> relu(Tensor<double> x) {
    for (double& v : x.values()) v = v > 0.0 ? v : 0.0;
    return x;
}

// Population-variance layer norm of one row, eps inside the square root.
inline Tensor<double> naive_layer_norm(const Tensor<double>& x, const std::vector<double>& gamma,
                                       const std::vector<double>& beta, double eps = 1e-5) {
    const std::size_t n = x.cols();
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<double>(n);
    Tensor<double> out(1, n);
    for (std::size_t i = 0; i < n; ++i) out[i] = gamma[i] * (x[i] - mean) / std::sqrt(var + eps) + beta[i];
    return out;
}

inline std::vector<double> to_vec(const Tensor<double>& t) { return {t.values().begin(), t.values().end()}; }

} // namespace testing_support
