#include "metastate/kernels.hpp"

#include <algorithm>
#include <limits>

namespace metastate::kernels {

template <typename T>
void matmul(const T* a, const T* b, T* out, std::size_t n, std::size_t k, std::size_t m) {
    std::fill(out, out + n * m, T(0));
    for (std::size_t i = 0; i < n; ++i) {
        T* o = out + i * m;
        const T* ar = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T s = ar[p];
            const T* br = b + p * m;
            for (std::size_t j = 0; j < m; ++j) {
                o[j] += s * br[j];
            }
        }
    }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError(dimension_message("matmul", a.shape(), b.shape()));
    }
    Tensor<T> out(a.rows(), b.cols());
    matmul(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
    return out;
}

template <typename T>
void layer_norm_row(std::span<const T> x, std::span<const T> gamma, std::span<const T> beta,
                    std::span<const Segment> segments, T eps, std::span<T> out, T* mean, T* rstd) {
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const std::size_t off = segments[s].offset;
        const std::size_t w = segments[s].width;
        T sum = T(0);
        for (std::size_t i = 0; i < w; ++i) {
            sum += x[off + i];
        }
        const T mu = sum / static_cast<T>(w);
        T var = T(0);
        for (std::size_t i = 0; i < w; ++i) {
            const T d = x[off + i] - mu;
            var += d * d;
        }
        var /= static_cast<T>(w);
        const T inv = T(1) / std::sqrt(var + eps);
        for (std::size_t i = 0; i < w; ++i) {
            out[off + i] = (x[off + i] - mu) * inv * gamma[off + i] + beta[off + i];
        }
        if (mean) mean[s] = mu;
        if (rstd) rstd[s] = inv;
    }
}

template <typename T>
void l2_normalize_groups(std::span<const T> x, std::size_t group, T floor, std::span<T> out) {
    for (std::size_t g = 0; g + group <= x.size(); g += group) {
        const T norm = std::sqrt(sum_squares<T>(x.subspan(g, group)));
        const T denom = std::max(norm, floor);
        for (std::size_t i = 0; i < group; ++i) {
            out[g + i] = x[g + i] / denom;
        }
    }
}

template <typename T>
void state_step(T* state, const T* w, const T* kappa, const T* a, const T* key, const T* value,
                std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        T* row = state + i * n;
        T q = T(0);
        for (std::size_t m = 0; m < n; ++m) {
            q += row[m] * kappa[m];
        }
        const T v = value[i];
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = row[j] * w[j] - q * (a[j] * kappa[j]) + v * key[j];
        }
    }
}

template <typename T>
void state_apply(const T* state, const T* x, T* out, std::size_t n, bool transpose) {
    if (transpose) {
        for (std::size_t i = 0; i < n; ++i) {
            const T* row = state + i * n;
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) {
                acc += row[j] * x[j];
            }
            out[i] = acc;
        }
    } else {
        std::fill(out, out + n, T(0));
        for (std::size_t i = 0; i < n; ++i) {
            const T* row = state + i * n;
            const T s = x[i];
            for (std::size_t j = 0; j < n; ++j) {
                out[j] += s * row[j];
            }
        }
    }
}

template <typename T>
Tensor<T> transition_matrix(std::span<const T> w, std::span<const T> kappa, std::span<const T> a) {
    const std::size_t n = w.size();
    if (kappa.size() != n || a.size() != n) {
        throw DimensionError("transition_matrix: decay, removal key and rate lengths differ");
    }
    Tensor<T> t(n, n);
    for (std::size_t m = 0; m < n; ++m) {
        for (std::size_t j = 0; j < n; ++j) {
            t(m, j) = (m == j ? w[j] : T(0)) - kappa[m] * (a[j] * kappa[j]);
        }
    }
    return t;
}

template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
    if (targets.size() != logits.rows()) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(logits.rows()) + " rows");
    }
    T total = T(0);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row_span(r);
        if (targets[r] >= row.size()) {
            throw InputError("cross_entropy: target id out of range");
        }
        const T mx = *std::max_element(row.begin(), row.end());
        T s = T(0);
        for (T v : row) {
            s += std::exp(v - mx);
        }
        total += mx + std::log(s) - row[targets[r]];
    }
    return total / static_cast<T>(logits.rows());
}

#define METASTATE_INSTANTIATE(T)                                                                 \
    template void matmul(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);        \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
    template void layer_norm_row(std::span<const T>, std::span<const T>, std::span<const T>,     \
                                 std::span<const Segment>, T, std::span<T>, T*, T*);             \
    template void l2_normalize_groups(std::span<const T>, std::size_t, T, std::span<T>);         \
    template void state_step(T*, const T*, const T*, const T*, const T*, const T*, std::size_t); \
    template void state_apply(const T*, const T*, T*, std::size_t, bool);                        \
    template Tensor<T> transition_matrix(std::span<const T>, std::span<const T>, std::span<const T>); \
    template T cross_entropy(const Tensor<T>&, std::span<const std::size_t>);

METASTATE_INSTANTIATE(float)
METASTATE_INSTANTIATE(double)

} // namespace metastate::kernels
