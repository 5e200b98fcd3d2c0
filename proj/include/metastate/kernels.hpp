#pragma once

// Value-level numeric kernels. The tape ops and the token-by-token inference
// path both route through these, so the two paths round identically.

#include <cmath>
#include <cstddef>
#include <span>

#include "metastate/tensor.hpp"

namespace metastate::kernels {

template <typename T>
inline T relu(T x) { return x > T(0) ? x : T(0); }

template <typename T>
inline T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }

// exp(-exp(x)): maps the real line onto (0, 1).
template <typename T>
inline T decay(T x) { return std::exp(-std::exp(x)); }

template <typename T>
inline T token_shift(T mu, T x, T prev) { return mu * x + (T(1) - mu) * prev; }

// out (n x m) = a (n x k) * b (k x m). Accumulates over k in ascending order
// for every output element regardless of n.
template <typename T>
void matmul(const T* a, const T* b, T* out, std::size_t n, std::size_t k, std::size_t m);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Normalizes each segment of one row independently (biased variance).
// mean/rstd, when non-null, receive one value per segment.
template <typename T>
void layer_norm_row(std::span<const T> x, std::span<const T> gamma, std::span<const T> beta,
                    std::span<const Segment> segments, T eps, std::span<T> out,
                    T* mean = nullptr, T* rstd = nullptr);

// out = x / max(||x||_2, floor) over each group of `group` entries.
template <typename T>
void l2_normalize_groups(std::span<const T> x, std::size_t group, T floor, std::span<T> out);

// In place: state (n x n) <- state * (diag(w) - kappa^T (a . kappa)) + value^T key.
// Applied through the rank-one structure, O(n^2).
template <typename T>
void state_step(T* state, const T* w, const T* kappa, const T* a, const T* key, const T* value,
                std::size_t n);

// out = x * state (transpose = false) or x * state^T (transpose = true).
template <typename T>
void state_apply(const T* state, const T* x, T* out, std::size_t n, bool transpose);

// Explicit transition matrix diag(w) - kappa^T (a . kappa).
template <typename T>
Tensor<T> transition_matrix(std::span<const T> w, std::span<const T> kappa, std::span<const T> a);

// Mean over rows of -log softmax(logits_row)[target], max-subtracted.
template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets);

} // namespace metastate::kernels
