#pragma once

// Differentiable operations recorded on a Tape. Shapes follow the row-vector
// convention: a sequence of T vectors of width n is a T x n tensor.

#include <cstddef>
#include <span>
#include <vector>

#include "metastate/tape.hpp"

namespace metastate::ad {

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);

// m (n x c) op row (1 x c), broadcast over rows.
template <typename T> Var<T> add_row(Var<T> m, Var<T> row);
template <typename T> Var<T> mul_row(Var<T> m, Var<T> row);

template <typename T> Var<T> scale(Var<T> x, T s);
template <typename T> Var<T> add_scalar(Var<T> x, T s);
template <typename T> Var<T> neg(Var<T> x);
// Subgradient at 0 is 0.
template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> sigmoid(Var<T> x);
template <typename T> Var<T> exp(Var<T> x);
// exp(-exp(x)), elementwise.
template <typename T> Var<T> decay(Var<T> x);
template <typename T> Var<T> transpose(Var<T> x);

template <typename T> Var<T> concat_cols(const std::vector<Var<T>>& parts);
template <typename T> Var<T> slice_cols(Var<T> x, std::size_t offset, std::size_t width);
template <typename T> Var<T> slice_rows(Var<T> x, std::size_t offset, std::size_t count);
template <typename T> Var<T> sum(Var<T> x);

// Row-wise normalization over the whole row.
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps);
// Row-wise normalization of each segment independently.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, std::vector<Segment> segments, T eps);

// Row t: mu . x_t + (1 - mu) . x_{t-1}, with x_{-1} = prev (1 x c).
template <typename T> Var<T> token_shift(Var<T> x, Var<T> prev, Var<T> mu);

// Row t = table[ids[t]].
template <typename T> Var<T> gather_rows(Var<T> table, std::vector<std::size_t> ids);

// Each group of `group` columns divided by max(||.||_2, floor).
template <typename T> Var<T> l2_normalize_groups(Var<T> x, std::size_t group, T floor);

// Per-head square-state recurrence over a sequence:
//   S_t = S_{t-1} (diag(w_t) - kappa_t^T (a_t . kappa_t)) + value_t^T key_t
// decay/kappa/rate/key/value are T x (H n); init is 1 x (H n^2).
// Row t of the result holds every head's S_t, each n x n row-major.
template <typename T>
Var<T> state_scan(Var<T> decay, Var<T> kappa, Var<T> rate, Var<T> key, Var<T> value, Var<T> init,
                  std::size_t head_dim);

// Per head and row: x_t S_t, or x_t S_t^T when `transpose`.
template <typename T>
Var<T> state_apply(Var<T> states, Var<T> x, std::size_t head_dim, bool transpose);

// Row-wise softmax over columns j <= i; entries above the diagonal are 0.
template <typename T> Var<T> causal_softmax(Var<T> scores);

// Mean over rows of -log softmax(logits)[target]. Result is 1 x 1.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::vector<std::size_t> targets);

} // namespace metastate::ad
