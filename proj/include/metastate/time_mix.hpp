#pragma once

#include <cstddef>
#include <vector>

#include "metastate/config.hpp"
#include "metastate/ops.hpp"
#include "metastate/tensor.hpp"

namespace metastate {

// Affine parameters of a layer norm; gamma and beta are 1 x n rows.
template <typename T>
struct NormParams {
    Tensor<T> gamma;
    Tensor<T> beta;
    T eps = T(1e-5);

    static NormParams identity(std::size_t n, T eps = T(1e-5)) {
        return {Tensor<T>(1, n, T(1)), Tensor<T>(1, n, T(0)), eps};
    }
    void validate(std::size_t n) const;
};

// Plain layer norm of a single row.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const NormParams<T>& p);

// Transition inputs of one head at one step. Every vector has the head width.
template <typename T>
struct TransitionTerms {
    std::vector<T> decay;          // w_t, entries in (0, 1)
    std::vector<T> removal_key;    // kappa_hat_t, unit L2 norm
    std::vector<T> learning_rate;  // a_t, entries in (0, 1)
    std::vector<T> key;
    std::vector<T> value;
    std::vector<T> receptance;

    std::size_t dim() const { return decay.size(); }
};

inline constexpr double kRemovalKeyFloor = 1e-8;

template <typename T>
struct TimeMixParams {
    Tensor<T> mu;       // 1 x D token-shift mix, entries in [0, 1]
    Tensor<T> w_r;      // D x D, columns grouped by head
    Tensor<T> w_k;
    Tensor<T> w_v;
    Tensor<T> w_decay;
    Tensor<T> b_decay;  // 1 x D
    Tensor<T> w_lr;
    Tensor<T> b_lr;     // 1 x D
    Tensor<T> w_kappa;
    Tensor<T> w_out;    // D x D
    NormParams<T> norm; // per-head segments

    void validate(const ModelConfig& cfg) const;
};

template <typename T>
Tensor<T> token_shift(const Tensor<T>& x_t, const Tensor<T>& x_prev, const Tensor<T>& mu);

// One TransitionTerms per head from a token-shifted 1 x D input.
template <typename T>
std::vector<TransitionTerms<T>> derive_terms(const Tensor<T>& x_shifted, const TimeMixParams<T>& p,
                                             const ModelConfig& cfg);

// diag(w) - kappa^T (a . kappa), n x n.
template <typename T>
Tensor<T> transition_matrix(const TransitionTerms<T>& t);

// wkv_prev * T_t + v^T k.
template <typename T>
Tensor<T> wkv_step(const Tensor<T>& wkv_prev, const TransitionTerms<T>& t);

template <typename T>
struct TimeMixStep {
    Tensor<T> output;                      // 1 x D
    std::vector<Tensor<T>> states;         // per head, post-update
    std::vector<TransitionTerms<T>> terms; // per head
};

// One token through the block. `x_t` and `x_prev` are already normalized.
template <typename T>
TimeMixStep<T> time_mix_forward(const Tensor<T>& x_t, const Tensor<T>& x_prev,
                                const std::vector<Tensor<T>>& states, const TimeMixParams<T>& p,
                                const ModelConfig& cfg);

// Tape-side parameter handles.
template <typename T>
struct TimeMixVars {
    ad::Var<T> mu, w_r, w_k, w_v, w_decay, b_decay, w_lr, b_lr, w_kappa, w_out, norm_gamma, norm_beta;
};

template <typename T>
struct TimeMixTrace {
    ad::Var<T> output; // T x D
    ad::Var<T> states; // T x (H n^2), post-update per step
    ad::Var<T> decay;  // T x D
    ad::Var<T> kappa;  // T x D
    ad::Var<T> rate;   // T x D
};

// Whole window through the block on a tape. `prev` is 1 x D, `init_states` 1 x (H n^2).
template <typename T>
TimeMixTrace<T> time_mix_sequence(ad::Var<T> x, ad::Var<T> prev, ad::Var<T> init_states,
                                  const TimeMixVars<T>& v, const ModelConfig& cfg);

std::vector<Segment> head_norm_segments(const ModelConfig& cfg);
std::vector<Segment> residual_norm_segments(const ModelConfig& cfg);

} // namespace metastate
