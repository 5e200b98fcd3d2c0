#pragma once

#include <cstddef>
#include <vector>

#include "metastate/time_mix.hpp"

namespace metastate {

// Trainable tensors of a Meta-State layer. The encoder itself has none: it
// borrows the current WKV state as its weight matrix.
template <typename T>
struct MetaStateParams {
    Tensor<T> w_out;    // (H n) x D: head h owns rows [h n, (h + 1) n)
    NormParams<T> norm; // per-head segments over the H n encoded outputs
    Tensor<T> w_in;     // (H s) x n, present only after the state was widened

    void validate(const ModelConfig& cfg) const;
};

// z = ReLU(x_head * wkv). x_head is 1 x n, wkv is n x n.
template <typename T>
Tensor<T> sse_encode(const Tensor<T>& x_head, const Tensor<T>& wkv);

// ms_prev * T_t + z^T z, with T_t built from the same terms as the WKV update.
template <typename T>
Tensor<T> meta_state_step(const Tensor<T>& ms_prev, const TransitionTerms<T>& t, const Tensor<T>& z);

// One head's 1 x D contribution: LayerNorm(z ms^T) * W_o[head].
template <typename T>
Tensor<T> meta_state_output(const Tensor<T>& z, const Tensor<T>& ms, const MetaStateParams<T>& p,
                            std::size_t head, const ModelConfig& cfg);

template <typename T>
struct MetaStateStep {
    Tensor<T> output;            // 1 x D, sum of per-head contributions
    std::vector<Tensor<T>> states;
    std::vector<Tensor<T>> encoded;
};

// One token through the layer. `wkv` and `terms` are this step's post-update
// values from the same layer's time mixing.
template <typename T>
MetaStateStep<T> meta_state_layer(const Tensor<T>& x_prime, const std::vector<Tensor<T>>& wkv,
                                  const std::vector<Tensor<T>>& ms, const std::vector<TransitionTerms<T>>& terms,
                                  const MetaStateParams<T>& p, const ModelConfig& cfg);

template <typename T>
struct MetaStateVars {
    ad::Var<T> w_out, norm_gamma, norm_beta;
    ad::Var<T> w_in; // unbound unless the config has an input projection
};

template <typename T>
struct MetaStateTrace {
    ad::Var<T> output;  // T x D
    ad::Var<T> states;  // T x (H n^2)
    ad::Var<T> encoded; // T x (H n)
};

template <typename T>
MetaStateTrace<T> meta_state_sequence(ad::Var<T> x_prime, ad::Var<T> wkv_states, ad::Var<T> decay,
                                      ad::Var<T> kappa, ad::Var<T> rate, ad::Var<T> init_states,
                                      const MetaStateVars<T>& v, const ModelConfig& cfg);

// Names of the trainable tensors a Meta-State layer registers, relative to its prefix.
std::vector<std::string> meta_state_parameter_names(const ModelConfig& cfg);

} // namespace metastate
