#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

#include "metastate/checkpoint.hpp"

namespace metastate {

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 16;
    std::size_t seq_len = 128;
    std::size_t steps = 1000;
    std::uint64_t seed = 0;
    double clip_norm = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t eval_every = 100;
    std::size_t checkpoint_every = 0; // 0: only at the end
    std::size_t threads = 1;

    void validate() const;
};

template <typename T>
struct AdamState {
    std::map<std::string, Tensor<T>> m;
    std::map<std::string, Tensor<T>> v;
};

template <typename T>
AdamState<T> zero_moments(const ParamStore<T>& params);

// Square root of the summed squares of every trainable gradient entry.
template <typename T>
double global_norm(const ParamStore<T>& grads, const FreezeMasks& frozen);

// Rescales trainable entries so the global norm is at most `clip`; returns the
// norm before clipping.
template <typename T>
double clip_gradients(ParamStore<T>& grads, double clip, const FreezeMasks& frozen);

// Bias-corrected Adam at 1-based step `t`. Frozen entries keep their
// parameter and moment values bit for bit.
template <typename T>
void adam_step(ParamStore<T>& params, const ParamStore<T>& grads, AdamState<T>& state, std::size_t t,
               const TrainConfig& cfg, const FreezeMasks& frozen = {});

// Clamps token-shift mixes back into [0, 1].
template <typename T>
void clamp_constrained(ParamStore<T>& params);

} // namespace metastate
