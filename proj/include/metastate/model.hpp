#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "metastate/meta_state.hpp"
#include "metastate/time_mix.hpp"

namespace metastate {

// Every trainable tensor by name; std::map keeps the lexicographic order the
// checkpoint format and the gradient checks rely on.
template <typename T>
using ParamStore = std::map<std::string, Tensor<T>>;

std::map<std::string, Shape> parameter_shapes(const ModelConfig& cfg);
std::vector<std::string> parameter_names(const ModelConfig& cfg);
std::string layer_prefix(std::size_t layer);

// Matrices ~ uniform(-a, a), a = sqrt(1 / fan_in); gammas 1, betas 0, mu 0.5,
// decay and learning-rate biases 0. Each tensor draws from its own stream, so
// adding a tensor never shifts the values of the others.
template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

// Throws ConfigError unless `store` holds exactly the tensors `cfg` calls for.
template <typename T>
void check_store(const ParamStore<T>& store, const ModelConfig& cfg);

template <typename T>
struct LayerParams {
    NormParams<T> ln_tm;
    TimeMixParams<T> time_mix;
    NormParams<T> ln_ms;
    MetaStateParams<T> meta_state;
};

template <typename T>
struct ModelParams {
    Tensor<T> embedding; // V x D
    std::vector<LayerParams<T>> layers;
    NormParams<T> ln_out;
    Tensor<T> head;      // D x V
};

template <typename T>
ModelParams<T> unpack(const ParamStore<T>& store, const ModelConfig& cfg);

template <typename T>
struct LayerState {
    Tensor<T> shift;             // previous token's normalized sub-block input
    std::vector<Tensor<T>> wkv;  // per head, n x n
    std::vector<Tensor<T>> meta; // per head, n x n
};

template <typename T>
struct InferenceState {
    std::vector<LayerState<T>> layers;

    std::size_t byte_size() const;
    bool bitwise_equal(const InferenceState& other) const;
};

template <typename T>
InferenceState<T> initial_state(const ModelConfig& cfg);

// Segmented layer norm of one residual-stream row.
template <typename T>
Tensor<T> residual_norm(const Tensor<T>& x, const NormParams<T>& p, const ModelConfig& cfg);

template <typename T>
struct LayerStep {
    Tensor<T> output;       // X_out
    Tensor<T> intermediate; // X_inter
    LayerState<T> state;
};

template <typename T>
LayerStep<T> layer_forward(const Tensor<T>& x_in, const LayerState<T>& state, const LayerParams<T>& p,
                           const ModelConfig& cfg);

// Tape-side handles for every tensor of a ParamStore.
template <typename T>
struct ModelVars {
    std::map<std::string, ad::Var<T>> by_name;

    const ad::Var<T>& operator[](const std::string& name) const;
};

template <typename T>
ModelVars<T> bind_parameters(ad::Tape<T>& tape, const ParamStore<T>& store, bool trainable = true);

template <typename T>
struct WindowTrace {
    ad::Var<T> logits; // T x V
    std::vector<ad::Var<T>> shift, wkv, meta; // per layer: last row holds the final state
};

// Whole window on a tape, starting from the zero state.
template <typename T>
WindowTrace<T> forward_window(ad::Tape<T>& tape, const ModelVars<T>& vars, std::span<const std::size_t> tokens,
                              const ModelConfig& cfg);

template <typename T>
struct ForwardResult {
    Tensor<T> logits; // T x V
    InferenceState<T> state;
};

template <typename T>
class Model {
public:
    Model(ModelConfig cfg, ParamStore<T> store);

    const ModelConfig& config() const { return cfg_; }
    const ParamStore<T>& parameters() const { return store_; }
    const ModelParams<T>& unpacked() const { return params_; }

    InferenceState<T> initial_state() const { return metastate::initial_state<T>(cfg_); }

    // One token of stateful inference; returns 1 x V logits and advances `state`.
    Tensor<T> step(std::size_t token, InferenceState<T>& state) const;

    // Whole sequence in one pass from the zero state.
    ForwardResult<T> forward(std::span<const std::size_t> tokens) const;

    // Temperature 0 selects the argmax with lowest-index tie-break.
    std::vector<std::size_t> generate(std::span<const std::size_t> prompt, std::size_t steps, double temperature,
                                      std::uint64_t seed) const;

private:
    void check_token(std::size_t token) const;

    ModelConfig cfg_;
    ParamStore<T> store_;
    ModelParams<T> params_;
};

// Index drawn from softmax(logits / temperature); argmax when temperature is 0.
template <typename T>
std::size_t sample_token(std::span<const T> logits, double temperature, double u);

} // namespace metastate
