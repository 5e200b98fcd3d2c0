#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "metastate/model.hpp"

namespace metastate {

// Pre-norm causal softmax attention (one head per block) plus a ReLU FFN whose
// width is chosen so the parameter count tracks a Meta-State model of the
// same depth and width.
struct BaselineConfig {
    std::size_t vocab_size = kByteVocab;
    std::size_t d_model = 64;
    std::size_t n_layer = 2;
    std::size_t ffn_dim = 0;
    double norm_eps = 1e-5;

    static BaselineConfig matched(const ModelConfig& cfg);
    void validate() const;
};

std::map<std::string, Shape> baseline_parameter_shapes(const BaselineConfig& cfg);
std::size_t baseline_parameter_count(const BaselineConfig& cfg);

template <typename T>
ParamStore<T> init_baseline_params(const BaselineConfig& cfg, std::uint64_t seed);

template <typename T>
struct BaselineForward {
    Tensor<T> logits;                  // T x V
    std::vector<Tensor<T>> attention;  // per block, T x T row-stochastic lower triangle
};

template <typename T>
BaselineForward<T> attention_baseline_forward(std::span<const std::size_t> tokens, const ParamStore<T>& params,
                                              const BaselineConfig& cfg);

// Key/value cache; grows by one row per block per token.
template <typename T>
struct BaselineState {
    std::vector<std::vector<T>> keys;
    std::vector<std::vector<T>> values;
    std::size_t length = 0;

    std::size_t byte_size() const;
};

template <typename T>
class BaselineModel {
public:
    BaselineModel(BaselineConfig cfg, ParamStore<T> params);
    BaselineModel(const BaselineModel& o) : cfg_(o.cfg_), params_(o.params_) { bind(); }
    BaselineModel& operator=(const BaselineModel& o) {
        cfg_ = o.cfg_;
        params_ = o.params_;
        bind();
        return *this;
    }

    BaselineState<T> initial_state() const;
    Tensor<T> step(std::size_t token, BaselineState<T>& state) const;
    const BaselineConfig& config() const { return cfg_; }

private:
    // Per-block tensors resolved once so a step does no name lookups.
    struct Block {
        const Tensor<T>* ln_attn_gamma;
        const Tensor<T>* ln_attn_beta;
        const Tensor<T>* w_q;
        const Tensor<T>* w_k;
        const Tensor<T>* w_v;
        const Tensor<T>* w_o;
        const Tensor<T>* ln_ffn_gamma;
        const Tensor<T>* ln_ffn_beta;
        const Tensor<T>* w1;
        const Tensor<T>* b1;
        const Tensor<T>* w2;
        const Tensor<T>* b2;
    };

    void bind();

    BaselineConfig cfg_;
    ParamStore<T> params_;
    std::vector<Block> blocks_;
    const Tensor<T>* embedding_ = nullptr;
    const Tensor<T>* ln_out_gamma_ = nullptr;
    const Tensor<T>* ln_out_beta_ = nullptr;
    const Tensor<T>* head_ = nullptr;
};

} // namespace metastate
