#include "metastate/optim.hpp"

#include <algorithm>
#include <cmath>

namespace metastate {

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (seq_len == 0) throw ConfigError("sequence length must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in (0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("Adam eps must be positive");
    if (threads == 0) throw ConfigError("thread count must be positive");
}

namespace {

const Tensor<unsigned char>* mask_for(const FreezeMasks& frozen, const std::string& name) {
    const auto it = frozen.find(name);
    return it == frozen.end() ? nullptr : &it->second;
}

bool is_frozen(const Tensor<unsigned char>* mask, std::size_t i) { return mask != nullptr && (*mask)[i] != 0; }

} // namespace

template <typename T>
AdamState<T> zero_moments(const ParamStore<T>& params) {
    AdamState<T> s;
    for (const auto& [name, p] : params) {
        s.m.emplace(name, Tensor<T>(p.rows(), p.cols()));
        s.v.emplace(name, Tensor<T>(p.rows(), p.cols()));
    }
    return s;
}

template <typename T>
double global_norm(const ParamStore<T>& grads, const FreezeMasks& frozen) {
    double total = 0.0;
    for (const auto& [name, g] : grads) {
        const auto* mask = mask_for(frozen, name);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!is_frozen(mask, i)) total += static_cast<double>(g[i]) * static_cast<double>(g[i]);
        }
    }
    return std::sqrt(total);
}

template <typename T>
double clip_gradients(ParamStore<T>& grads, double clip, const FreezeMasks& frozen) {
    const double norm = global_norm(grads, frozen);
    if (norm > clip) {
        const double scale = clip / norm;
        for (auto& [name, g] : grads) {
            for (T& v : g.values()) v = static_cast<T>(static_cast<double>(v) * scale);
        }
    }
    return norm;
}

template <typename T>
void adam_step(ParamStore<T>& params, const ParamStore<T>& grads, AdamState<T>& state, std::size_t t,
               const TrainConfig& cfg, const FreezeMasks& frozen) {
    if (t == 0) throw ContractError("adam_step: step index is 1-based");
    if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
        throw ContractError("adam_step: parameter, gradient and moment key sets differ");
    }
    const T b1 = static_cast<T>(cfg.beta1);
    const T b2 = static_cast<T>(cfg.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
    const T lr = static_cast<T>(cfg.learning_rate);
    const T eps = static_cast<T>(cfg.adam_eps);
    for (auto& [name, p] : params) {
        const auto g_it = grads.find(name);
        const auto m_it = state.m.find(name);
        const auto v_it = state.v.find(name);
        if (g_it == grads.end() || m_it == state.m.end() || v_it == state.v.end()) {
            throw ContractError("adam_step: no gradient or moment for '" + name + "'");
        }
        const Tensor<T>& g = g_it->second;
        Tensor<T>& m = m_it->second;
        Tensor<T>& v = v_it->second;
        if (g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape()) {
            throw DimensionError(dimension_message("adam_step", p.shape(), g.shape()));
        }
        const auto* mask = mask_for(frozen, name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (is_frozen(mask, i)) continue;
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            const T m_hat = m[i] / c1;
            const T v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
        }
    }
}

template <typename T>
void clamp_constrained(ParamStore<T>& params) {
    for (auto& [name, p] : params) {
        if (name.size() >= 3 && name.compare(name.size() - 3, 3, ".mu") == 0) {
            for (T& v : p.values()) v = std::clamp(v, T(0), T(1));
        }
    }
}

#define METASTATE_INSTANTIATE(T)                                                                      \
    template AdamState<T> zero_moments(const ParamStore<T>&);                                         \
    template double global_norm(const ParamStore<T>&, const FreezeMasks&);                            \
    template double clip_gradients(ParamStore<T>&, double, const FreezeMasks&);                       \
    template void adam_step(ParamStore<T>&, const ParamStore<T>&, AdamState<T>&, std::size_t,         \
                            const TrainConfig&, const FreezeMasks&);                                  \
    template void clamp_constrained(ParamStore<T>&);

METASTATE_INSTANTIATE(float)
METASTATE_INSTANTIATE(double)

} // namespace metastate
