#include "metastate/meta_state.hpp"

#include "metastate/kernels.hpp"

namespace metastate {

template <typename T>
void MetaStateParams<T>::validate(const ModelConfig& cfg) const {
    const std::size_t d = cfg.d_model;
    if (w_out.shape() != Shape{d, d}) throw DimensionError(dimension_message("meta_state.w_out", w_out.shape(), Shape{d, d}));
    norm.validate(d);
    if (cfg.has_input_projection()) {
        const Shape want{cfg.n_head * cfg.sse_input_dim, cfg.head_dim()};
        if (w_in.shape() != want) throw DimensionError(dimension_message("meta_state.w_in", w_in.shape(), want));
    } else if (!w_in.empty()) {
        throw ContractError("meta_state: input projection present on an unwidened model");
    }
}

template <typename T>
Tensor<T> sse_encode(const Tensor<T>& x_head, const Tensor<T>& wkv) {
    const std::size_t n = wkv.rows();
    if (wkv.cols() != n || x_head.shape() != Shape{1, n}) {
        throw DimensionError(dimension_message("sse_encode", x_head.shape(), wkv.shape()));
    }
    Tensor<T> z(1, n);
    kernels::state_apply(wkv.data(), x_head.data(), z.data(), n, false);
    for (T& v : z.values()) v = kernels::relu(v);
    return z;
}

template <typename T>
Tensor<T> meta_state_step(const Tensor<T>& ms_prev, const TransitionTerms<T>& t, const Tensor<T>& z) {
    const std::size_t n = t.dim();
    if (ms_prev.shape() != Shape{n, n} || z.shape() != Shape{1, n}) {
        throw DimensionError(dimension_message("meta_state_step", ms_prev.shape(), z.shape()));
    }
    Tensor<T> next = ms_prev;
    kernels::state_step(next.data(), t.decay.data(), t.removal_key.data(), t.learning_rate.data(), z.data(),
                        z.data(), n);
    return next;
}

template <typename T>
Tensor<T> meta_state_output(const Tensor<T>& z, const Tensor<T>& ms, const MetaStateParams<T>& p,
                            std::size_t head, const ModelConfig& cfg) {
    const std::size_t n = cfg.head_dim();
    if (ms.shape() != Shape{n, n} || z.shape() != Shape{1, n}) {
        throw DimensionError(dimension_message("meta_state_output", z.shape(), ms.shape()));
    }
    Tensor<T> u(1, n);
    kernels::state_apply(ms.data(), z.data(), u.data(), n, true);
    const auto segments = tile_segments(cfg.head_segments, 1);
    Tensor<T> un(1, n);
    kernels::layer_norm_row<T>(u.values(), p.norm.gamma.values().subspan(head * n, n),
                               p.norm.beta.values().subspan(head * n, n), segments, p.norm.eps, un.values());
    Tensor<T> w_head(n, cfg.d_model,
                     std::vector<T>(p.w_out.data() + head * n * cfg.d_model, p.w_out.data() + (head + 1) * n * cfg.d_model));
    return kernels::matmul(un, w_head);
}

template <typename T>
MetaStateStep<T> meta_state_layer(const Tensor<T>& x_prime, const std::vector<Tensor<T>>& wkv,
                                  const std::vector<Tensor<T>>& ms, const std::vector<TransitionTerms<T>>& terms,
                                  const MetaStateParams<T>& p, const ModelConfig& cfg) {
    const std::size_t n = cfg.head_dim();
    const std::size_t heads = cfg.n_head;
    if (x_prime.shape() != Shape{1, cfg.d_model}) {
        throw DimensionError(dimension_message("meta_state_layer", x_prime.shape(), Shape{1, cfg.d_model}));
    }
    if (wkv.size() != heads || ms.size() != heads || terms.size() != heads) {
        throw DimensionError("meta_state_layer: per-head inputs do not match n_head");
    }
    MetaStateStep<T> out;
    Tensor<T> u(1, cfg.d_model);
    const std::size_t s = cfg.sse_input_dim;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor<T> x_head(1, n);
        if (cfg.has_input_projection()) {
            kernels::matmul(x_prime.data() + h * s, p.w_in.data() + h * s * n, x_head.data(), 1, s, n);
        } else {
            std::copy_n(x_prime.data() + h * n, n, x_head.data());
        }
        Tensor<T> z = sse_encode(x_head, wkv[h]);
        out.states.push_back(meta_state_step(ms[h], terms[h], z));
        kernels::state_apply(out.states[h].data(), z.data(), u.data() + h * n, n, true);
        out.encoded.push_back(std::move(z));
    }
    const auto segments = head_norm_segments(cfg);
    Tensor<T> un(1, cfg.d_model);
    kernels::layer_norm_row<T>(u.row_span(0), p.norm.gamma.values(), p.norm.beta.values(),
                            std::span<const Segment>(segments), p.norm.eps, un.row_span(0));
    out.output = kernels::matmul(un, p.w_out);
    return out;
}

template <typename T>
MetaStateTrace<T> meta_state_sequence(ad::Var<T> x_prime, ad::Var<T> wkv_states, ad::Var<T> decay,
                                      ad::Var<T> kappa, ad::Var<T> rate, ad::Var<T> init_states,
                                      const MetaStateVars<T>& v, const ModelConfig& cfg) {
    using namespace ad;
    const std::size_t n = cfg.head_dim();
    Var<T> x_in = x_prime;
    if (cfg.has_input_projection()) {
        const std::size_t s = cfg.sse_input_dim;
        std::vector<Var<T>> parts;
        for (std::size_t h = 0; h < cfg.n_head; ++h) {
            parts.push_back(matmul(slice_cols(x_prime, h * s, s), slice_rows(v.w_in, h * s, s)));
        }
        x_in = concat_cols(parts);
    }
    const Var<T> z = relu(state_apply(wkv_states, x_in, n, false));
    const Var<T> ms = state_scan(decay, kappa, rate, z, z, init_states, n);
    const Var<T> u = state_apply(ms, z, n, true);
    const Var<T> un = layer_norm(u, v.norm_gamma, v.norm_beta, head_norm_segments(cfg), static_cast<T>(cfg.norm_eps));
    return {matmul(un, v.w_out), ms, z};
}

std::vector<std::string> meta_state_parameter_names(const ModelConfig& cfg) {
    std::vector<std::string> names{"norm.beta", "norm.gamma", "w_out"};
    if (cfg.has_input_projection()) names.push_back("w_in");
    return names;
}

#define METASTATE_INSTANTIATE(T)                                                                          \
    template struct MetaStateParams<T>;                                                                   \
    template Tensor<T> sse_encode(const Tensor<T>&, const Tensor<T>&);                                    \
    template Tensor<T> meta_state_step(const Tensor<T>&, const TransitionTerms<T>&, const Tensor<T>&);    \
    template Tensor<T> meta_state_output(const Tensor<T>&, const Tensor<T>&, const MetaStateParams<T>&,   \
                                         std::size_t, const ModelConfig&);                                \
    template MetaStateStep<T> meta_state_layer(const Tensor<T>&, const std::vector<Tensor<T>>&,           \
                                               const std::vector<Tensor<T>>&,                             \
                                               const std::vector<TransitionTerms<T>>&,                    \
                                               const MetaStateParams<T>&, const ModelConfig&);            \
    template MetaStateTrace<T> meta_state_sequence(ad::Var<T>, ad::Var<T>, ad::Var<T>, ad::Var<T>,        \
                                                   ad::Var<T>, ad::Var<T>, const MetaStateVars<T>&,       \
                                                   const ModelConfig&);

METASTATE_INSTANTIATE(float)
METASTATE_INSTANTIATE(double)

} // namespace metastate
