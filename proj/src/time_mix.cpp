#include "metastate/time_mix.hpp"

#include "metastate/kernels.hpp"

namespace metastate {

std::vector<Segment> head_norm_segments(const ModelConfig& cfg) {
    return tile_segments(cfg.head_segments, cfg.n_head);
}

std::vector<Segment> residual_norm_segments(const ModelConfig& cfg) {
    return tile_segments(cfg.residual_segments, 1);
}

template <typename T>
void NormParams<T>::validate(std::size_t n) const {
    if (!(eps > T(0))) throw ContractError("norm: eps must be positive");
    if (gamma.shape() != Shape{1, n} || beta.shape() != Shape{1, n}) {
        throw DimensionError(dimension_message("norm", gamma.shape(), Shape{1, n}));
    }
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const NormParams<T>& p) {
    p.validate(x.cols());
    Tensor<T> out(x.rows(), x.cols());
    const Segment whole{0, x.cols()};
    for (std::size_t r = 0; r < x.rows(); ++r) {
        kernels::layer_norm_row<T>(x.row_span(r), p.gamma.values(), p.beta.values(),
                                std::span<const Segment>(&whole, 1), p.eps, out.row_span(r));
    }
    return out;
}

template <typename T>
void TimeMixParams<T>::validate(const ModelConfig& cfg) const {
    const std::size_t d = cfg.d_model;
    for (const Tensor<T>* m : {&w_r, &w_k, &w_v, &w_decay, &w_lr, &w_kappa, &w_out}) {
        if (m->shape() != Shape{d, d}) throw DimensionError(dimension_message("time_mix", m->shape(), Shape{d, d}));
    }
    for (const Tensor<T>* v : {&mu, &b_decay, &b_lr}) {
        if (v->shape() != Shape{1, d}) throw DimensionError(dimension_message("time_mix", v->shape(), Shape{1, d}));
    }
    norm.validate(d);
}

template <typename T>
Tensor<T> token_shift(const Tensor<T>& x_t, const Tensor<T>& x_prev, const Tensor<T>& mu) {
    if (x_t.shape() != x_prev.shape() || x_t.shape() != mu.shape()) {
        throw DimensionError(dimension_message("token_shift", x_t.shape(), x_prev.shape()));
    }
    Tensor<T> out(x_t.rows(), x_t.cols());
    for (std::size_t i = 0; i < x_t.size(); ++i) {
        out[i] = kernels::token_shift(mu[i], x_t[i], x_prev[i]);
    }
    return out;
}

namespace {

template <typename T>
std::vector<T> head_slice(const Tensor<T>& row, std::size_t head, std::size_t n) {
    return std::vector<T>(row.data() + head * n, row.data() + (head + 1) * n);
}

} // namespace

template <typename T>
std::vector<TransitionTerms<T>> derive_terms(const Tensor<T>& xs, const TimeMixParams<T>& p,
                                             const ModelConfig& cfg) {
    const std::size_t d = cfg.d_model;
    const std::size_t n = cfg.head_dim();
    if (xs.shape() != Shape{1, d}) throw DimensionError(dimension_message("derive_terms", xs.shape(), Shape{1, d}));

    const Tensor<T> r = kernels::matmul(xs, p.w_r);
    const Tensor<T> k = kernels::matmul(xs, p.w_k);
    const Tensor<T> v = kernels::matmul(xs, p.w_v);
    Tensor<T> w = kernels::matmul(xs, p.w_decay);
    Tensor<T> a = kernels::matmul(xs, p.w_lr);
    const Tensor<T> raw_kappa = kernels::matmul(xs, p.w_kappa);
    for (std::size_t j = 0; j < d; ++j) {
        w[j] = kernels::decay(w[j] + p.b_decay[j]);
        a[j] = kernels::sigmoid(a[j] + p.b_lr[j]);
    }
    Tensor<T> kappa(1, d);
    kernels::l2_normalize_groups(raw_kappa.values(), n, static_cast<T>(kRemovalKeyFloor), kappa.values());

    std::vector<TransitionTerms<T>> terms(cfg.n_head);
    for (std::size_t h = 0; h < cfg.n_head; ++h) {
        terms[h] = {head_slice(w, h, n), head_slice(kappa, h, n), head_slice(a, h, n),
                    head_slice(k, h, n), head_slice(v, h, n), head_slice(r, h, n)};
    }
    return terms;
}

template <typename T>
Tensor<T> transition_matrix(const TransitionTerms<T>& t) {
    return kernels::transition_matrix<T>(t.decay, t.removal_key, t.learning_rate);
}

template <typename T>
Tensor<T> wkv_step(const Tensor<T>& wkv_prev, const TransitionTerms<T>& t) {
    const std::size_t n = t.dim();
    if (wkv_prev.shape() != Shape{n, n} || t.key.size() != n || t.value.size() != n) {
        throw DimensionError(dimension_message("wkv_step", wkv_prev.shape(), Shape{n, n}));
    }
    Tensor<T> next = wkv_prev;
    kernels::state_step(next.data(), t.decay.data(), t.removal_key.data(), t.learning_rate.data(),
                        t.key.data(), t.value.data(), n);
    return next;
}

template <typename T>
TimeMixStep<T> time_mix_forward(const Tensor<T>& x_t, const Tensor<T>& x_prev,
                                const std::vector<Tensor<T>>& states, const TimeMixParams<T>& p,
                                const ModelConfig& cfg) {
    const std::size_t n = cfg.head_dim();
    if (states.size() != cfg.n_head) {
        throw DimensionError("time_mix_forward: expected " + std::to_string(cfg.n_head) + " head states, got " +
                             std::to_string(states.size()));
    }
    TimeMixStep<T> out;
    out.terms = derive_terms(token_shift(x_t, x_prev, p.mu), p, cfg);
    Tensor<T> y(1, cfg.d_model);
    out.states.reserve(cfg.n_head);
    for (std::size_t h = 0; h < cfg.n_head; ++h) {
        out.states.push_back(wkv_step(states[h], out.terms[h]));
        kernels::state_apply(out.states[h].data(), out.terms[h].receptance.data(), y.data() + h * n, n, true);
    }
    const auto segments = head_norm_segments(cfg);
    Tensor<T> yn(1, cfg.d_model);
    kernels::layer_norm_row<T>(y.row_span(0), p.norm.gamma.values(), p.norm.beta.values(),
                            std::span<const Segment>(segments), p.norm.eps, yn.row_span(0));
    out.output = kernels::matmul(yn, p.w_out);
    return out;
}

template <typename T>
TimeMixTrace<T> time_mix_sequence(ad::Var<T> x, ad::Var<T> prev, ad::Var<T> init_states,
                                  const TimeMixVars<T>& v, const ModelConfig& cfg) {
    using namespace ad;
    const std::size_t n = cfg.head_dim();
    const Var<T> xs = token_shift(x, prev, v.mu);
    const Var<T> r = matmul(xs, v.w_r);
    const Var<T> k = matmul(xs, v.w_k);
    const Var<T> val = matmul(xs, v.w_v);
    const Var<T> w = decay(add_row(matmul(xs, v.w_decay), v.b_decay));
    const Var<T> a = sigmoid(add_row(matmul(xs, v.w_lr), v.b_lr));
    const Var<T> kappa = l2_normalize_groups(matmul(xs, v.w_kappa), n, static_cast<T>(kRemovalKeyFloor));
    const Var<T> states = state_scan(w, kappa, a, k, val, init_states, n);
    const Var<T> y = state_apply(states, r, n, true);
    const Var<T> yn = layer_norm(y, v.norm_gamma, v.norm_beta, head_norm_segments(cfg), static_cast<T>(cfg.norm_eps));
    return {matmul(yn, v.w_out), states, w, kappa, a};
}

#define METASTATE_INSTANTIATE(T)                                                                           \
    template struct NormParams<T>;                                                                         \
    template Tensor<T> layer_norm(const Tensor<T>&, const NormParams<T>&);                                \
    template struct TimeMixParams<T>;                                                                      \
    template Tensor<T> token_shift(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
    template std::vector<TransitionTerms<T>> derive_terms(const Tensor<T>&, const TimeMixParams<T>&,       \
                                                          const ModelConfig&);                             \
    template Tensor<T> transition_matrix(const TransitionTerms<T>&);                                       \
    template Tensor<T> wkv_step(const Tensor<T>&, const TransitionTerms<T>&);                              \
    template TimeMixStep<T> time_mix_forward(const Tensor<T>&, const Tensor<T>&,                           \
                                             const std::vector<Tensor<T>>&, const TimeMixParams<T>&,       \
                                             const ModelConfig&);                                          \
    template TimeMixTrace<T> time_mix_sequence(ad::Var<T>, ad::Var<T>, ad::Var<T>, const TimeMixVars<T>&, \
                                               const ModelConfig&);

METASTATE_INSTANTIATE(float)
METASTATE_INSTANTIATE(double)

} // namespace metastate
