#include "metastate/baseline.hpp"

#include <cmath>

#include "metastate/kernels.hpp"
#include "metastate/random.hpp"

namespace metastate {

BaselineConfig BaselineConfig::matched(const ModelConfig& config) {
    const ModelConfig m = config.normalized();
    BaselineConfig b;
    b.vocab_size = m.vocab_size;
    b.d_model = m.d_model;
    b.n_layer = m.n_layer;
    b.norm_eps = m.norm_eps;
    // Per block the Meta-State model holds 8 D^2 + 11 D; attention and norms
    // take 4 D^2 + 5 D, leaving F (2 D + 1) + D for the FFN.
    const double d = static_cast<double>(m.d_model);
    b.ffn_dim = static_cast<std::size_t>(std::llround((4 * d * d + 6 * d) / (2 * d + 1)));
    return b;
}

void BaselineConfig::validate() const {
    if (d_model == 0 || n_layer == 0 || ffn_dim == 0 || vocab_size < 2) {
        throw ConfigError("baseline config needs positive d_model, n_layer, ffn_dim and vocab_size >= 2");
    }
}

std::map<std::string, Shape> baseline_parameter_shapes(const BaselineConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.d_model;
    std::map<std::string, Shape> s{{"embedding", {cfg.vocab_size, d}},
                                   {"head", {d, cfg.vocab_size}},
                                   {"ln_out.gamma", {1, d}},
                                   {"ln_out.beta", {1, d}}};
    for (std::size_t l = 0; l < cfg.n_layer; ++l) {
        const std::string p = "block." + std::to_string(l) + ".";
        for (const char* n : {"ln_attn.gamma", "ln_attn.beta", "ln_ffn.gamma", "ln_ffn.beta", "ffn.b2"}) s[p + n] = {1, d};
        for (const char* n : {"attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"}) s[p + n] = {d, d};
        s[p + "ffn.w1"] = {d, cfg.ffn_dim};
        s[p + "ffn.b1"] = {1, cfg.ffn_dim};
        s[p + "ffn.w2"] = {cfg.ffn_dim, d};
    }
    return s;
}

std::size_t baseline_parameter_count(const BaselineConfig& cfg) {
    std::size_t n = 0;
    for (const auto& [name, shape] : baseline_parameter_shapes(cfg)) n += shape.size();
    return n;
}

template <typename T>
ParamStore<T> init_baseline_params(const BaselineConfig& cfg, std::uint64_t seed) {
    ParamStore<T> out;
    for (const auto& [name, shape] : baseline_parameter_shapes(cfg)) {
        const bool vector_param = shape.rows == 1;
        if (name.ends_with(".gamma")) {
            out.emplace(name, Tensor<T>(1, shape.cols, T(1)));
        } else if (vector_param) {
            out.emplace(name, Tensor<T>(1, shape.cols, T(0)));
        } else {
            Rng rng(derive_seed(seed, name));
            const double a = std::sqrt(1.0 / static_cast<double>(shape.rows));
            out.emplace(name, uniform_tensor<T>(shape.rows, shape.cols, -a, a, rng));
        }
    }
    return out;
}

template <typename T>
BaselineForward<T> attention_baseline_forward(std::span<const std::size_t> tokens, const ParamStore<T>& params,
                                              const BaselineConfig& cfg) {
    using namespace ad;
    if (tokens.empty()) throw InputError("baseline forward: empty token sequence");
    for (std::size_t t : tokens) {
        if (t >= cfg.vocab_size) throw InputError("token id " + std::to_string(t) + " out of range");
    }
    Tape<T> tape;
    std::map<std::string, Var<T>> v;
    for (const auto& [name, shape] : baseline_parameter_shapes(cfg)) {
        const auto it = params.find(name);
        if (it == params.end() || it->second.shape() != shape) throw ConfigError("baseline parameter '" + name + "' missing or misshaped");
        v.emplace(name, tape.constant(it->second));
    }
    const T eps = static_cast<T>(cfg.norm_eps);
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(cfg.d_model));
    const auto norm = [&](Var<T> x, const std::string& p) { return layer_norm(x, v.at(p + ".gamma"), v.at(p + ".beta"), eps); };

    BaselineForward<T> out;
    Var<T> x = gather_rows(v.at("embedding"), std::vector<std::size_t>(tokens.begin(), tokens.end()));
    for (std::size_t l = 0; l < cfg.n_layer; ++l) {
        const std::string p = "block." + std::to_string(l) + ".";
        const Var<T> xn = norm(x, p + "ln_attn");
        const Var<T> q = matmul(xn, v.at(p + "attn.w_q"));
        const Var<T> k = matmul(xn, v.at(p + "attn.w_k"));
        const Var<T> val = matmul(xn, v.at(p + "attn.w_v"));
        const Var<T> probs = causal_softmax(scale(matmul(q, transpose(k)), inv_sqrt_d));
        out.attention.push_back(probs.value());
        x = add(x, matmul(matmul(probs, val), v.at(p + "attn.w_o")));
        const Var<T> hidden = relu(add_row(matmul(norm(x, p + "ln_ffn"), v.at(p + "ffn.w1")), v.at(p + "ffn.b1")));
        x = add(x, add_row(matmul(hidden, v.at(p + "ffn.w2")), v.at(p + "ffn.b2")));
    }
    out.logits = matmul(norm(x, "ln_out"), v.at("head")).value();
    return out;
}

template <typename T>
std::size_t BaselineState<T>::byte_size() const {
    std::size_t n = 0;
    for (const auto& k : keys) n += k.size() * sizeof(T);
    for (const auto& v : values) n += v.size() * sizeof(T);
    return n;
}

template <typename T>
BaselineModel<T>::BaselineModel(BaselineConfig cfg, ParamStore<T> params) : cfg_(cfg), params_(std::move(params)) {
    const auto shapes = baseline_parameter_shapes(cfg_);
    for (const auto& [name, shape] : shapes) {
        const auto it = params_.find(name);
        if (it == params_.end() || it->second.shape() != shape) throw ConfigError("baseline parameter '" + name + "' missing or misshaped");
    }
    bind();
}

template <typename T>
void BaselineModel<T>::bind() {
    const auto& p = params_;
    embedding_ = &p.at("embedding");
    ln_out_gamma_ = &p.at("ln_out.gamma");
    ln_out_beta_ = &p.at("ln_out.beta");
    head_ = &p.at("head");
    blocks_.clear();
    for (std::size_t l = 0; l < cfg_.n_layer; ++l) {
        const std::string pre = "block." + std::to_string(l) + ".";
        blocks_.push_back({&p.at(pre + "ln_attn.gamma"), &p.at(pre + "ln_attn.beta"), &p.at(pre + "attn.w_q"),
                           &p.at(pre + "attn.w_k"), &p.at(pre + "attn.w_v"), &p.at(pre + "attn.w_o"),
                           &p.at(pre + "ln_ffn.gamma"), &p.at(pre + "ln_ffn.beta"), &p.at(pre + "ffn.w1"),
                           &p.at(pre + "ffn.b1"), &p.at(pre + "ffn.w2"), &p.at(pre + "ffn.b2")});
    }
}

template <typename T>
BaselineState<T> BaselineModel<T>::initial_state() const {
    BaselineState<T> s;
    s.keys.resize(cfg_.n_layer);
    s.values.resize(cfg_.n_layer);
    return s;
}

namespace {

template <typename T>
Tensor<T> norm_row(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    Tensor<T> out(1, x.cols());
    const Segment whole{0, x.cols()};
    kernels::layer_norm_row<T>(x.row_span(0), gamma.values(), beta.values(), std::span<const Segment>(&whole, 1), eps,
                               out.row_span(0));
    return out;
}

} // namespace

template <typename T>
Tensor<T> BaselineModel<T>::step(std::size_t token, BaselineState<T>& state) const {
    if (token >= cfg_.vocab_size) throw InputError("token id " + std::to_string(token) + " out of range");
    const std::size_t d = cfg_.d_model;
    const T eps = static_cast<T>(cfg_.norm_eps);
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
    const Tensor<T>& emb = *embedding_;
    Tensor<T> x(1, d, std::vector<T>(emb.data() + token * d, emb.data() + (token + 1) * d));
    const std::size_t len = state.length + 1;
    std::vector<T> weights(len);
    for (std::size_t l = 0; l < cfg_.n_layer; ++l) {
        const Block& b = blocks_[l];
        const Tensor<T> xn = norm_row(x, *b.ln_attn_gamma, *b.ln_attn_beta, eps);
        const Tensor<T> q = kernels::matmul(xn, *b.w_q);
        const Tensor<T> k = kernels::matmul(xn, *b.w_k);
        const Tensor<T> v = kernels::matmul(xn, *b.w_v);
        auto& keys = state.keys[l];
        auto& vals = state.values[l];
        keys.insert(keys.end(), k.values().begin(), k.values().end());
        vals.insert(vals.end(), v.values().begin(), v.values().end());
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
            T s = T(0);
            for (std::size_t c = 0; c < d; ++c) s += q[c] * keys[j * d + c];
            weights[j] = s * inv_sqrt_d;
            mx = std::max(mx, weights[j]);
        }
        T total = T(0);
        for (std::size_t j = 0; j < len; ++j) {
            weights[j] = std::exp(weights[j] - mx);
            total += weights[j];
        }
        Tensor<T> mixed(1, d);
        for (std::size_t j = 0; j < len; ++j) {
            const T w = weights[j] / total;
            for (std::size_t c = 0; c < d; ++c) mixed[c] += w * vals[j * d + c];
        }
        const Tensor<T> attn = kernels::matmul(mixed, *b.w_o);
        for (std::size_t c = 0; c < d; ++c) x[c] += attn[c];
        Tensor<T> hidden = kernels::matmul(norm_row(x, *b.ln_ffn_gamma, *b.ln_ffn_beta, eps), *b.w1);
        const Tensor<T>& b1 = *b.b1;
        for (std::size_t c = 0; c < hidden.size(); ++c) hidden[c] = kernels::relu(hidden[c] + b1[c]);
        const Tensor<T> ffn = kernels::matmul(hidden, *b.w2);
        const Tensor<T>& b2 = *b.b2;
        for (std::size_t c = 0; c < d; ++c) x[c] += ffn[c] + b2[c];
    }
    state.length = len;
    return kernels::matmul(norm_row(x, *ln_out_gamma_, *ln_out_beta_, eps), *head_);
}

#define METASTATE_INSTANTIATE(T)                                                                            \
    template ParamStore<T> init_baseline_params(const BaselineConfig&, std::uint64_t);                     \
    template BaselineForward<T> attention_baseline_forward(std::span<const std::size_t>, const ParamStore<T>&, \
                                                           const BaselineConfig&);                         \
    template struct BaselineState<T>;                                                                      \
    template class BaselineModel<T>;

METASTATE_INSTANTIATE(float)
METASTATE_INSTANTIATE(double)

} // namespace metastate
