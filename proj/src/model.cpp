#include "metastate/model.hpp"

#include <algorithm>
#include <cmath>

#include "metastate/kernels.hpp"
#include "metastate/random.hpp"

namespace metastate {

std::string layer_prefix(std::size_t layer) { return "layer." + std::to_string(layer) + "."; }

std::map<std::string, Shape> parameter_shapes(const ModelConfig& config) {
    const ModelConfig cfg = config.normalized();
    cfg.validate();
    const std::size_t d = cfg.d_model;
    const Shape row{1, d};
    const Shape square{d, d};
    std::map<std::string, Shape> shapes{
        {"embedding", {cfg.vocab_size, d}},
        {"head", {d, cfg.vocab_size}},
        {"ln_out.gamma", row},
        {"ln_out.beta", row},
    };
    for (std::size_t l = 0; l < cfg.n_layer; ++l) {
        const std::string p = layer_prefix(l);
        for (const char* n : {"ln_tm.gamma", "ln_tm.beta", "ln_ms.gamma", "ln_ms.beta", "time_mix.mu",
                              "time_mix.b_decay", "time_mix.b_lr", "time_mix.norm.gamma", "time_mix.norm.beta",
                              "meta_state.norm.gamma", "meta_state.norm.beta"}) {
            shapes[p + n] = row;
        }
        for (const char* n : {"time_mix.w_r", "time_mix.w_k", "time_mix.w_v", "time_mix.w_decay", "time_mix.w_lr",
                              "time_mix.w_kappa", "time_mix.w_out", "meta_state.w_out"}) {
            shapes[p + n] = square;
        }
        if (cfg.has_input_projection()) {
            shapes[p + "meta_state.w_in"] = {cfg.n_head * cfg.sse_input_dim, cfg.head_dim()};
        }
    }
    return shapes;
}

std::vector<std::string> parameter_names(const ModelConfig& cfg) {
    std::vector<std::string> names;
    for (const auto& [name, shape] : parameter_shapes(cfg)) names.push_back(name);
    return names;
}

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

} // namespace

template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    ParamStore<T> store;
    for (const auto& [name, shape] : parameter_shapes(cfg)) {
        if (ends_with(name, ".gamma")) {
            store.emplace(name, Tensor<T>(shape.rows, shape.cols, T(1)));
        } else if (ends_with(name, ".beta") || ends_with(name, ".b_decay") || ends_with(name, ".b_lr")) {
            store.emplace(name, Tensor<T>(shape.rows, shape.cols, T(0)));
        } else if (ends_with(name, ".mu")) {
            store.emplace(name, Tensor<T>(shape.rows, shape.cols, T(0.5)));
        } else {
            Rng rng(derive_seed(seed, name));
            const double a = std::sqrt(1.0 / static_cast<double>(shape.rows));
            store.emplace(name, uniform_tensor<T>(shape.rows, shape.cols, -a, a, rng));
        }
    }
    return store;
}

template <typename T>
void check_store(const ParamStore<T>& store, const ModelConfig& cfg) {
    const auto shapes = parameter_shapes(cfg);
    for (const auto& [name, shape] : shapes) {
        const auto it = store.find(name);
        if (it == store.end()) throw ConfigError("parameter store is missing '" + name + "'");
        if (it->second.shape() != shape) {
            throw ConfigError("parameter '" + name + "' has shape " + it->second.shape().str() + ", expected " +
                              shape.str());
        }
    }
    for (const auto& [name, tensor] : store) {
        if (!shapes.contains(name)) throw ConfigError("unexpected parameter '" + name + "'");
    }
}

template <typename T>
ModelParams<T> unpack(const ParamStore<T>& store, const ModelConfig& config) {
    const ModelConfig cfg = config.normalized();
    check_store(store, cfg);
    const T eps = static_cast<T>(cfg.norm_eps);
    const auto get = [&](const std::string& name) { return store.at(name); };
    const auto norm = [&](const std::string& prefix) {
        return NormParams<T>{get(prefix + ".gamma"), get(prefix + ".beta"), eps};
    };
    ModelParams<T> out;
    out.embedding = get("embedding");
    out.head = get("head");
    out.ln_out = norm("ln_out");
    for (std::size_t l = 0; l < cfg.n_layer; ++l) {
        const std::string p = layer_prefix(l);
        LayerParams<T> lp;
        lp.ln_tm = norm(p + "ln_tm");
        lp.ln_ms = norm(p + "ln_ms");
        const std::string tm = p + "time_mix.";
        lp.time_mix = {get(tm + "mu"),      get(tm + "w_r"),     get(tm + "w_k"),  get(tm + "w_v"),
                       get(tm + "w_decay"), get(tm + "b_decay"), get(tm + "w_lr"), get(tm + "b_lr"),
                       get(tm + "w_kappa"), get(tm + "w_out"),   norm(tm + "norm")};
        const std::string ms = p + "meta_state.";
        lp.meta_state.w_out = get(ms + "w_out");
        lp.meta_state.norm = norm(ms + "norm");
        if (cfg.has_input_projection()) lp.meta_state.w_in = get(ms + "w_in");
        out.layers.push_back(std::move(lp));
    }
    return out;
}

template <typename T>
std::size_t InferenceState<T>::byte_size() const {
    std::size_t bytes = 0;
    for (const auto& l : layers) {
        bytes += l.shift.size() * sizeof(T);
        for (const auto& s : l.wkv) bytes += s.size() * sizeof(T);
        for (const auto& s : l.meta) bytes += s.size() * sizeof(T);
    }
    return bytes;
}

template <typename T>
bool InferenceState<T>::bitwise_equal(const InferenceState& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& a = layers[l];
        const auto& b = other.layers[l];
        if (!a.shift.bitwise_equal(b.shift) || a.wkv.size() != b.wkv.size() || a.meta.size() != b.meta.size()) {
            return false;
        }
        for (std::size_t h = 0; h < a.wkv.size(); ++h) {
            if (!a.wkv[h].bitwise_equal(b.wkv[h]) || !a.meta[h].bitwise_equal(b.meta[h])) return false;
        }
    }
    return true;
}

template <typename T>
InferenceState<T> initial_state(const ModelConfig& config) {
    const ModelConfig cfg = config.normalized();
    const std::size_t n = cfg.head_dim();
    InferenceState<T> s;
    s.layers.resize(cfg.n_layer);
    for (auto& l : s.layers) {
        l.shift = Tensor<T>(1, cfg.d_model);
        l.wkv.assign(cfg.n_head, Tensor<T>(n, n));
        l.meta.assign(cfg.n_head, Tensor<T>(n, n));
    }
    return s;
}

template <typename T>
Tensor<T> residual_norm(const Tensor<T>& x, const NormParams<T>& p, const ModelConfig& cfg) {
    p.validate(cfg.d_model);
    if (x.shape() != Shape{1, cfg.d_model}) {
        throw DimensionError(dimension_message("residual_norm", x.shape(), Shape{1, cfg.d_model}));
    }
    const auto segments = residual_norm_segments(cfg);
    Tensor<T> out(1, cfg.d_model);
    kernels::layer_norm_row<T>(x.row_span(0), p.gamma.values(), p.beta.values(), std::span<const Segment>(segments),
                            p.eps, out.row_span(0));
    return out;
}

namespace {

template <typename T>
Tensor<T> add_rows(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

} // namespace

template <typename T>
LayerStep<T> layer_forward(const Tensor<T>& x_in, const LayerState<T>& state, const LayerParams<T>& p,
                           const ModelConfig& cfg) {
    const Tensor<T> xn = residual_norm(x_in, p.ln_tm, cfg);
    TimeMixStep<T> tm = time_mix_forward(xn, state.shift, state.wkv, p.time_mix, cfg);
    LayerStep<T> out;
    out.intermediate = add_rows(x_in, tm.output);
    const Tensor<T> xm = residual_norm(out.intermediate, p.ln_ms, cfg);
    MetaStateStep<T> ms = meta_state_layer(xm, tm.states, state.meta, tm.terms, p.meta_state, cfg);
    out.output = add_rows(out.intermediate, ms.output);
    out.state = {xn, std::move(tm.states), std::move(ms.states)};
    return out;
}

template <typename T>
const ad::Var<T>& ModelVars<T>::operator[](const std::string& name) const {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw ContractError("no tape variable bound for '" + name + "'");
    return it->second;
}

template <typename T>
ModelVars<T> bind_parameters(ad::Tape<T>& tape, const ParamStore<T>& store, bool trainable) {
    ModelVars<T> vars;
    for (const auto& [name, tensor] : store) {
        vars.by_name.emplace(name, trainable ? tape.parameter(tensor) : tape.constant(tensor));
    }
    return vars;
}

template <typename T>
WindowTrace<T> forward_window(ad::Tape<T>& tape, const ModelVars<T>& v, std::span<const std::size_t> tokens,
                              const ModelConfig& config) {
    using namespace ad;
    const ModelConfig cfg = config.normalized();
    if (tokens.empty()) throw InputError("forward: empty token sequence");
    const std::size_t n = cfg.head_dim();
    const T eps = static_cast<T>(cfg.norm_eps);
    const auto segments = residual_norm_segments(cfg);
    const auto norm = [&](Var<T> x, const std::string& prefix) {
        return layer_norm(x, v[prefix + ".gamma"], v[prefix + ".beta"], segments, eps);
    };

    WindowTrace<T> trace;
    Var<T> x = gather_rows(v["embedding"], std::vector<std::size_t>(tokens.begin(), tokens.end()));
    const Var<T> zero_row = tape.constant(Tensor<T>(1, cfg.d_model));
    const Var<T> zero_state = tape.constant(Tensor<T>(1, cfg.n_head * n * n));
    for (std::size_t l = 0; l < cfg.n_layer; ++l) {
        const std::string p = layer_prefix(l);
        const std::string tm = p + "time_mix.";
        const std::string ms = p + "meta_state.";
        const TimeMixVars<T> tv{v[tm + "mu"],      v[tm + "w_r"],       v[tm + "w_k"],      v[tm + "w_v"],
                                v[tm + "w_decay"], v[tm + "b_decay"],   v[tm + "w_lr"],     v[tm + "b_lr"],
                                v[tm + "w_kappa"], v[tm + "w_out"],     v[tm + "norm.gamma"], v[tm + "norm.beta"]};
        MetaStateVars<T> mv{v[ms + "w_out"], v[ms + "norm.gamma"], v[ms + "norm.beta"], {}};
        if (cfg.has_input_projection()) mv.w_in = v[ms + "w_in"];

        const Var<T> xn = norm(x, p + "ln_tm");
        const TimeMixTrace<T> tt = time_mix_sequence(xn, zero_row, zero_state, tv, cfg);
        const Var<T> xi = add(x, tt.output);
        const MetaStateTrace<T> mt =
            meta_state_sequence(norm(xi, p + "ln_ms"), tt.states, tt.decay, tt.kappa, tt.rate, zero_state, mv, cfg);
        x = add(xi, mt.output);
        trace.shift.push_back(xn);
        trace.wkv.push_back(tt.states);
        trace.meta.push_back(mt.states);
    }
    trace.logits = matmul(norm(x, "ln_out"), v["head"]);
    return trace;
}

template <typename T>
Model<T>::Model(ModelConfig cfg, ParamStore<T> store)
    : cfg_(cfg.normalized()), store_(std::move(store)), params_(unpack(store_, cfg_)) {}

template <typename T>
void Model<T>::check_token(std::size_t token) const {
    if (token >= cfg_.vocab_size) {
        throw InputError("token id " + std::to_string(token) + " out of range for vocabulary of " +
                         std::to_string(cfg_.vocab_size));
    }
}

template <typename T>
Tensor<T> Model<T>::step(std::size_t token, InferenceState<T>& state) const {
    check_token(token);
    if (state.layers.size() != cfg_.n_layer) throw DimensionError("inference state has the wrong layer count");
    Tensor<T> x(1, cfg_.d_model,
                std::vector<T>(params_.embedding.data() + token * cfg_.d_model,
                               params_.embedding.data() + (token + 1) * cfg_.d_model));
    for (std::size_t l = 0; l < cfg_.n_layer; ++l) {
        LayerStep<T> s = layer_forward(x, state.layers[l], params_.layers[l], cfg_);
        state.layers[l] = std::move(s.state);
        x = std::move(s.output);
    }
    return kernels::matmul(residual_norm(x, params_.ln_out, cfg_), params_.head);
}

template <typename T>
ForwardResult<T> Model<T>::forward(std::span<const std::size_t> tokens) const {
    for (std::size_t t : tokens) check_token(t);
    ad::Tape<T> tape;
    const ModelVars<T> vars = bind_parameters(tape, store_, false);
    const WindowTrace<T> trace = forward_window(tape, vars, tokens, cfg_);

    const std::size_t n = cfg_.head_dim();
    const std::size_t last = tokens.size() - 1;
    ForwardResult<T> out{trace.logits.value(), initial_state()};
    for (std::size_t l = 0; l < cfg_.n_layer; ++l) {
        auto& ls = out.state.layers[l];
        const auto shift = trace.shift[l].value().row_span(last);
        std::copy(shift.begin(), shift.end(), ls.shift.data());
        const auto wkv = trace.wkv[l].value().row_span(last);
        const auto meta = trace.meta[l].value().row_span(last);
        for (std::size_t h = 0; h < cfg_.n_head; ++h) {
            std::copy_n(wkv.data() + h * n * n, n * n, ls.wkv[h].data());
            std::copy_n(meta.data() + h * n * n, n * n, ls.meta[h].data());
        }
    }
    return out;
}

template <typename T>
std::size_t sample_token(std::span<const T> logits, double temperature, double u) {
    if (logits.empty()) throw InputError("sample: empty logits");
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
        throw InputError("temperature must be a finite non-negative number");
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    if (temperature == 0.0) return best;
    const double top = static_cast<double>(logits[best]);
    std::vector<double> cumulative(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        total += std::exp((static_cast<double>(logits[i]) - top) / temperature);
        cumulative[i] = total;
    }
    const double threshold = u * total;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (cumulative[i] > threshold) return i;
    }
    return logits.size() - 1;
}

template <typename T>
std::vector<std::size_t> Model<T>::generate(std::span<const std::size_t> prompt, std::size_t steps,
                                            double temperature, std::uint64_t seed) const {
    if (prompt.empty()) throw InputError("generate: prompt must contain at least one token");
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
        throw InputError("temperature must be a finite non-negative number");
    }
    std::vector<std::size_t> out(prompt.begin(), prompt.end());
    if (steps == 0) return out;
    Rng rng(derive_seed(seed, "generate"));
    InferenceState<T> state = initial_state();
    Tensor<T> logits;
    for (std::size_t t : prompt) logits = step(t, state);
    for (std::size_t i = 0; i < steps; ++i) {
        const std::size_t next = sample_token<T>(logits.values(), temperature, uniform01(rng));
        out.push_back(next);
        if (i + 1 < steps) logits = step(next, state);
    }
    return out;
}

#define METASTATE_INSTANTIATE(T)                                                                             \
    template ParamStore<T> init_params(const ModelConfig&, std::uint64_t);                                  \
    template void check_store(const ParamStore<T>&, const ModelConfig&);                                    \
    template ModelParams<T> unpack(const ParamStore<T>&, const ModelConfig&);                               \
    template struct InferenceState<T>;                                                                      \
    template InferenceState<T> initial_state(const ModelConfig&);                                           \
    template Tensor<T> residual_norm(const Tensor<T>&, const NormParams<T>&, const ModelConfig&);           \
    template LayerStep<T> layer_forward(const Tensor<T>&, const LayerState<T>&, const LayerParams<T>&,      \
                                        const ModelConfig&);                                                \
    template struct ModelVars<T>;                                                                           \
    template ModelVars<T> bind_parameters(ad::Tape<T>&, const ParamStore<T>&, bool);                        \
    template WindowTrace<T> forward_window(ad::Tape<T>&, const ModelVars<T>&, std::span<const std::size_t>, \
                                           const ModelConfig&);                                             \
    template class Model<T>;                                                                                \
    template std::size_t sample_token(std::span<const T>, double, double);

METASTATE_INSTANTIATE(float)
METASTATE_INSTANTIATE(double)

} // namespace metastate
