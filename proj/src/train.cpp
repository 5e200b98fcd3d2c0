#include "metastate/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "metastate/kernels.hpp"
#include "metastate/random.hpp"

namespace metastate {

template <typename T>
T cross_entropy_loss(const Tensor<T>& logits, std::span<const std::size_t> targets) {
    if (targets.size() != logits.rows()) {
        throw DimensionError("cross_entropy_loss: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(logits.rows()) + " rows");
    }
    for (std::size_t t : targets) {
        if (t >= logits.cols()) throw InputError("cross_entropy_loss: target " + std::to_string(t) + " out of range");
    }
    return kernels::cross_entropy(logits, targets);
}

nlohmann::json TrainMetrics::to_json() const {
    return nlohmann::json{{"step", step},
                          {"loss", loss},
                          {"val_loss", val_loss ? nlohmann::json(*val_loss) : nlohmann::json(nullptr)},
                          {"lr", lr},
                          {"elapsed", elapsed}};
}

template <typename T>
std::pair<T, ParamStore<T>> window_gradients(const ParamStore<T>& params, const ModelConfig& cfg,
                                             std::span<const std::size_t> tokens) {
    if (tokens.size() < 2) throw InputError("training window needs at least two tokens");
    ad::Tape<T> tape;
    const ModelVars<T> vars = bind_parameters(tape, params, true);
    const auto inputs = tokens.first(tokens.size() - 1);
    const WindowTrace<T> trace = forward_window(tape, vars, inputs, cfg);
    const ad::Var<T> loss =
        ad::softmax_cross_entropy(trace.logits, std::vector<std::size_t>(tokens.begin() + 1, tokens.end()));
    const ad::Gradients<T> grads = tape.backward(loss);
    ParamStore<T> out;
    for (const auto& [name, var] : vars.by_name) out.emplace(name, grads.of(var));
    return {loss.value()[0], std::move(out)};
}

std::vector<std::size_t> batch_offsets(std::uint64_t seed, std::uint64_t step, std::size_t corpus_size,
                                       std::size_t window, std::size_t batch) {
    if (corpus_size < window) {
        throw InputError("training split has " + std::to_string(corpus_size) + " tokens, fewer than one window of " +
                         std::to_string(window));
    }
    Rng rng(derive_seed(seed, step, 0xB47C));
    std::vector<std::size_t> out(batch);
    for (auto& o : out) o = static_cast<std::size_t>(rng() % (corpus_size - window + 1));
    return out;
}

template <typename T>
double evaluate(const ParamStore<T>& params, const ModelConfig& cfg, std::span<const std::size_t> tokens,
                std::size_t seq_len) {
    if (tokens.size() < 2) throw InputError("evaluation needs at least two tokens");
    if (seq_len == 0) throw ConfigError("sequence length must be positive");
    const Model<T> model(cfg, params);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i + 1 < tokens.size(); i += seq_len) {
        const std::size_t len = std::min(seq_len, tokens.size() - 1 - i);
        const Tensor<T> logits = model.forward(tokens.subspan(i, len)).logits;
        total += static_cast<double>(cross_entropy_loss(logits, tokens.subspan(i + 1, len))) * static_cast<double>(len);
        count += len;
    }
    return total / static_cast<double>(count);
}

double evaluate(const Checkpoint& ckpt, std::span<const std::size_t> tokens, std::size_t seq_len) {
    if (ckpt.config.precision == Precision::F32) {
        return evaluate(ckpt.parameters<float>(), ckpt.config, tokens, seq_len);
    }
    return evaluate(ckpt.parameters<double>(), ckpt.config, tokens, seq_len);
}

Checkpoint initial_checkpoint(const ModelConfig& config, std::uint64_t seed) {
    const ModelConfig cfg = config.normalized();
    cfg.validate();
    if (cfg.precision == Precision::F32) return make_checkpoint(cfg, init_params<float>(cfg, seed));
    return make_checkpoint(cfg, init_params<double>(cfg, seed));
}

void check_resume(const Checkpoint& ckpt, const ModelConfig& config) {
    const ModelConfig a = ckpt.config.normalized();
    const ModelConfig b = config.normalized();
    if (a.vocab_size != b.vocab_size || a.d_model != b.d_model || a.n_head != b.n_head || a.n_layer != b.n_layer ||
        a.residual_segments != b.residual_segments || a.head_segments != b.head_segments ||
        a.sse_input_dim != b.sse_input_dim || a.precision != b.precision) {
        throw CheckpointError("cannot resume: checkpoint config " + to_json(a).dump() + " differs from " +
                              to_json(b).dump());
    }
}

std::size_t threads_from_env() {
    const char* v = std::getenv("METASTATE_THREADS");
    if (v == nullptr || *v == '\0') return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (*end != '\0' || n < 1) throw ConfigError("METASTATE_THREADS must be a positive integer");
    return static_cast<std::size_t>(n);
}

namespace {

template <typename T>
bool all_finite(const ParamStore<T>& g) {
    for (const auto& [name, t] : g) {
        for (T v : t.values()) if (!std::isfinite(v)) return false;
    }
    return true;
}

} // namespace

template <typename T>
TrainResult train(const Checkpoint& start, const Corpus& corpus, const TrainOptions& options) {
    const TrainConfig& tc = options.config;
    tc.validate();
    const ModelConfig cfg = start.config.normalized();
    ParamStore<T> params = start.parameters<T>();
    AdamState<T> adam{start.moments<T>(kMomentPrefix), start.moments<T>(kVariancePrefix)};
    if (adam.m.empty() && adam.v.empty()) adam = zero_moments(params);
    const FreezeMasks masks = start.freeze_masks();
    const std::size_t window = tc.seq_len + 1;

    const auto snapshot = [&](std::uint64_t step) {
        Checkpoint c = make_checkpoint(cfg, params, step);
        c.set_moments(kMomentPrefix, adam.m);
        c.set_moments(kVariancePrefix, adam.v);
        c.set_freeze_masks(masks);
        return c;
    };

    TrainResult result;
    std::ofstream metrics_out;
    if (options.metrics_path) {
        metrics_out.open(*options.metrics_path, std::ios::app);
        if (!metrics_out) throw InputError("cannot open metrics log '" + options.metrics_path->string() + "'");
    }
    const auto clock_start = std::chrono::steady_clock::now();
    const auto elapsed = [&]() {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
    };
    const auto validate_now = [&]() { return evaluate(params, cfg, corpus.validation, tc.seq_len); };

    if (start.step == 0) result.initial_val_loss = validate_now();
    std::optional<double> last_val = result.initial_val_loss;

    const std::size_t workers = std::min(tc.threads, tc.batch_size);
    std::vector<std::pair<T, ParamStore<T>>> slots(tc.batch_size);
    for (std::uint64_t step = start.step + 1; step <= tc.steps; ++step) {
        const auto offsets = batch_offsets(tc.seed, step, corpus.train.size(), window, tc.batch_size);
        const auto run = [&](std::size_t first) {
            for (std::size_t b = first; b < tc.batch_size; b += workers) {
                slots[b] = window_gradients(params, cfg,
                                            std::span<const std::size_t>(corpus.train).subspan(offsets[b], window));
            }
        };
        if (workers <= 1) {
            run(0);
        } else {
            std::vector<std::jthread> pool;
            for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
        }

        // Fixed reduction order keeps results independent of the worker count.
        double loss = 0.0;
        ParamStore<T> grads = std::move(slots[0].second);
        loss += static_cast<double>(slots[0].first);
        for (std::size_t b = 1; b < tc.batch_size; ++b) {
            loss += static_cast<double>(slots[b].first);
            for (auto& [name, g] : grads) {
                const Tensor<T>& other = slots[b].second.at(name);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += other[i];
            }
        }
        loss /= static_cast<double>(tc.batch_size);
        const T inv = T(1) / static_cast<T>(tc.batch_size);
        for (auto& [name, g] : grads) {
            for (T& v : g.values()) v *= inv;
        }
        if (!std::isfinite(loss) || !all_finite(grads)) {
            throw TrainingError("non-finite loss or gradient at step " + std::to_string(step) + " (loss " +
                                std::to_string(loss) + ")");
        }
        clip_gradients(grads, tc.clip_norm, masks);
        adam_step(params, grads, adam, step, tc, masks);
        clamp_constrained(params);

        TrainMetrics m{step, loss, std::nullopt, tc.learning_rate, 0.0};
        if ((tc.eval_every > 0 && step % tc.eval_every == 0) || step == tc.steps) {
            m.val_loss = validate_now();
            if (!std::isfinite(*m.val_loss)) {
                throw TrainingError("non-finite validation loss at step " + std::to_string(step));
            }
            last_val = m.val_loss;
        }
        m.elapsed = elapsed();
        if (metrics_out) metrics_out << m.to_json().dump() << '\n' << std::flush;
        if (options.on_metrics) options.on_metrics(m);
        result.log.push_back(m);
        if (options.checkpoint_path && tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0) {
            save_checkpoint(snapshot(step), *options.checkpoint_path);
        }
    }
    const std::uint64_t final_step = std::max<std::uint64_t>(start.step, tc.steps);
    result.checkpoint = snapshot(final_step);
    result.final_val_loss = last_val ? *last_val : validate_now();
    if (options.checkpoint_path) save_checkpoint(result.checkpoint, *options.checkpoint_path);
    return result;
}

#define METASTATE_INSTANTIATE(T)                                                                          \
    template T cross_entropy_loss(const Tensor<T>&, std::span<const std::size_t>);                        \
    template std::pair<T, ParamStore<T>> window_gradients(const ParamStore<T>&, const ModelConfig&,       \
                                                          std::span<const std::size_t>);                  \
    template TrainResult train<T>(const Checkpoint&, const Corpus&, const TrainOptions&);                 \
    template double evaluate(const ParamStore<T>&, const ModelConfig&, std::span<const std::size_t>,      \
                             std::size_t);

METASTATE_INSTANTIATE(float)
METASTATE_INSTANTIATE(double)

} // namespace metastate
