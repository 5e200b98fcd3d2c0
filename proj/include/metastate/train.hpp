#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "metastate/corpus.hpp"
#include "metastate/optim.hpp"

namespace metastate {

// Mean over rows of -log softmax(logits)[target], max-subtracted.
template <typename T>
T cross_entropy_loss(const Tensor<T>& logits, std::span<const std::size_t> targets);

struct TrainMetrics {
    std::size_t step = 0;
    double loss = 0.0;
    std::optional<double> val_loss;
    double lr = 0.0;
    double elapsed = 0.0;

    nlohmann::json to_json() const;
};

struct TrainOptions {
    TrainConfig config;
    std::optional<std::filesystem::path> checkpoint_path;
    std::optional<std::filesystem::path> metrics_path; // line-delimited JSON, appended
    std::function<void(const TrainMetrics&)> on_metrics;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<TrainMetrics> log;
    std::optional<double> initial_val_loss; // only when training starts at step 0
    double final_val_loss = 0.0;
};

// Loss and per-parameter gradients of one window (inputs tokens[0..n-1],
// targets tokens[1..n]).
template <typename T>
std::pair<T, ParamStore<T>> window_gradients(const ParamStore<T>& params, const ModelConfig& cfg,
                                             std::span<const std::size_t> tokens);

// Window starts for one optimizer step; a pure function of (seed, step).
std::vector<std::size_t> batch_offsets(std::uint64_t seed, std::uint64_t step, std::size_t corpus_size,
                                       std::size_t window, std::size_t batch);

// Continues `start` (fresh or resumed) up to `options.config.steps` optimizer
// steps. Moments and freeze masks in the checkpoint are honoured.
template <typename T>
TrainResult train(const Checkpoint& start, const Corpus& corpus, const TrainOptions& options);

// Token-weighted mean cross-entropy over consecutive windows of `seq_len`.
template <typename T>
double evaluate(const ParamStore<T>& params, const ModelConfig& cfg, std::span<const std::size_t> tokens,
                std::size_t seq_len);

double evaluate(const Checkpoint& ckpt, std::span<const std::size_t> tokens, std::size_t seq_len);

// Fresh checkpoint for `cfg` at step 0.
Checkpoint initial_checkpoint(const ModelConfig& cfg, std::uint64_t seed);

// Throws CheckpointError when a resumed checkpoint was trained with a different architecture.
void check_resume(const Checkpoint& ckpt, const ModelConfig& cfg);

// Worker count from METASTATE_THREADS, default 1.
std::size_t threads_from_env();

} // namespace metastate
