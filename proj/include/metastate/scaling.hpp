#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metastate/checkpoint.hpp"
#include "metastate/random.hpp"

namespace metastate {

enum class InitMode { Zeros, Uniform };
enum class ProjectionMode { TruncatedIdentity, Random };

InitMode parse_init_mode(const std::string& s);
std::string to_string(InitMode m);
ProjectionMode parse_projection_mode(const std::string& s);
std::string to_string(ProjectionMode m);

struct ScalePlan {
    ModelConfig source;
    std::size_t target_dim = 0;
    std::size_t target_heads = 0; // 0 keeps the source head count
    InitMode init = InitMode::Zeros;
    double init_scale = 0.02;
    ProjectionMode projection = ProjectionMode::TruncatedIdentity;
    bool freeze_time_mix = true;

    // Throws ConfigError when the plan shrinks, changes the head count, or
    // breaks divisibility.
    void validate() const;
    bool is_identity() const;
    ModelConfig target() const;
};

// Old matrix as the top-left block, zeros elsewhere.
template <typename T>
Tensor<T> expand_state(const Tensor<T>& s, std::size_t new_dim);

// ReLU((x_head_orig W_in) wkv_scaled) for one head.
template <typename T>
Tensor<T> scaled_sse_encode(const Tensor<T>& x_head_orig, const Tensor<T>& w_in, const Tensor<T>& wkv_scaled);

// One head's (D/h) x D output projection grown to (D'/h') x D': old block top
// left, new rows and columns per the plan's init mode.
template <typename T>
Tensor<T> extend_output_projection(const Tensor<T>& w_o, const ScalePlan& plan, Rng& rng);

// Truncated identity [I | 0] of shape rows x cols.
template <typename T>
Tensor<T> truncated_identity(std::size_t rows, std::size_t cols);

// Rewrites every tensor for the target config, inserts or widens W_in and
// records freeze masks (1 = original entry). Optimizer moments are dropped.
Checkpoint scale_checkpoint(const Checkpoint& in, const ScalePlan& plan, std::uint64_t seed);

struct PreservationReport {
    double max_abs_deviation = 0.0;
    std::size_t sequences = 0;
    std::size_t positions = 0;
    double tolerance = 1e-6;

    bool pass() const { return max_abs_deviation <= tolerance; }
    std::string str() const;
};

// Runs both checkpoints in 64-bit on every sequence and compares logits over
// the original vocabulary.
PreservationReport verify_function_preservation(const Checkpoint& old_ckpt, const Checkpoint& new_ckpt,
                                                const std::vector<std::vector<std::size_t>>& sequences,
                                                double tolerance = 1e-6);

std::vector<std::vector<std::size_t>> random_sequences(std::size_t count, std::size_t length, std::size_t vocab,
                                                       std::uint64_t seed);

} // namespace metastate
