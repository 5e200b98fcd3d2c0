#pragma once

// Invariant checks shared by `metastate check`, the unit tests and the
// acceptance binary. Each returns the measured quantity next to its bound so
// callers can print or assert on it.

#include <cstdint>
#include <string>
#include <vector>

#include "metastate/config.hpp"

namespace metastate {

struct CheckResult {
    std::string name;
    bool passed = false;
    double measured = 0.0;
    double bound = 0.0;
    std::string detail;
    double seconds = 0.0;

    std::string line() const;
};

// Stepwise wkv and ms rollouts (value kernels and the tape scan) against the
// unrolled sum of outer products times trailing transition products.
CheckResult check_recurrence(std::size_t max_steps = 16, std::size_t max_dim = 8, std::uint64_t seed = 0);

// Power-iteration spectral norm of diag(w) - k^T (a . k) for random terms
// whose raw pre-activations are standard normal.
CheckResult check_transition_stability(std::size_t draws = 1000, std::size_t max_dim = 8, std::uint64_t seed = 0);

// ||wkv_t||_F <= ||wkv_0||_F + sum ||v_i^T k_i||_F along random rollouts.
CheckResult check_contractivity(std::size_t rollouts = 100, std::size_t steps = 16, std::uint64_t seed = 0);

// Every tape op against central differences (h = 1e-5) in 64-bit.
CheckResult check_op_gradients(std::size_t trials = 112, std::uint64_t seed = 0);

// Every trainable tensor of a one-layer model (D = 8, h = 2, vocab 11, T = 3)
// against central differences, plus the time-mix gradient that reaches the
// loss only through the encoder's use of wkv_t.
CheckResult check_model_gradients(std::uint64_t seed = 0);

// Same seed, same inputs: identical gradients, and tape replay reproduces
// every recorded value.
CheckResult check_determinism(std::uint64_t seed = 0);

CheckResult check_incremental_batch(const ModelConfig& cfg, std::size_t length = 64, std::uint64_t seed = 0);
CheckResult check_causality(const ModelConfig& cfg, std::size_t trials = 10, std::uint64_t seed = 0);

// Encoder outputs nonnegative, ms_1 symmetric PSD, first-step output
// invariant under z -> c z.
CheckResult check_encoder_properties(std::size_t draws = 100, std::uint64_t seed = 0);

// Meta-State registry holds exactly the output projection and norm (plus
// W_in once widened); no softmax node on Meta-State or model tapes.
CheckResult check_parameter_audit(const ModelConfig& cfg);

// Closed-form parameter count against the shape registry for every preset
// and for `cfg`.
CheckResult check_parameter_count(const ModelConfig& cfg);

CheckResult check_constant_state(const ModelConfig& cfg, const std::vector<std::size_t>& lengths = {64, 256, 1024},
                                 std::uint64_t seed = 0);

// Widens `cfg` (zeros plan, truncated-identity W_in) and compares logits on
// `count` random length-`length` sequences drawn with `sequence_seed`.
CheckResult check_function_preservation(const ModelConfig& cfg, std::size_t target_dim = 0, std::uint64_t seed = 0,
                                        std::size_t count = 10, std::size_t length = 32,
                                        std::uint64_t sequence_seed = 43);

// save -> load -> save through files, with freeze masks and optimizer moments.
CheckResult check_checkpoint_roundtrip(const ModelConfig& cfg, std::uint64_t seed = 0);

// Everything above; `cfg.precision` selects the model-level checks' precision.
std::vector<CheckResult> run_invariant_suite(const ModelConfig& cfg, std::uint64_t seed = 0);

bool all_passed(const std::vector<CheckResult>& results);

} // namespace metastate
