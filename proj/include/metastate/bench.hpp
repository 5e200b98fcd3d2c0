#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "metastate/config.hpp"

namespace metastate {

enum class ModelKind { MetaState, Attention };
std::string to_string(ModelKind k);

struct BenchRow {
    ModelKind kind = ModelKind::MetaState;
    std::size_t length = 0;
    double ms = 0.0;
    std::size_t state_bytes = 0;
    double tokens_per_sec = 0.0;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    std::map<ModelKind, double> slope; // least-squares slope of log(ms) against log(T)

    std::string csv() const;
    std::string table() const;
};

struct BenchOptions {
    std::size_t repeats = 5;
    std::size_t warmup = 1;
    std::uint64_t seed = 0;
    bool include_baseline = true;
};

// Least-squares slope of log(y) against log(x).
double log_log_slope(const std::vector<double>& x, const std::vector<double>& y);

// Times token-by-token stateful inference in 32-bit on one thread. Lengths
// must be strictly increasing with at least three entries.
BenchReport bench_complexity(const ModelConfig& cfg, const std::vector<std::size_t>& lengths,
                             const BenchOptions& options = {});

} // namespace metastate
