#include "metastate/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "metastate/baseline.hpp"
#include "metastate/random.hpp"

namespace metastate {

std::string to_string(ModelKind k) { return k == ModelKind::MetaState ? "meta-state" : "attention-baseline"; }

double log_log_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw InputError("slope fit needs at least two matching points");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw InputError("slope fit needs positive values");
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(x.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

std::string BenchReport::csv() const {
    std::ostringstream os;
    os << "kind,T,ms,state_bytes,tokens_per_sec\n";
    for (const auto& r : rows) {
        os << to_string(r.kind) << ',' << r.length << ',' << r.ms << ',' << r.state_bytes << ',' << r.tokens_per_sec
           << '\n';
    }
    return os.str();
}

std::string BenchReport::table() const {
    std::ostringstream os;
    os << std::left << std::setw(20) << "kind" << std::right << std::setw(8) << "T" << std::setw(12) << "ms"
       << std::setw(14) << "state_bytes" << std::setw(14) << "tokens/s" << '\n';
    for (const auto& r : rows) {
        os << std::left << std::setw(20) << to_string(r.kind) << std::right << std::setw(8) << r.length
           << std::setw(12) << std::fixed << std::setprecision(3) << r.ms << std::setw(14) << r.state_bytes
           << std::setw(14) << std::setprecision(0) << r.tokens_per_sec << '\n';
    }
    for (const auto& [kind, s] : slope) {
        os << "slope(" << to_string(kind) << ") = " << std::setprecision(3) << s << '\n';
    }
    return os.str();
}

namespace {

template <typename Fn>
double median_ms(std::size_t repeats, std::size_t warmup, Fn&& run) {
    for (std::size_t i = 0; i < warmup; ++i) run();
    std::vector<double> times;
    for (std::size_t i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        run();
        times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
}

// Keeps the compiler from discarding the timed work.
volatile float g_sink = 0.0f;

} // namespace

BenchReport bench_complexity(const ModelConfig& config, const std::vector<std::size_t>& lengths,
                             const BenchOptions& options) {
    if (lengths.size() < 3) throw InputError("bench needs at least three sequence lengths");
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (lengths[i] == 0 || (i > 0 && lengths[i] <= lengths[i - 1])) {
            throw InputError("bench lengths must be positive and strictly increasing");
        }
    }
    if (options.repeats == 0) throw InputError("bench needs at least one timed repeat");
    const ModelConfig cfg = config.normalized();
    const Model<float> model(cfg, init_params<float>(cfg, options.seed));
    const BaselineConfig bcfg = BaselineConfig::matched(cfg);
    const BaselineModel<float> baseline(bcfg, init_baseline_params<float>(bcfg, options.seed));

    Rng rng(derive_seed(options.seed, "bench"));
    std::vector<std::size_t> tokens(lengths.back());
    for (auto& t : tokens) t = static_cast<std::size_t>(rng() % cfg.vocab_size);

    BenchReport report;
    std::map<ModelKind, std::vector<double>> xs, ys;
    const auto record = [&](ModelKind kind, std::size_t len, double ms, std::size_t bytes) {
        report.rows.push_back({kind, len, ms, bytes, static_cast<double>(len) / (ms / 1000.0)});
        xs[kind].push_back(static_cast<double>(len));
        ys[kind].push_back(ms);
    };
    for (std::size_t len : lengths) {
        std::size_t bytes = 0;
        const double ms = median_ms(options.repeats, options.warmup, [&] {
            InferenceState<float> s = model.initial_state();
            float acc = 0.0f;
            for (std::size_t t = 0; t < len; ++t) acc += model.step(tokens[t], s)[0];
            g_sink = acc;
            bytes = s.byte_size();
        });
        record(ModelKind::MetaState, len, ms, bytes);
    }
    if (options.include_baseline) {
        for (std::size_t len : lengths) {
            std::size_t bytes = 0;
            const double ms = median_ms(options.repeats, options.warmup, [&] {
                BaselineState<float> s = baseline.initial_state();
                float acc = 0.0f;
                for (std::size_t t = 0; t < len; ++t) acc += baseline.step(tokens[t], s)[0];
                g_sink = acc;
                bytes = s.byte_size();
            });
            record(ModelKind::Attention, len, ms, bytes);
        }
    }
    for (const auto& [kind, x] : xs) report.slope[kind] = log_log_slope(x, ys[kind]);
    return report;
}

} // namespace metastate
