// Acceptance gate: every headline criterion, one PASS/FAIL line each.
// Exit status is non-zero when any criterion fails or exceeds its time limit.
//
//   acceptance [corpus.txt]

#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iostream>
#include <sstream>

#include "metastate/bench.hpp"
#include "metastate/scaling.hpp"
#include "metastate/train.hpp"
#include "metastate/verify.hpp"

#ifndef METASTATE_CORPUS
#define METASTATE_CORPUS "data/corpus.txt"
#endif

using namespace metastate;

namespace {

struct Criterion {
    std::string name;
    double limit_seconds;
    std::function<CheckResult()> run;
};

ModelConfig tiny64() {
    ModelConfig cfg = preset("tiny");
    cfg.precision = Precision::F64;
    return cfg;
}

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(6);
    s << v;
    return s.str();
}

double since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Tiny preset trained on the bundled corpus, then widened and fine-tuned with
// the original entries frozen.
CheckResult learning_sanity(const std::string& corpus_path) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    r.name = "learning sanity";
    const Corpus corpus = load_corpus(corpus_path);
    const std::size_t bytes = corpus.train.size() + corpus.validation.size();

    TrainOptions opt;
    opt.config.steps = 2000;
    opt.config.batch_size = 8;
    opt.config.seq_len = 64;
    opt.config.learning_rate = 2e-3;
    opt.config.eval_every = 250;
    opt.config.seed = 0;
    opt.config.threads = threads_from_env();
    const TrainResult base = train<float>(initial_checkpoint(preset("tiny"), 0), corpus, opt);
    const double initial = *base.initial_val_loss;
    const double trained = base.final_val_loss;
    const double train_seconds = since(t0);

    ScalePlan plan;
    plan.source = base.checkpoint.config;
    plan.target_dim = 96;
    const Checkpoint widened = scale_checkpoint(base.checkpoint, plan, 0);
    TrainOptions ft;
    ft.config = opt.config;
    ft.config.steps = 200;
    ft.config.eval_every = 50;
    const TrainResult tuned = train<float>(widened, corpus, ft);
    const double before_ft = *tuned.initial_val_loss;
    const double after_ft = tuned.final_val_loss;

    std::size_t frozen = 0, moved = 0;
    const auto masks = widened.freeze_masks();
    const auto old_params = widened.parameters<float>();
    const auto new_params = tuned.checkpoint.parameters<float>();
    for (const auto& [name, mask] : masks) {
        const auto& a = old_params.at(name);
        const auto& b = new_params.at(name);
        for (std::size_t i = 0; i < mask.size(); ++i) {
            if (!mask[i]) continue;
            ++frozen;
            if (std::memcmp(&a[i], &b[i], sizeof(float)) != 0) ++moved;
        }
    }

    const bool learn_ok = trained < std::log(256.0) && trained < 0.7 * initial && bytes >= 100 * 1024 &&
                          train_seconds < 600.0;
    const bool ft_ok = after_ft < before_ft && moved == 0 && frozen > 0;
    r.passed = learn_ok && ft_ok;
    r.measured = trained;
    r.bound = std::min(std::log(256.0), 0.7 * initial);
    r.detail = "corpus " + std::to_string(bytes) + " bytes; val " + fmt(initial) + " -> " + fmt(trained) +
               " (need < " + fmt(r.bound) + ") in " + fmt(train_seconds) + " s; fine-tune at D=96 val " +
               fmt(before_ft) + " -> " + fmt(after_ft) + ", " + std::to_string(moved) + " of " +
               std::to_string(frozen) + " frozen entries moved";
    r.seconds = since(t0);
    return r;
}

CheckResult complexity() {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    r.name = "complexity";
    const BenchReport report = bench_complexity(preset("bench"), {256, 512, 1024, 2048});
    std::size_t first = 0;
    bool constant = true;
    std::vector<std::size_t> cache;
    for (const auto& row : report.rows) {
        if (row.kind == ModelKind::MetaState) {
            if (first == 0) first = row.state_bytes;
            constant = constant && row.state_bytes == first;
        } else {
            cache.push_back(row.state_bytes);
        }
    }
    const double meta = report.slope.at(ModelKind::MetaState);
    const double attn = report.slope.at(ModelKind::Attention);
    r.passed = meta >= 0.85 && meta <= 1.25 && constant && attn >= 1.6;
    r.measured = meta;
    r.detail = "meta-state slope " + fmt(meta) + " (need [0.85, 1.25]), state " + std::to_string(first) + " bytes " +
               (constant ? "constant" : "VARYING") + "; attention slope " + fmt(attn) + " (need >= 1.6), cache " +
               std::to_string(cache.front()) + " -> " + std::to_string(cache.back()) + " bytes";
    r.seconds = since(t0);
    std::cout << report.table();
    return r;
}

} // namespace

int main(int argc, char** argv) {
    const std::string corpus = argc > 1 ? argv[1] : METASTATE_CORPUS;
    const std::vector<Criterion> criteria{
        {"recurrence correctness", 1.0, [] { return check_recurrence(16, 8, 0); }},
        {"gradient soundness", 30.0, [] { return check_model_gradients(0); }},
        {"incremental/batch equivalence", 5.0, [] { return check_incremental_batch(tiny64(), 64, 0); }},
        {"causality", 5.0, [] { return check_causality(tiny64(), 10, 0); }},
        {"transition stability", 5.0, [] { return check_transition_stability(1000, 8, 0); }},
        {"no new parameters / no softmax", 5.0, [] { return check_parameter_audit(preset("tiny")); }},
        {"function-preserving scaling", 30.0, [] { return check_function_preservation(tiny64(), 96, 0, 10, 32, 43); }},
        {"learning sanity", 900.0, [&] { return learning_sanity(corpus); }},
        {"complexity", 300.0, [] { return complexity(); }},
        {"checkpoint round-trip", 10.0, [] { return check_checkpoint_roundtrip(preset("tiny"), 0); }},
    };

    std::vector<std::string> lines;
    std::size_t passed = 0;
    for (const auto& c : criteria) {
        CheckResult r;
        try {
            r = c.run();
        } catch (const std::exception& e) {
            r.passed = false;
            r.detail = std::string("threw: ") + e.what();
        }
        const bool in_time = r.seconds < c.limit_seconds;
        const bool ok = r.passed && in_time;
        std::ostringstream line;
        line << (ok ? "PASS " : "FAIL ") << c.name << ": " << r.detail << " [" << fmt(r.seconds) << " s, limit "
             << c.limit_seconds << " s" << (in_time ? "" : ", OVER TIME") << "]";
        std::cout << line.str() << std::endl;
        lines.push_back(line.str());
        passed += ok ? 1 : 0;
    }
    std::cout << "\nsummary\n";
    for (const auto& l : lines) std::cout << "  " << l << '\n';
    std::cout << passed << " / " << criteria.size() << " criteria passed" << std::endl;
    return passed == criteria.size() ? 0 : 1;
}
