#include "cli.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "metastate/bench.hpp"
#include "metastate/scaling.hpp"
#include "metastate/train.hpp"
#include "metastate/verify.hpp"

namespace metastate {

namespace {

struct Common {
    std::uint64_t seed = 0;
    std::string precision;
    std::string config;
    std::string preset;
};

ModelConfig resolve_config(const Common& c, const std::string& fallback_preset) {
    ModelConfig cfg;
    if (!c.config.empty()) {
        std::ifstream in(c.config);
        if (!in) throw InputError("cannot read config file " + c.config);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config file " + c.config + ": " + e.what());
        }
        if (j.contains("model")) j = j.at("model");
        cfg = model_config_from_json(j);
    } else {
        cfg = preset(c.preset.empty() ? fallback_preset : c.preset);
    }
    if (!c.precision.empty()) cfg.precision = parse_precision(c.precision);
    cfg.validate();
    return cfg;
}

bool config_given(const Common& c) { return !c.config.empty() || !c.preset.empty(); }

Checkpoint load_with_precision(const std::string& path, const Common& c) {
    Checkpoint ckpt = load_checkpoint(path);
    if (!c.precision.empty()) ckpt.config.precision = parse_precision(c.precision);
    return ckpt;
}

std::string fixed(double v, int digits = 4) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

struct TrainArgs {
    std::string corpus, out, metrics, resume;
    TrainConfig config;
};

int cmd_train(const TrainArgs& a, const Common& c, std::ostream& out) {
    const Corpus corpus = load_corpus(a.corpus);
    Checkpoint start;
    if (!a.resume.empty()) {
        start = load_checkpoint(a.resume);
        if (config_given(c)) check_resume(start, resolve_config(c, "tiny"));
        if (!c.precision.empty()) start.config.precision = parse_precision(c.precision);
    } else {
        start = initial_checkpoint(resolve_config(c, "tiny"), c.seed);
    }
    TrainOptions options;
    options.config = a.config;
    options.config.seed = c.seed;
    options.config.threads = threads_from_env();
    options.checkpoint_path = a.out;
    if (!a.metrics.empty()) options.metrics_path = a.metrics;
    options.on_metrics = [&](const TrainMetrics& m) {
        if (!m.val_loss) return;
        out << "step " << m.step << "  loss " << fixed(m.loss) << "  val " << fixed(*m.val_loss) << "  ("
            << fixed(m.elapsed, 1) << " s)" << std::endl;
    };
    out << "training " << parameter_count(start.config) << " parameters (" << to_string(start.config.precision)
        << ") from step " << start.step << " to " << a.config.steps << std::endl;
    const TrainResult r = start.config.precision == Precision::F64 ? train<double>(start, corpus, options)
                                                                     : train<float>(start, corpus, options);
    out << "final validation loss " << fixed(r.final_val_loss) << ", checkpoint " << a.out << std::endl;
    return 0;
}

int cmd_eval(const std::string& path, const std::string& corpus_path, const std::string& split, std::size_t seq_len,
             const Common& c, std::ostream& out) {
    const Checkpoint ckpt = load_with_precision(path, c);
    const Corpus corpus = load_corpus(corpus_path);
    const auto& tokens = split == "train" ? corpus.train : corpus.validation;
    const double loss = evaluate(ckpt, tokens, seq_len);
    out << split << " loss " << fixed(loss, 6) << " over " << tokens.size() << " tokens" << std::endl;
    return 0;
}

template <typename T>
std::vector<std::size_t> generate_with(const Checkpoint& ckpt, const std::vector<std::size_t>& prompt, std::size_t steps,
                                       double temperature, std::uint64_t seed) {
    const Model<T> model(ckpt.config, ckpt.parameters<T>());
    return model.generate(prompt, steps, temperature, seed);
}

int cmd_generate(const std::string& path, const std::string& prompt, std::size_t steps, double temperature,
                 const Common& c, std::ostream& out) {
    if (!(temperature >= 0.0)) throw InputError("temperature must be non-negative (0 selects argmax)");
    const Checkpoint ckpt = load_with_precision(path, c);
    const auto ids = encode_bytes(prompt);
    const auto tokens = ckpt.config.precision == Precision::F64
                            ? generate_with<double>(ckpt, ids, steps, temperature, c.seed)
                            : generate_with<float>(ckpt, ids, steps, temperature, c.seed);
    out << decode_bytes(tokens) << std::endl;
    return 0;
}

struct ScaleArgs {
    std::string in, out, plan = "zeros", projection = "identity";
    std::size_t to_dim = 0;
    double init_scale = 0.02;
    bool train_time_mix = false;
};

int cmd_scale(const ScaleArgs& a, const Common& c, std::ostream& out) {
    const Checkpoint in = load_checkpoint(a.in);
    ScalePlan plan;
    plan.source = in.config;
    plan.target_dim = a.to_dim;
    plan.init = parse_init_mode(a.plan);
    plan.init_scale = a.init_scale;
    plan.projection = parse_projection_mode(a.projection);
    plan.freeze_time_mix = !a.train_time_mix;
    const Checkpoint scaled = scale_checkpoint(in, plan, c.seed);
    save_checkpoint(scaled, a.out);
    std::size_t frozen = 0;
    for (const auto& [name, mask] : scaled.freeze_masks()) frozen += std::count(mask.values().begin(), mask.values().end(), 1);
    out << "d_model " << in.config.d_model << " -> " << scaled.config.d_model << " (" << to_string(plan.init)
        << " new blocks, " << to_string(plan.projection) << " W_in); parameters " << parameter_count(in.config)
        << " -> " << parameter_count(scaled.config) << "; " << frozen << " entries frozen; wrote " << a.out
        << std::endl;
    return 0;
}

int cmd_verify_scale(const std::string& old_path, const std::string& new_path, std::size_t count, std::size_t length,
                     std::uint64_t sequence_seed, std::ostream& out) {
    const Checkpoint old_ckpt = load_checkpoint(old_path);
    const Checkpoint new_ckpt = load_checkpoint(new_path);
    const auto report = verify_function_preservation(
        old_ckpt, new_ckpt, random_sequences(count, length, old_ckpt.config.vocab_size, sequence_seed));
    out << report.str() << std::endl;
    return report.pass() ? 0 : kExitFailure;
}

int cmd_check(const Common& c, std::ostream& out) {
    const ModelConfig cfg = resolve_config(c, "tiny");
    out << "invariant suite: " << (cfg.preset.empty() ? "custom" : cfg.preset) << " config, "
        << to_string(cfg.precision) << ", seed " << c.seed << std::endl;
    const auto results = run_invariant_suite(cfg, c.seed);
    std::size_t failed = 0;
    for (const auto& r : results) {
        out << r.line() << std::endl;
        failed += !r.passed;
    }
    out << (failed == 0 ? "all " + std::to_string(results.size()) + " checks passed"
                        : std::to_string(failed) + " of " + std::to_string(results.size()) + " checks FAILED")
        << std::endl;
    return failed == 0 ? 0 : kExitFailure;
}

struct BenchArgs {
    std::vector<std::size_t> lengths{256, 512, 1024, 2048};
    std::size_t repeats = 5;
    std::size_t warmup = 1;
    bool no_baseline = false;
    std::string csv;
};

int cmd_bench(const BenchArgs& a, const Common& c, std::ostream& out) {
    const ModelConfig cfg = resolve_config(c, "bench");
    BenchOptions options;
    options.repeats = a.repeats;
    options.warmup = a.warmup;
    options.seed = c.seed;
    options.include_baseline = !a.no_baseline;
    const BenchReport report = bench_complexity(cfg, a.lengths, options);
    out << report.table();
    if (!a.csv.empty()) {
        std::ofstream f(a.csv);
        if (!f) throw InputError("cannot write " + a.csv);
        f << report.csv();
        out << "csv written to " << a.csv << std::endl;
    }
    return 0;
}

const CLI::App* deepest(const CLI::App& app) {
    const CLI::App* target = &app;
    for (const CLI::App* s : app.get_subcommands()) target = s;
    return target;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Meta-State sequence model: training, scaling, verification and benchmarks", "metastate"};
    app.require_subcommand(1);

    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--seed", common.seed, "Random seed");
        sub->add_option("--precision", common.precision, "Numeric precision")->check(CLI::IsMember({"f32", "f64"}));
        sub->add_option("--config", common.config, "Model config JSON file (overrides --preset)");
        sub->add_option("--preset", common.preset, "Model preset")->check(CLI::IsMember(preset_names()));
    };
    add_common(&app);

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train a model on a byte-level corpus");
    train_cmd->add_option("--corpus", train_args.corpus, "Text file")->required();
    train_cmd->add_option("--out", train_args.out, "Checkpoint to write")->required();
    train_cmd->add_option("--metrics", train_args.metrics, "Append JSON-lines metrics here");
    train_cmd->add_option("--resume", train_args.resume, "Continue from this checkpoint");
    train_cmd->add_option("--steps", train_args.config.steps, "Total optimizer steps")->capture_default_str();
    train_cmd->add_option("--batch", train_args.config.batch_size, "Windows per step")->capture_default_str();
    train_cmd->add_option("--seq-len", train_args.config.seq_len, "Window length")->capture_default_str();
    train_cmd->add_option("--lr", train_args.config.learning_rate, "Adam learning rate")->capture_default_str();
    train_cmd->add_option("--clip", train_args.config.clip_norm, "Global gradient-norm clip")->capture_default_str();
    train_cmd->add_option("--eval-every", train_args.config.eval_every, "Validation interval")->capture_default_str();
    train_cmd->add_option("--checkpoint-every", train_args.config.checkpoint_every, "0 writes only at the end")
        ->capture_default_str();

    std::string eval_ckpt, eval_corpus, eval_split = "validation";
    std::size_t eval_seq = 128;
    auto* eval_cmd = app.add_subcommand("eval", "Mean cross-entropy of a checkpoint");
    eval_cmd->add_option("checkpoint", eval_ckpt)->required();
    eval_cmd->add_option("--corpus", eval_corpus, "Text file")->required();
    eval_cmd->add_option("--split", eval_split)->check(CLI::IsMember({"train", "validation"}))->capture_default_str();
    eval_cmd->add_option("--seq-len", eval_seq)->capture_default_str();

    std::string gen_ckpt, gen_prompt;
    std::size_t gen_steps = 200;
    double gen_temperature = 1.0;
    auto* gen_cmd = app.add_subcommand("generate", "Sample a continuation");
    gen_cmd->add_option("checkpoint", gen_ckpt)->required();
    gen_cmd->add_option("--prompt", gen_prompt)->required();
    gen_cmd->add_option("--steps", gen_steps)->capture_default_str();
    gen_cmd->add_option("--temperature", gen_temperature, "0 selects argmax")->capture_default_str();

    ScaleArgs scale_args;
    auto* scale_cmd = app.add_subcommand("scale", "Widen a checkpoint's state and model dimension");
    scale_cmd->add_option("in", scale_args.in)->required();
    scale_cmd->add_option("out", scale_args.out)->required();
    scale_cmd->add_option("--to-dim", scale_args.to_dim, "Target d_model")->required();
    scale_cmd->add_option("--plan", scale_args.plan, "Init for new entries")
        ->check(CLI::IsMember({"zeros", "random"}))
        ->capture_default_str();
    scale_cmd->add_option("--projection", scale_args.projection, "W_in init")
        ->check(CLI::IsMember({"identity", "random"}))
        ->capture_default_str();
    scale_cmd->add_option("--init-scale", scale_args.init_scale, "s for uniform(-s, s) new entries")->capture_default_str();
    scale_cmd->add_flag("--train-time-mix", scale_args.train_time_mix, "Leave original time-mix entries trainable");

    std::string vs_old, vs_new;
    std::size_t vs_count = 10, vs_length = 32;
    std::uint64_t vs_seed = 43;
    auto* vs_cmd = app.add_subcommand("verify-scale", "Compare logits of a checkpoint and its widened copy");
    vs_cmd->add_option("old", vs_old)->required();
    vs_cmd->add_option("new", vs_new)->required();
    vs_cmd->add_option("--count", vs_count)->capture_default_str();
    vs_cmd->add_option("--length", vs_length)->capture_default_str();
    vs_cmd->add_option("--sequence-seed", vs_seed)->capture_default_str();

    auto* check_cmd = app.add_subcommand("check", "Run the invariant suite");

    BenchArgs bench_args;
    auto* bench_cmd = app.add_subcommand("bench", "Time stateful inference against the attention baseline");
    bench_cmd->add_option("--lengths", bench_args.lengths, "Comma-separated sequence lengths")
        ->delimiter(',')
        ->capture_default_str();
    bench_cmd->add_option("--repeats", bench_args.repeats)->capture_default_str();
    bench_cmd->add_option("--warmup", bench_args.warmup)->capture_default_str();
    bench_cmd->add_flag("--no-baseline", bench_args.no_baseline);
    bench_cmd->add_option("--csv", bench_args.csv, "Also write the report as CSV");

    for (CLI::App* sub : app.get_subcommands({})) {
        sub->fallthrough();
        sub->footer("Common options --seed, --precision, --config and --preset may follow the subcommand.");
    }

    // CLI11 would report a stray word as a missing subcommand; name it instead.
    for (const auto& a : args) {
        if (a.empty() || a[0] == '-') {
            if (a == "--seed" || a == "--precision" || a == "--config" || a == "--preset") break; // value follows
            continue;
        }
        if (!app.get_subcommand_no_throw(a)) {
            err << "error: unknown subcommand '" << a << "'\n\n" << app.help();
            return kExitUsage;
        }
        break;
    }

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << deepest(app)->help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << deepest(app)->help();
        return kExitUsage;
    }

    try {
        if (*train_cmd) return cmd_train(train_args, common, out);
        if (*eval_cmd) return cmd_eval(eval_ckpt, eval_corpus, eval_split, eval_seq, common, out);
        if (*gen_cmd) return cmd_generate(gen_ckpt, gen_prompt, gen_steps, gen_temperature, common, out);
        if (*scale_cmd) return cmd_scale(scale_args, common, out);
        if (*vs_cmd) return cmd_verify_scale(vs_old, vs_new, vs_count, vs_length, vs_seed, out);
        if (*check_cmd) return cmd_check(common, out);
        if (*bench_cmd) {
            try {
                return cmd_bench(bench_args, common, out);
            } catch (const InputError& e) {
                err << "error: " << e.what() << "\n\n" << bench_cmd->help();
                return kExitUsage;
            }
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << std::endl;
        return kExitFailure;
    }
    return kExitUsage;
}

} // namespace metastate
