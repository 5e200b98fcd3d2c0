#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

#include "metastate/kernels.hpp"
#include "metastate/train.hpp"
#include "metastate/verify.hpp"
#include "support.hpp"

using namespace metastate;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

ModelConfig small_f64() {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_head = 2;
    cfg.n_layer = 1;
    cfg.precision = Precision::F64;
    return cfg.normalized();
}

Corpus toy_corpus() {
    std::string text;
    for (int i = 0; i < 40; ++i) text += "the cat sat on the mat. a dog ran in the fog. ";
    return split_corpus(encode_bytes(text));
}

TrainConfig quick(std::size_t steps) {
    TrainConfig tc;
    tc.steps = steps;
    tc.batch_size = 2;
    tc.seq_len = 16;
    tc.learning_rate = 2e-3;
    tc.eval_every = 0;
    tc.seed = 3;
    return tc;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("metastate_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& s) {
    std::ofstream(p, std::ios::binary) << s;
}

} // namespace

TEST_SUITE("train-eval") {

TEST_CASE("bytes map to their ids and back") {
    CHECK(encode_bytes("ab") == std::vector<std::size_t>{97, 98});
    const std::vector<std::size_t> ids{104, 105, kEndOfText, 33};
    CHECK(decode_bytes(ids) == "hi!");
    const std::string all = [] {
        std::string s;
        for (int c = 0; c < 256; ++c) s.push_back(static_cast<char>(c));
        return s;
    }();
    CHECK(decode_bytes(encode_bytes(all)) == all);
}

TEST_CASE("a 100 byte corpus splits 90 / 10 in order") {
    std::vector<std::size_t> ids(100);
    for (std::size_t i = 0; i < 100; ++i) ids[i] = i;
    const Corpus c = split_corpus(ids);
    REQUIRE(c.train.size() == 90);
    REQUIRE(c.validation.size() == 10);
    CHECK(c.train.front() == 0);
    CHECK(c.validation.front() == 90);
    CHECK(c.vocab_size == kByteVocab);
}

TEST_CASE("loading a corpus twice gives the same ids; empty and missing files fail") {
    TempDir dir;
    write_file(dir.path / "a.txt", "hello world, hello corpus");
    const Corpus a = load_corpus(dir.path / "a.txt");
    const Corpus b = load_corpus(dir.path / "a.txt");
    CHECK(a.train == b.train);
    CHECK(a.validation == b.validation);
    write_file(dir.path / "empty.txt", "");
    CHECK_THROWS_AS(load_corpus(dir.path / "empty.txt"), InputError);
    CHECK_THROWS_AS(load_corpus(dir.path / "missing.txt"), InputError);
}

TEST_CASE("cross entropy of uniform logits is log of the vocabulary") {
    const Tensor<double> logits(3, 256, 0.25);
    const std::vector<std::size_t> targets{0, 17, 255};
    CHECK(cross_entropy_loss(logits, targets) == doctest::Approx(std::log(256.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy with a large margin on the target is near zero") {
    Tensor<double> logits(1, 5, 0.0);
    logits(0, 2) = 20.0;
    const std::vector<std::size_t> t{2};
    CHECK(cross_entropy_loss(logits, t) < 1e-4);
    CHECK(cross_entropy_loss(logits, t) > 0.0);
}

TEST_CASE("cross entropy matches a direct log-sum-exp") {
    Rng rng(8);
    const auto logits = random_matrix(6, 9, rng, -30, 30);
    const auto targets = random_tokens(6, 9, rng);
    double expect = 0;
    for (std::size_t r = 0; r < 6; ++r) {
        double mx = logits(r, 0);
        for (std::size_t c = 1; c < 9; ++c) mx = std::max(mx, logits(r, c));
        double s = 0;
        for (std::size_t c = 0; c < 9; ++c) s += std::exp(logits(r, c) - mx);
        expect += mx + std::log(s) - logits(r, targets[r]);
    }
    expect /= 6;
    CHECK(std::abs(cross_entropy_loss(logits, targets) - expect) <= 1e-10);
    const std::vector<std::size_t> bad{9, 0, 0, 0, 0, 0};
    CHECK_THROWS_AS(cross_entropy_loss(logits, bad), InputError);
    CHECK_THROWS_AS(cross_entropy_loss(logits, std::vector<std::size_t>{1}), DimensionError);
}

TEST_CASE("adam with zero gradients leaves parameters alone") {
    ParamStore<double> p{{"a", Tensor<double>::row({1, -2, 3})}};
    ParamStore<double> g{{"a", Tensor<double>(1, 3, 0.0)}};
    auto state = zero_moments(p);
    TrainConfig tc;
    for (std::size_t t = 1; t <= 3; ++t) adam_step(p, g, state, t, tc);
    CHECK(to_vec(p.at("a")) == std::vector<double>{1, -2, 3});
}

TEST_CASE("first adam step moves by about the learning rate against the gradient") {
    ParamStore<double> p{{"a", Tensor<double>::row({0.5})}};
    ParamStore<double> g{{"a", Tensor<double>::row({1.0})}};
    auto state = zero_moments(p);
    TrainConfig tc;
    tc.learning_rate = 1e-3;
    adam_step(p, g, state, 1, tc);
    CHECK(p.at("a")[0] - 0.5 == doctest::Approx(-1e-3).epsilon(1e-6));
    CHECK(state.m.at("a")[0] == doctest::Approx(0.1));
    CHECK(state.v.at("a")[0] == doctest::Approx(0.001));
}

TEST_CASE("frozen entries keep parameter and moments bitwise") {
    ParamStore<double> p{{"a", Tensor<double>::row({1, 2, 3, 4})}};
    ParamStore<double> g{{"a", Tensor<double>::row({0.3, -0.1, 0.7, 2})}};
    auto state = zero_moments(p);
    state.m.at("a")[1] = 0.25;
    FreezeMasks masks{{"a", Tensor<unsigned char>(1, 4, std::vector<unsigned char>{0, 1, 0, 1})}};
    TrainConfig tc;
    for (std::size_t t = 1; t <= 5; ++t) adam_step(p, g, state, t, tc, masks);
    CHECK(p.at("a")[1] == 2.0);
    CHECK(p.at("a")[3] == 4.0);
    CHECK(state.m.at("a")[1] == 0.25);
    CHECK(state.v.at("a")[3] == 0.0);
    CHECK(p.at("a")[0] != 1.0);
    CHECK(p.at("a")[2] != 3.0);
}

TEST_CASE("adam rejects mismatched keys and a zero step index") {
    ParamStore<double> p{{"a", Tensor<double>::row({1})}};
    ParamStore<double> g{{"b", Tensor<double>::row({1})}};
    auto state = zero_moments(p);
    TrainConfig tc;
    CHECK_THROWS_AS(adam_step(p, g, state, 1, tc), ContractError);
    CHECK_THROWS_AS(adam_step(p, p, state, 0, tc), ContractError);
}

TEST_CASE("clipping bounds the global norm and skips frozen entries") {
    ParamStore<double> g{{"a", Tensor<double>::row({3, 4})}, {"b", Tensor<double>::row({12})}};
    const FreezeMasks none;
    CHECK(global_norm(g, none) == doctest::Approx(13.0));
    const double before = clip_gradients(g, 1.0, none);
    CHECK(before == doctest::Approx(13.0));
    CHECK(global_norm(g, none) <= 1.0 + 1e-9);
    ParamStore<double> small{{"a", Tensor<double>::row({0.1, 0.2})}};
    const auto copy = small;
    clip_gradients(small, 1.0, none);
    CHECK(small.at("a").bitwise_equal(copy.at("a")));
    ParamStore<double> h{{"a", Tensor<double>::row({3, 100})}};
    FreezeMasks masks{{"a", Tensor<unsigned char>(1, 2, std::vector<unsigned char>{0, 1})}};
    CHECK(global_norm(h, masks) == doctest::Approx(3.0));
}

TEST_CASE("batch offsets are a pure function of seed and step") {
    const auto a = batch_offsets(1, 5, 1000, 65, 8);
    CHECK(a == batch_offsets(1, 5, 1000, 65, 8));
    CHECK(a != batch_offsets(1, 6, 1000, 65, 8));
    for (std::size_t o : a) CHECK(o + 65 <= 1000);
    CHECK_THROWS_AS(batch_offsets(1, 1, 10, 65, 1), InputError);
}

TEST_CASE("training is deterministic for a seed") {
    const Corpus corpus = toy_corpus();
    const Checkpoint start = initial_checkpoint(small_f64(), 1);
    TrainOptions opt;
    opt.config = quick(5);
    const auto a = train<double>(start, corpus, opt);
    const auto b = train<double>(start, corpus, opt);
    CHECK(serialize(a.checkpoint) == serialize(b.checkpoint));
    CHECK(a.checkpoint.step == 5);
}

TEST_CASE("worker count does not change the result") {
    const Corpus corpus = toy_corpus();
    const Checkpoint start = initial_checkpoint(small_f64(), 1);
    TrainOptions one, four;
    one.config = quick(3);
    one.config.batch_size = 4;
    four.config = one.config;
    four.config.threads = 4;
    CHECK(serialize(train<double>(start, corpus, one).checkpoint) ==
          serialize(train<double>(start, corpus, four).checkpoint));
}

TEST_CASE("resuming from a saved checkpoint matches an uninterrupted run") {
    const Corpus corpus = toy_corpus();
    const Checkpoint start = initial_checkpoint(small_f64(), 1);
    TrainOptions full, half;
    full.config = quick(6);
    half.config = quick(3);
    const auto straight = train<double>(start, corpus, full);
    TempDir dir;
    save_checkpoint(train<double>(start, corpus, half).checkpoint, dir.path / "mid.ckpt");
    const Checkpoint mid = load_checkpoint(dir.path / "mid.ckpt");
    CHECK(mid.step == 3);
    CHECK_FALSE(mid.moments<double>(kMomentPrefix).empty());
    const auto resumed = train<double>(mid, corpus, full);
    CHECK(serialize(resumed.checkpoint) == serialize(straight.checkpoint));
}

TEST_CASE("resuming with a different architecture is a checkpoint error") {
    const Checkpoint c = initial_checkpoint(small_f64(), 1);
    CHECK_NOTHROW(check_resume(c, small_f64()));
    ModelConfig other = small_f64();
    other.n_layer = 2;
    CHECK_THROWS_AS(check_resume(c, other.normalized()), CheckpointError);
}

TEST_CASE("evaluation is repeatable and a zero head scores log V") {
    const Corpus corpus = toy_corpus();
    const ModelConfig cfg = small_f64();
    auto params = init_params<double>(cfg, 1);
    const double a = evaluate(params, cfg, corpus.validation, 16);
    CHECK(a == evaluate(params, cfg, corpus.validation, 16));
    params["head"] = Tensor<double>(cfg.d_model, cfg.vocab_size, 0.0);
    CHECK(evaluate(params, cfg, corpus.validation, 16) == doctest::Approx(std::log(257.0)).epsilon(1e-12));
    CHECK_THROWS_AS(evaluate(params, cfg, std::vector<std::size_t>{1}, 16), InputError);
}

TEST_CASE("a short run lowers validation loss") {
    const Corpus corpus = toy_corpus();
    TrainOptions opt;
    opt.config = quick(40);
    opt.config.batch_size = 4;
    opt.config.learning_rate = 1e-2;
    const auto r = train<double>(initial_checkpoint(small_f64(), 1), corpus, opt);
    REQUIRE(r.initial_val_loss.has_value());
    CHECK(r.final_val_loss < *r.initial_val_loss);
}

TEST_CASE("non-finite parameters stop training with an error") {
    const Corpus corpus = toy_corpus();
    Checkpoint c = initial_checkpoint(small_f64(), 1);
    auto params = c.parameters<double>();
    params.at("head")[0] = std::numeric_limits<double>::quiet_NaN();
    c.set_parameters(params);
    c.step = 1; // skip the initial validation pass
    TrainOptions opt;
    opt.config = quick(3);
    CHECK_THROWS_AS(train<double>(c, corpus, opt), TrainingError);
}

TEST_CASE("metrics are appended as one JSON object per step") {
    const Corpus corpus = toy_corpus();
    TempDir dir;
    TrainOptions opt;
    opt.config = quick(4);
    opt.config.eval_every = 2;
    opt.metrics_path = dir.path / "metrics.jsonl";
    train<double>(initial_checkpoint(small_f64(), 1), corpus, opt);
    std::ifstream in(*opt.metrics_path);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        ++n;
        CHECK(j.at("step").get<std::size_t>() == n);
        CHECK(j.contains("loss"));
        CHECK(j.contains("lr"));
        CHECK(j.contains("elapsed"));
        CHECK(j.at("val_loss").is_null() == (n % 2 != 0));
    }
    CHECK(n == 4);
}

TEST_CASE("train config validation") {
    TrainConfig tc;
    CHECK_NOTHROW(tc.validate());
    tc.learning_rate = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = {};
    tc.batch_size = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = {};
    tc.beta1 = 1.0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
}

TEST_CASE("checkpoints round trip bitwise with moments and masks") {
    const auto r = check_checkpoint_roundtrip(preset("tiny"), 4);
    INFO(r.line());
    CHECK(r.passed);
}

TEST_CASE("corrupt checkpoints are rejected") {
    const Checkpoint c = initial_checkpoint(small_f64(), 1);
    auto bytes = serialize(c);
    CHECK(serialize(deserialize(bytes)) == bytes);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(deserialize(bad_magic), CheckpointError);
    auto bad_version = bytes;
    bad_version[7] = '9';
    CHECK_THROWS_AS(deserialize(bad_version), CheckpointError);
    const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 2));
    CHECK_THROWS_AS(deserialize(truncated), CheckpointError);
    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(deserialize(trailing), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/x.ckpt"), CheckpointError);
}

TEST_CASE("thread count comes from the environment") {
    ::unsetenv("METASTATE_THREADS");
    CHECK(threads_from_env() == 1);
    ::setenv("METASTATE_THREADS", "3", 1);
    CHECK(threads_from_env() == 3);
    ::setenv("METASTATE_THREADS", "zero", 1);
    CHECK_THROWS_AS(threads_from_env(), ConfigError);
    ::unsetenv("METASTATE_THREADS");
}

} // TEST_SUITE
