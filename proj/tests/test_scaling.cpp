#include "doctest.h"

#include "metastate/kernels.hpp"
#include "metastate/scaling.hpp"
#include "metastate/train.hpp"
#include "metastate/verify.hpp"
#include "support.hpp"

using namespace metastate;
using namespace testing_support;

namespace {

ModelConfig f64(ModelConfig cfg) {
    cfg.precision = Precision::F64;
    return cfg;
}

ScalePlan plan_for(const ModelConfig& src, std::size_t dim, InitMode init = InitMode::Zeros) {
    ScalePlan p;
    p.source = src;
    p.target_dim = dim;
    p.init = init;
    return p;
}

double max_deviation(const Checkpoint& a, const Checkpoint& b) {
    return verify_function_preservation(a, b, random_sequences(4, 24, a.config.vocab_size, 43)).max_abs_deviation;
}

} // namespace

TEST_SUITE("scaling") {

TEST_CASE("expanding a state pads with zeros and keeps its norm") {
    const auto s = Tensor<double>::from_rows({{1, 2}, {3, 4}});
    const auto e = expand_state(s, 3);
    CHECK(to_vec(e) == std::vector<double>{1, 2, 0, 3, 4, 0, 0, 0, 0});
    CHECK(frobenius_norm(e) == frobenius_norm(s));
    CHECK(expand_state(s, 2).bitwise_equal(s));
    CHECK_THROWS_AS(expand_state(s, 1), ContractError);
}

TEST_CASE("truncated identity encoder on a padded state reproduces the old encoding") {
    Rng rng(41);
    const auto x = random_matrix(1, 2, rng);
    const auto s = random_matrix(2, 2, rng);
    const auto z = scaled_sse_encode(x, truncated_identity<double>(2, 3), expand_state(s, 3));
    const auto old = sse_encode(x, s);
    REQUIRE(z.shape() == Shape{1, 3});
    CHECK(std::abs(z[0] - old[0]) <= 1e-12);
    CHECK(std::abs(z[1] - old[1]) <= 1e-12);
    CHECK(z[2] == 0.0);
}

TEST_CASE("zero input projection encodes to zero") {
    Rng rng(41);
    const auto z = scaled_sse_encode(random_matrix(1, 2, rng), Tensor<double>(2, 4, 0.0), random_matrix(4, 4, rng));
    for (double v : z.values()) CHECK(v == 0.0);
}

TEST_CASE("random input projection matches relu of the composed products") {
    Rng rng(41);
    const auto x = random_matrix(1, 3, rng);
    const auto w_in = random_matrix(3, 5, rng);
    const auto s = random_matrix(5, 5, rng);
    CHECK(max_abs_diff(scaled_sse_encode(x, w_in, s), relu(naive_matmul(naive_matmul(x, w_in), s))) <= 1e-12);
}

TEST_CASE("scaled encoder shape mismatches are dimension errors") {
    CHECK_THROWS_AS(scaled_sse_encode(Tensor<double>(1, 2), Tensor<double>(3, 4), Tensor<double>(4, 4)), DimensionError);
    CHECK_THROWS_AS(scaled_sse_encode(Tensor<double>(1, 2), Tensor<double>(2, 4), Tensor<double>(5, 5)), DimensionError);
}

TEST_CASE("output projection grows per head with the old block in place") {
    ModelConfig src;
    src.d_model = 16;
    src.n_head = 4;
    src.n_layer = 1;
    src = src.normalized();
    Rng rng(1);
    const auto w = random_matrix(4, 16, rng);
    Rng fill(2);
    const auto grown = extend_output_projection(w, plan_for(src, 24), fill);
    REQUIRE(grown.shape() == Shape{6, 24});
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t c = 0; c < 24; ++c) {
            if (r < 4 && c < 16) CHECK(grown(r, c) == w(r, c));
            else CHECK(grown(r, c) == 0.0);
        }
    // [y | 0] W' = [y W | 0]
    const auto y = random_matrix(1, 4, rng);
    Tensor<double> padded(1, 6, 0.0);
    for (std::size_t i = 0; i < 4; ++i) padded[i] = y[i];
    const auto before = naive_matmul(y, w);
    const auto after = naive_matmul(padded, grown);
    for (std::size_t c = 0; c < 24; ++c) CHECK(after[c] == (c < 16 ? before[c] : 0.0));

    Rng fill2(3);
    const auto random = extend_output_projection(w, plan_for(src, 24, InitMode::Uniform), fill2);
    bool any = false;
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t c = 0; c < 24; ++c) {
            if (r < 4 && c < 16) continue;
            CHECK(std::abs(random(r, c)) <= 0.02);
            any = any || random(r, c) != 0.0;
        }
    CHECK(any);
    CHECK_THROWS_AS(extend_output_projection(Tensor<double>(3, 16), plan_for(src, 24), fill2), DimensionError);
}

TEST_CASE("scale plans reject shrinking, head changes and indivisible widths") {
    const ModelConfig src = preset("tiny");
    CHECK_THROWS_AS(plan_for(src, 32).validate(), ConfigError);
    CHECK_THROWS_AS(plan_for(src, 66).validate(), ConfigError);
    auto heads = plan_for(src, 96);
    heads.target_heads = 8;
    CHECK_THROWS_AS(heads.validate(), ConfigError);
    auto scale = plan_for(src, 96, InitMode::Uniform);
    scale.init_scale = 0.0;
    CHECK_THROWS_AS(scale.validate(), ConfigError);
    CHECK_NOTHROW(plan_for(src, 96).validate());
    CHECK(plan_for(src, 64).is_identity());
}

TEST_CASE("identity plan returns the checkpoint unchanged") {
    const Checkpoint c = initial_checkpoint(f64(preset("tiny")), 1);
    const Checkpoint s = scale_checkpoint(c, plan_for(c.config, 64), 0);
    CHECK(serialize(s) == serialize(c));
    CHECK(s.freeze_masks().empty());
    CHECK(max_deviation(c, s) == 0.0);
}

TEST_CASE("widening tiny to 96 gives the closed-form parameter count and masks") {
    const Checkpoint c = initial_checkpoint(f64(preset("tiny")), 1);
    const ScalePlan plan = plan_for(c.config, 96);
    const Checkpoint s = scale_checkpoint(c, plan, 0);
    const ModelConfig t = plan.target();
    CHECK(s.config.d_model == 96);
    CHECK(s.config.has_input_projection());
    const std::size_t v = t.vocab_size, d = 96, l = t.n_layer;
    const std::size_t w_in = l * t.n_head * t.sse_input_dim * t.head_dim();
    CHECK(parameter_count(t) == 2 * v * d + 2 * d + l * (8 * d * d + 11 * d) + w_in);
    CHECK(parameter_count(t) == 202176);
    std::size_t stored = 0;
    for (const auto& [name, p] : s.parameters<double>()) stored += p.size();
    CHECK(stored == parameter_count(t));

    const auto masks = s.freeze_masks();
    const auto old = c.parameters<double>();
    for (const auto& [name, m] : masks) {
        std::size_t ones = 0;
        for (unsigned char b : m.values()) ones += b;
        INFO(name);
        if (name.ends_with("meta_state.w_in")) CHECK(ones == 0);
        else CHECK(ones == old.at(name).size());
    }
}

TEST_CASE("a checkpoint that does not match the plan source is rejected") {
    const Checkpoint c = initial_checkpoint(f64(preset("tiny")), 1);
    CHECK_THROWS_AS(scale_checkpoint(c, plan_for(f64(preset("mini")), 256), 0), CheckpointError);
}

TEST_CASE("zero-initialized widening preserves the function") {
    const auto r = check_function_preservation(f64(preset("tiny")), 96, 1, 10, 32, 43);
    INFO(r.line());
    CHECK(r.passed);
    CHECK(r.measured <= 1e-6);
}

TEST_CASE("f32 checkpoints keep their dtype and still preserve the function") {
    const Checkpoint c = initial_checkpoint(preset("tiny"), 2);
    const Checkpoint s = scale_checkpoint(c, plan_for(c.config, 80), 0);
    CHECK(s.config.precision == Precision::F32);
    CHECK(s.tensors.at("head").dtype == DType::F32);
    CHECK(max_deviation(c, s) <= 1e-6);
}

TEST_CASE("two successive widenings preserve the function") {
    const Checkpoint c = initial_checkpoint(f64(preset("tiny")), 3);
    const Checkpoint mid = scale_checkpoint(c, plan_for(c.config, 96), 0);
    const Checkpoint top = scale_checkpoint(mid, plan_for(mid.config, 128), 0);
    CHECK(top.config.d_model == 128);
    CHECK(max_deviation(c, top) <= 1e-6);
    CHECK(max_deviation(mid, top) <= 1e-6);
    // Only entries that existed before the second widening stay frozen.
    const auto m = top.freeze_masks().at("layer.0.meta_state.w_in");
    std::size_t ones = 0;
    for (unsigned char b : m.values()) ones += b;
    CHECK(ones == mid.tensors.at("layer.0.meta_state.w_in").values.size());
}

TEST_CASE("random initialization of new entries breaks preservation") {
    const Checkpoint c = initial_checkpoint(f64(preset("tiny")), 1);
    const Checkpoint s = scale_checkpoint(c, plan_for(c.config, 96, InitMode::Uniform), 0);
    const auto report = verify_function_preservation(c, s, random_sequences(10, 32, c.config.vocab_size, 43));
    CHECK(report.max_abs_deviation > 1e-6);
    CHECK_FALSE(report.pass());
    CHECK(report.str().find("FAIL") != std::string::npos);
}

TEST_CASE("a random input projection breaks preservation") {
    const Checkpoint c = initial_checkpoint(f64(preset("tiny")), 1);
    auto plan = plan_for(c.config, 96);
    plan.projection = ProjectionMode::Random;
    CHECK(max_deviation(c, scale_checkpoint(c, plan, 0)) > 1e-6);
}

TEST_CASE("comparing against a smaller vocabulary is a contract error") {
    const Checkpoint c = initial_checkpoint(f64(preset("tiny")), 1);
    ModelConfig small = f64(preset("tiny"));
    small.vocab_size = 100;
    const Checkpoint d = initial_checkpoint(small, 1);
    CHECK_THROWS_AS(verify_function_preservation(c, d, random_sequences(1, 4, 100, 0)), ContractError);
}

TEST_CASE("unfrozen time mixing clears its masks") {
    const Checkpoint c = initial_checkpoint(f64(preset("tiny")), 1);
    auto plan = plan_for(c.config, 96);
    plan.freeze_time_mix = false;
    const auto masks = scale_checkpoint(c, plan, 0).freeze_masks();
    for (const auto& [name, m] : masks) {
        if (name.find("time_mix.") == std::string::npos) continue;
        for (unsigned char b : m.values()) CHECK(b == 0);
    }
    CHECK(masks.at("head")(0, 0) == 1);
}

TEST_CASE("mode names parse both ways") {
    CHECK(parse_init_mode("zeros") == InitMode::Zeros);
    CHECK(parse_init_mode("random") == InitMode::Uniform);
    CHECK(to_string(InitMode::Uniform) == "random");
    CHECK(parse_projection_mode("identity") == ProjectionMode::TruncatedIdentity);
    CHECK_THROWS_AS(parse_init_mode("ones"), ConfigError);
    CHECK_THROWS_AS(parse_projection_mode("eye"), ConfigError);
}

} // TEST_SUITE
