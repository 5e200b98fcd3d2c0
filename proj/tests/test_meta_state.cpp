#include <array>

#include "doctest.h"

#include "metastate/kernels.hpp"
#include "metastate/model.hpp"
#include "metastate/verify.hpp"
#include "support.hpp"

using namespace metastate;
using namespace testing_support;

namespace {

ModelConfig ms_config(std::size_t d, std::size_t h) {
    ModelConfig cfg;
    cfg.vocab_size = 11;
    cfg.d_model = d;
    cfg.n_head = h;
    cfg.n_layer = 1;
    cfg.precision = Precision::F64;
    return cfg.normalized();
}

MetaStateParams<double> random_params(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t hn = cfg.n_head * cfg.head_dim();
    return {random_matrix(hn, cfg.d_model, rng), {random_matrix(1, hn, rng, 0.5, 1.5), random_matrix(1, hn, rng), 1e-5}, {}};
}

TransitionTerms<double> random_terms(std::size_t n, Rng& rng) {
    std::vector<double> w(n), a(n), kappa(n);
    double norm = 0;
    for (std::size_t i = 0; i < n; ++i) {
        w[i] = kernels::decay(uniform(rng, -2, 2));
        a[i] = kernels::sigmoid(uniform(rng, -2, 2));
        kappa[i] = uniform(rng, -1, 1);
        norm += kappa[i] * kappa[i];
    }
    for (double& x : kappa) x /= std::sqrt(norm);
    return {w, kappa, a, std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
}

Tensor<double> explicit_transition(const TransitionTerms<double>& t) {
    const std::size_t n = t.dim();
    Tensor<double> m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            m(i, j) = (i == j ? t.decay[i] : 0.0) - t.removal_key[i] * t.learning_rate[j] * t.removal_key[j];
    return m;
}

Tensor<double> block(const Tensor<double>& m, std::size_t r0, std::size_t rows) {
    return Tensor<double>(rows, m.cols(), std::vector<double>(m.data() + r0 * m.cols(), m.data() + (r0 + rows) * m.cols()));
}

Tensor<double> slice(const Tensor<double>& row, std::size_t off, std::size_t n) {
    return Tensor<double>(1, n, std::vector<double>(row.data() + off, row.data() + off + n));
}

} // namespace

TEST_SUITE("meta-state") {

TEST_CASE("encoding with a zero state is zero") {
    const auto z = sse_encode(Tensor<double>::row({1, -2, 3}), Tensor<double>(3, 3, 0.0));
    CHECK(to_vec(z) == std::vector<double>{0, 0, 0});
}

TEST_CASE("encoding with the identity state is relu of the input") {
    const auto z = sse_encode(Tensor<double>::row({-1, 2}), Tensor<double>::identity(2));
    CHECK(to_vec(z) == std::vector<double>{0, 2});
}

TEST_CASE("encoding matches relu of a matmul") {
    Rng rng(17);
    const auto x = random_matrix(1, 4, rng);
    const auto s = random_matrix(4, 4, rng);
    CHECK(max_abs_diff(sse_encode(x, s), relu(naive_matmul(x, s))) <= 1e-12);
}

TEST_CASE("encoding shape mismatch is a dimension error") {
    CHECK_THROWS_AS(sse_encode(Tensor<double>(1, 3), Tensor<double>(4, 4)), DimensionError);
    CHECK_THROWS_AS(sse_encode(Tensor<double>(1, 3), Tensor<double>(3, 4)), DimensionError);
}

TEST_CASE("encoder invariants hold on random draws") {
    const auto r = check_encoder_properties(100, 0);
    INFO(r.line());
    CHECK(r.passed);
}

TEST_CASE("meta update from zero is the symmetric positive semidefinite z^T z") {
    Rng rng(5);
    const auto t = random_terms(4, rng);
    const auto z = relu(random_matrix(1, 4, rng, -0.5, 1));
    const auto ms = meta_state_step(Tensor<double>(4, 4, 0.0), t, z);
    CHECK(max_abs_diff(ms, outer(to_vec(z), to_vec(z))) <= 1e-15);
    CHECK(max_abs_diff(ms, transpose(ms)) == 0.0);
    for (int trial = 0; trial < 50; ++trial) {
        const auto q = random_matrix(1, 4, rng);
        const auto qmq = naive_matmul(naive_matmul(q, ms), transpose(q));
        CHECK(qmq[0] >= -1e-12);
    }
}

TEST_CASE("meta update with a zero encoding applies the transition alone") {
    Rng rng(6);
    const auto t = random_terms(3, rng);
    const auto prev = random_matrix(3, 3, rng);
    CHECK(max_abs_diff(meta_state_step(prev, t, Tensor<double>(1, 3, 0.0)), naive_matmul(prev, explicit_transition(t))) <=
          1e-15);
}

TEST_CASE("eight meta updates match the unrolled sum") {
    Rng rng(23);
    const std::size_t n = 4, steps = 8;
    std::vector<TransitionTerms<double>> ts;
    std::vector<Tensor<double>> zs;
    Tensor<double> ms(n, n, 0.0);
    for (std::size_t t = 0; t < steps; ++t) {
        ts.push_back(random_terms(n, rng));
        zs.push_back(relu(random_matrix(1, n, rng)));
        ms = meta_state_step(ms, ts.back(), zs.back());
    }
    Tensor<double> expect(n, n, 0.0);
    for (std::size_t i = 0; i < steps; ++i) {
        Tensor<double> term = outer(to_vec(zs[i]), to_vec(zs[i]));
        for (std::size_t j = i + 1; j < steps; ++j) term = naive_matmul(term, explicit_transition(ts[j]));
        expect = add(expect, term);
    }
    CHECK(max_abs_diff(ms, expect) <= 1e-10);
}

TEST_CASE("head output with a zero meta state is beta times the head projection") {
    const ModelConfig cfg = ms_config(6, 2);
    const auto p = random_params(cfg, 29);
    for (std::size_t h = 0; h < 2; ++h) {
        const auto out = meta_state_output(Tensor<double>::row({1, 2, 3}), Tensor<double>(3, 3, 0.0), p, h, cfg);
        CHECK(max_abs_diff(out, naive_matmul(slice(p.norm.beta, 3 * h, 3), block(p.w_out, 3 * h, 3))) <= 1e-15);
    }
}

TEST_CASE("head output matches layer norm of z ms^T times the projection") {
    const ModelConfig cfg = ms_config(8, 2);
    const auto p = random_params(cfg, 29);
    Rng rng(29);
    const auto z = relu(random_matrix(1, 4, rng));
    const auto ms = random_matrix(4, 4, rng);
    const auto u = naive_matmul(z, transpose(ms));
    const auto expect = naive_matmul(
        naive_layer_norm(u, to_vec(slice(p.norm.gamma, 4, 4)), to_vec(slice(p.norm.beta, 4, 4))), block(p.w_out, 4, 4));
    CHECK(max_abs_diff(meta_state_output(z, ms, p, 1, cfg), expect) <= 1e-12);
}

TEST_CASE("head output is scale invariant in the encoding") {
    const ModelConfig cfg = ms_config(3, 1);
    MetaStateParams<double> p{Tensor<double>::identity(3), NormParams<double>::identity(3), {}};
    const auto z = Tensor<double>::row({3, 6, 1.5});
    // Rank-one meta state built from z itself, so u scales with c^3.
    const auto ms = outer(to_vec(z), to_vec(z));
    const auto base = meta_state_output(z, ms, p, 0, cfg);
    for (double c : {0.5, 3.0}) {
        const auto zc = Tensor<double>::row({3 * c, 6 * c, 1.5 * c});
        const auto msc = outer(to_vec(zc), to_vec(zc));
        CHECK(max_abs_diff(meta_state_output(zc, msc, p, 0, cfg), base) <= 1e-6);
        // Exact form: shrinking the input by c^3 is the same as eps / c^6.
        auto pe = p;
        pe.norm.eps = 1e-5 / std::pow(c, 6);
        CHECK(max_abs_diff(meta_state_output(zc, msc, p, 0, cfg), meta_state_output(z, ms, pe, 0, cfg)) <= 1e-12);
    }
}

TEST_CASE("layer with every state at zero outputs the summed head betas") {
    const ModelConfig cfg = ms_config(8, 2);
    const auto p = random_params(cfg, 31);
    Rng rng(31);
    const std::vector<Tensor<double>> zero(2, Tensor<double>(4, 4, 0.0));
    const std::vector<TransitionTerms<double>> terms{random_terms(4, rng), random_terms(4, rng)};
    const auto out = meta_state_layer(random_matrix(1, 8, rng), zero, zero, terms, p, cfg);
    CHECK(max_abs_diff(out.output, naive_matmul(p.norm.beta, p.w_out)) <= 1e-14);
}

TEST_CASE("single head layer is encode, update and read out in sequence") {
    const ModelConfig cfg = ms_config(4, 1);
    const auto p = random_params(cfg, 37);
    Rng rng(37);
    const auto x = random_matrix(1, 4, rng);
    const std::vector<Tensor<double>> wkv{random_matrix(4, 4, rng)};
    const std::vector<Tensor<double>> ms{random_matrix(4, 4, rng)};
    const std::vector<TransitionTerms<double>> terms{random_terms(4, rng)};
    const auto got = meta_state_layer(x, wkv, ms, terms, p, cfg);
    const auto z = sse_encode(x, wkv[0]);
    const auto next = meta_state_step(ms[0], terms[0], z);
    CHECK(got.states[0].bitwise_equal(next));
    CHECK(max_abs_diff(got.output, meta_state_output(z, next, p, 0, cfg)) <= 1e-15);
}

TEST_CASE("two head layer matches a per-head loop oracle") {
    const ModelConfig cfg = ms_config(8, 2);
    const auto p = random_params(cfg, 31);
    Rng rng(31);
    const auto x = random_matrix(1, 8, rng);
    std::vector<Tensor<double>> wkv, ms;
    std::vector<TransitionTerms<double>> terms;
    for (int h = 0; h < 2; ++h) {
        wkv.push_back(random_matrix(4, 4, rng));
        ms.push_back(random_matrix(4, 4, rng));
        terms.push_back(random_terms(4, rng));
    }
    const auto got = meta_state_layer(x, wkv, ms, terms, p, cfg);
    Tensor<double> expect(1, 8, 0.0);
    for (std::size_t h = 0; h < 2; ++h) {
        const auto z = relu(naive_matmul(slice(x, 4 * h, 4), wkv[h]));
        const auto next = add(naive_matmul(ms[h], explicit_transition(terms[h])), outer(to_vec(z), to_vec(z)));
        CHECK(max_abs_diff(got.states[h], next) <= 1e-12);
        const auto u = naive_matmul(z, transpose(next));
        const auto un = naive_layer_norm(u, to_vec(slice(p.norm.gamma, 4 * h, 4)), to_vec(slice(p.norm.beta, 4 * h, 4)));
        expect = add(expect, naive_matmul(un, block(p.w_out, 4 * h, 4)));
    }
    CHECK(max_abs_diff(got.output, expect) <= 1e-12);
}

TEST_CASE("the layer registers only its readout tensors") {
    const ModelConfig cfg = ms_config(8, 2);
    CHECK(meta_state_parameter_names(cfg) == std::vector<std::string>{"norm.beta", "norm.gamma", "w_out"});
    const auto r = check_parameter_audit(preset("tiny"));
    INFO(r.line());
    CHECK(r.passed);
}

namespace {

struct LayerRun {
    ad::Tape<double> tape;
    ad::Var<double> x, wkv, w_out, gamma, beta, loss;
};

// x: T x D, wkv: T x (H n^2); transition terms are fixed constants.
void run_layer(LayerRun& r, const Tensor<double>& x, const Tensor<double>& wkv, const MetaStateParams<double>& p,
               const std::array<Tensor<double>, 3>& terms, const Tensor<double>& weights, const ModelConfig& cfg) {
    r.x = r.tape.parameter(x);
    r.wkv = r.tape.parameter(wkv);
    r.w_out = r.tape.parameter(p.w_out);
    r.gamma = r.tape.parameter(p.norm.gamma);
    r.beta = r.tape.parameter(p.norm.beta);
    const std::size_t n = cfg.head_dim();
    const auto trace = meta_state_sequence(r.x, r.wkv, r.tape.constant(terms[0]), r.tape.constant(terms[1]),
                                           r.tape.constant(terms[2]), r.tape.constant(Tensor<double>(1, cfg.n_head * n * n)),
                                           MetaStateVars<double>{r.w_out, r.gamma, r.beta, {}}, cfg);
    r.loss = ad::sum(ad::mul(trace.output, r.tape.constant(weights)));
}

} // namespace

TEST_CASE("layer gradients over four steps agree with central differences") {
    const ModelConfig cfg = ms_config(4, 2);
    const std::size_t steps = 4, n = 2;
    const auto p = random_params(cfg, 41);
    Rng rng(41);
    const auto x = random_matrix(steps, 4, rng);
    const auto wkv = random_matrix(steps, 2 * n * n, rng);
    std::array<Tensor<double>, 3> terms{Tensor<double>(steps, 4), Tensor<double>(steps, 4), Tensor<double>(steps, 4)};
    for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t h = 0; h < 2; ++h) {
            const auto tt = random_terms(n, rng);
            for (std::size_t i = 0; i < n; ++i) {
                terms[0](t, h * n + i) = tt.decay[i];
                terms[1](t, h * n + i) = tt.removal_key[i];
                terms[2](t, h * n + i) = tt.learning_rate[i];
            }
        }
    const auto weights = random_matrix(steps, 4, rng);
    LayerRun run;
    run_layer(run, x, wkv, p, terms, weights, cfg);
    const auto grads = run.tape.backward(run.loss);

    const auto loss_of = [&](const Tensor<double>& xv, const Tensor<double>& wv, const MetaStateParams<double>& pv) {
        LayerRun r;
        run_layer(r, xv, wv, pv, terms, weights, cfg);
        return r.loss.value()[0];
    };
    CHECK(fd_check(x, grads.of(run.x), [&](const Tensor<double>& v) { return loss_of(v, wkv, p); }, 1e-5, 1e-6) <= 1e-4);
    CHECK(fd_check(wkv, grads.of(run.wkv), [&](const Tensor<double>& v) { return loss_of(x, v, p); }, 1e-5, 1e-6) <= 1e-4);
    CHECK(fd_check(p.w_out, grads.of(run.w_out),
                   [&](const Tensor<double>& v) {
                       auto q = p;
                       q.w_out = v;
                       return loss_of(x, wkv, q);
                   },
                   1e-5, 1e-6) <= 1e-4);
    CHECK(fd_check(p.norm.gamma, grads.of(run.gamma),
                   [&](const Tensor<double>& v) {
                       auto q = p;
                       q.norm.gamma = v;
                       return loss_of(x, wkv, q);
                   },
                   1e-5, 1e-6) <= 1e-4);
}

TEST_CASE("tape sequence matches the step-by-step layer") {
    const ModelConfig cfg = ms_config(4, 2);
    const std::size_t steps = 5, n = 2;
    const auto p = random_params(cfg, 43);
    Rng rng(43);
    const auto x = random_matrix(steps, 4, rng);
    const auto wkv = random_matrix(steps, 2 * n * n, rng);
    std::array<Tensor<double>, 3> terms{Tensor<double>(steps, 4), Tensor<double>(steps, 4), Tensor<double>(steps, 4)};
    std::vector<std::vector<TransitionTerms<double>>> per_step(steps);
    for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t h = 0; h < 2; ++h) {
            per_step[t].push_back(random_terms(n, rng));
            for (std::size_t i = 0; i < n; ++i) {
                terms[0](t, h * n + i) = per_step[t][h].decay[i];
                terms[1](t, h * n + i) = per_step[t][h].removal_key[i];
                terms[2](t, h * n + i) = per_step[t][h].learning_rate[i];
            }
        }
    LayerRun run;
    run_layer(run, x, wkv, p, terms, Tensor<double>(steps, 4, 1.0), cfg);
    std::vector<Tensor<double>> ms(2, Tensor<double>(n, n, 0.0));
    double total = 0;
    for (std::size_t t = 0; t < steps; ++t) {
        std::vector<Tensor<double>> w;
        for (std::size_t h = 0; h < 2; ++h) w.push_back(Tensor<double>(n, n, std::vector<double>(wkv.data() + t * 8 + h * 4, wkv.data() + t * 8 + h * 4 + 4)));
        const auto out = meta_state_layer(slice(x, t * 4, 4), w, ms, per_step[t], p, cfg);
        ms = out.states;
        for (double v : out.output.values()) total += v;
    }
    CHECK(run.loss.value()[0] == doctest::Approx(total).epsilon(1e-12));
}

} // TEST_SUITE
