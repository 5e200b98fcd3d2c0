#include "metastate/scaling.hpp"

#include <cmath>
#include <functional>
#include <sstream>

#include "metastate/kernels.hpp"

namespace metastate {

InitMode parse_init_mode(const std::string& s) {
    if (s == "zeros") return InitMode::Zeros;
    if (s == "random" || s == "uniform") return InitMode::Uniform;
    throw ConfigError("unknown init mode '" + s + "' (expected zeros or random)");
}

std::string to_string(InitMode m) { return m == InitMode::Zeros ? "zeros" : "random"; }

ProjectionMode parse_projection_mode(const std::string& s) {
    if (s == "identity" || s == "truncated-identity") return ProjectionMode::TruncatedIdentity;
    if (s == "random") return ProjectionMode::Random;
    throw ConfigError("unknown projection mode '" + s + "' (expected identity or random)");
}

std::string to_string(ProjectionMode m) { return m == ProjectionMode::TruncatedIdentity ? "identity" : "random"; }

void ScalePlan::validate() const {
    const ModelConfig src = source.normalized();
    src.validate();
    const std::size_t heads = target_heads == 0 ? src.n_head : target_heads;
    if (target_dim < src.d_model) {
        throw ConfigError("scale plan shrinks d_model from " + std::to_string(src.d_model) + " to " +
                          std::to_string(target_dim));
    }
    if (heads != src.n_head) {
        throw ConfigError("scale plan must keep the head count (" + std::to_string(src.n_head) + "), got " +
                          std::to_string(heads));
    }
    if (target_dim % heads != 0) {
        throw ConfigError("target d_model " + std::to_string(target_dim) + " is not divisible by " +
                          std::to_string(heads) + " heads");
    }
    if (init == InitMode::Uniform && !(init_scale > 0.0)) throw ConfigError("init scale must be positive");
}

bool ScalePlan::is_identity() const { return target_dim == source.d_model; }

ModelConfig ScalePlan::target() const {
    validate();
    ModelConfig t = source.normalized();
    if (is_identity()) return t;
    const std::size_t n0 = t.head_dim();
    t.d_model = target_dim;
    t.preset.clear();
    t.residual_segments.push_back(target_dim - source.d_model);
    if (t.head_dim() > n0) t.head_segments.push_back(t.head_dim() - n0);
    t.validate();
    return t;
}

template <typename T>
Tensor<T> expand_state(const Tensor<T>& s, std::size_t new_dim) {
    if (s.rows() != s.cols()) throw DimensionError(dimension_message("expand_state", s.shape(), s.shape()));
    if (new_dim < s.rows()) {
        throw ContractError("expand_state: cannot shrink from " + std::to_string(s.rows()) + " to " +
                            std::to_string(new_dim));
    }
    Tensor<T> out(new_dim, new_dim);
    for (std::size_t i = 0; i < s.rows(); ++i) {
        std::copy_n(s.data() + i * s.cols(), s.cols(), out.data() + i * new_dim);
    }
    return out;
}

template <typename T>
Tensor<T> truncated_identity(std::size_t rows, std::size_t cols) {
    Tensor<T> out(rows, cols);
    for (std::size_t i = 0; i < std::min(rows, cols); ++i) out(i, i) = T(1);
    return out;
}

template <typename T>
Tensor<T> scaled_sse_encode(const Tensor<T>& x_head_orig, const Tensor<T>& w_in, const Tensor<T>& wkv_scaled) {
    if (x_head_orig.rows() != 1 || x_head_orig.cols() != w_in.rows()) {
        throw DimensionError(dimension_message("scaled_sse_encode", x_head_orig.shape(), w_in.shape()));
    }
    if (wkv_scaled.rows() != w_in.cols()) {
        throw DimensionError(dimension_message("scaled_sse_encode", w_in.shape(), wkv_scaled.shape()));
    }
    return sse_encode(kernels::matmul(x_head_orig, w_in), wkv_scaled);
}

namespace {

using IndexMap = std::function<std::size_t(std::size_t)>;

struct Axis {
    std::size_t old_size;
    std::size_t new_size;
    IndexMap map;
};

Axis identity_axis(std::size_t n_old, std::size_t n_new) {
    return {n_old, n_new, [](std::size_t i) { return i; }};
}

// Per-head blocks: component o of head j moves from j n0 + o to j n1 + o.
Axis head_axis(std::size_t heads, std::size_t n0, std::size_t n1) {
    return {heads * n0, heads * n1, [n0, n1](std::size_t i) { return (i / n0) * n1 + i % n0; }};
}

struct Embedded {
    std::vector<double> values;
    std::vector<double> mask;
};

Embedded embed(const StoredTensor& old, const Axis& rows, const Axis& cols, const std::function<double()>& fill) {
    if (old.rows != rows.old_size || old.cols != cols.old_size) {
        throw CheckpointError("tensor shape " + Shape{old.rows, old.cols}.str() + " does not match the plan source");
    }
    Embedded e{std::vector<double>(rows.new_size * cols.new_size), std::vector<double>(rows.new_size * cols.new_size)};
    for (auto& v : e.values) v = fill();
    for (std::size_t r = 0; r < old.rows; ++r) {
        const std::size_t nr = rows.map(r);
        for (std::size_t c = 0; c < old.cols; ++c) {
            const std::size_t idx = nr * cols.new_size + cols.map(c);
            e.values[idx] = old.values[r * old.cols + c];
            e.mask[idx] = 1.0;
        }
    }
    return e;
}

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool contains(const std::string& s, std::string_view part) { return s.find(part) != std::string::npos; }

bool same_architecture(const ModelConfig& a, const ModelConfig& b) {
    return a.vocab_size == b.vocab_size && a.d_model == b.d_model && a.n_head == b.n_head &&
           a.n_layer == b.n_layer && a.residual_segments == b.residual_segments &&
           a.head_segments == b.head_segments && a.sse_input_dim == b.sse_input_dim;
}

} // namespace

template <typename T>
Tensor<T> extend_output_projection(const Tensor<T>& w_o, const ScalePlan& plan, Rng& rng) {
    const ModelConfig src = plan.source.normalized();
    const ModelConfig dst = plan.target();
    if (w_o.shape() != Shape{src.head_dim(), src.d_model}) {
        throw DimensionError(dimension_message("extend_output_projection", w_o.shape(),
                                               Shape{src.head_dim(), src.d_model}));
    }
    StoredTensor old{DType::F64, w_o.rows(), w_o.cols(), std::vector<double>(w_o.values().begin(), w_o.values().end())};
    const double s = plan.init_scale;
    const auto fill = [&]() { return plan.init == InitMode::Zeros ? 0.0 : uniform(rng, -s, s); };
    const Embedded e = embed(old, identity_axis(src.head_dim(), dst.head_dim()), identity_axis(src.d_model, dst.d_model), fill);
    std::vector<T> values(e.values.begin(), e.values.end());
    return Tensor<T>(dst.head_dim(), dst.d_model, std::move(values));
}

Checkpoint scale_checkpoint(const Checkpoint& in, const ScalePlan& plan, std::uint64_t seed) {
    plan.validate();
    const ModelConfig src = in.config.normalized();
    if (!same_architecture(src, plan.source.normalized())) {
        throw CheckpointError("checkpoint config does not match the scale plan source");
    }
    if (plan.is_identity()) return in;

    const ModelConfig dst = plan.target();
    const std::size_t h = src.n_head;
    const std::size_t n0 = src.head_dim();
    const std::size_t n1 = dst.head_dim();
    const Axis one = identity_axis(1, 1);
    const Axis vocab = identity_axis(src.vocab_size, dst.vocab_size);
    const Axis residual = identity_axis(src.d_model, dst.d_model);
    const Axis heads = head_axis(h, n0, n1);

    Checkpoint out;
    out.config = dst;
    out.config.precision = src.precision;
    out.step = 0;
    FreezeMasks masks;

    for (const auto& [name, shape] : parameter_shapes(dst)) {
        Rng rng(derive_seed(seed, name));
        const double s = plan.init_scale;
        const auto random_or_zero = [&]() { return plan.init == InitMode::Zeros ? 0.0 : uniform(rng, -s, s); };
        const auto constant = [](double c) { return [c]() { return c; }; };

        Embedded e;
        DType dtype = src.precision == Precision::F32 ? DType::F32 : DType::F64;
        const auto it = in.tensors.find(name);
        if (ends_with(name, "meta_state.w_in") && it == in.tensors.end()) {
            // First widening: the encoder keeps reading the original per-head slice.
            e.values.assign(shape.size(), 0.0);
            e.mask.assign(shape.size(), 0.0);
            const double a = std::sqrt(1.0 / static_cast<double>(n0));
            for (std::size_t j = 0; j < h; ++j) {
                for (std::size_t r = 0; r < n0; ++r) {
                    for (std::size_t c = 0; c < n1; ++c) {
                        double& v = e.values[(j * n0 + r) * n1 + c];
                        v = plan.projection == ProjectionMode::TruncatedIdentity ? (r == c ? 1.0 : 0.0)
                                                                                  : uniform(rng, -a, a);
                    }
                }
            }
        } else {
            if (it == in.tensors.end()) throw CheckpointError("checkpoint is missing '" + name + "'");
            const StoredTensor& old = it->second;
            dtype = old.dtype;
            if (name == "embedding") {
                e = embed(old, vocab, residual, random_or_zero);
            } else if (name == "head") {
                e = embed(old, residual, vocab, random_or_zero);
            } else if (ends_with(name, "meta_state.w_in")) {
                e = embed(old, identity_axis(old.rows, shape.rows), identity_axis(n0, n1), random_or_zero);
            } else if (ends_with(name, "time_mix.w_out") || ends_with(name, "meta_state.w_out")) {
                e = embed(old, heads, residual, random_or_zero);
            } else if (contains(name, "time_mix.w_")) {
                e = embed(old, residual, heads, random_or_zero);
            } else if (contains(name, "time_mix.norm.") || contains(name, "meta_state.norm.") ||
                       ends_with(name, "b_decay") || ends_with(name, "b_lr")) {
                // New decay/rate biases at 0 give w = exp(-1) and a = 0.5.
                e = embed(old, one, heads, constant(ends_with(name, ".gamma") ? 1.0 : 0.0));
            } else if (ends_with(name, ".mu")) {
                e = embed(old, one, residual, constant(0.5));
            } else if (ends_with(name, ".gamma") || ends_with(name, ".beta")) {
                e = embed(old, one, residual, constant(ends_with(name, ".gamma") ? 1.0 : 0.0));
            } else {
                throw CheckpointError("no scaling rule for tensor '" + name + "'");
            }
        }
        if (!plan.freeze_time_mix && contains(name, "time_mix.")) std::fill(e.mask.begin(), e.mask.end(), 0.0);

        out.tensors[name] = StoredTensor{dtype, shape.rows, shape.cols, std::move(e.values)};
        std::vector<unsigned char> m(e.mask.begin(), e.mask.end());
        masks.emplace(name, Tensor<unsigned char>(shape.rows, shape.cols, std::move(m)));
    }
    out.set_freeze_masks(masks);
    return out;
}

std::string PreservationReport::str() const {
    std::ostringstream os;
    os << "max |logit deviation| = " << max_abs_deviation << " over " << sequences << " sequences (" << positions
       << " positions), tolerance " << tolerance << ": " << (pass() ? "PASS" : "FAIL");
    return os.str();
}

PreservationReport verify_function_preservation(const Checkpoint& old_ckpt, const Checkpoint& new_ckpt,
                                                const std::vector<std::vector<std::size_t>>& sequences,
                                                double tolerance) {
    const std::size_t vocab = old_ckpt.config.vocab_size;
    if (new_ckpt.config.vocab_size < vocab) {
        throw ContractError("verify_function_preservation: scaled model has a smaller vocabulary (" +
                            std::to_string(new_ckpt.config.vocab_size) + " < " + std::to_string(vocab) + ")");
    }
    const Model<double> before(old_ckpt.config, old_ckpt.parameters<double>());
    const Model<double> after(new_ckpt.config, new_ckpt.parameters<double>());
    PreservationReport report;
    report.tolerance = tolerance;
    for (const auto& seq : sequences) {
        const Tensor<double> a = before.forward(seq).logits;
        const Tensor<double> b = after.forward(seq).logits;
        for (std::size_t t = 0; t < seq.size(); ++t) {
            for (std::size_t v = 0; v < vocab; ++v) {
                report.max_abs_deviation = std::max(report.max_abs_deviation, std::abs(a(t, v) - b(t, v)));
            }
        }
        ++report.sequences;
        report.positions += seq.size();
    }
    return report;
}

std::vector<std::vector<std::size_t>> random_sequences(std::size_t count, std::size_t length, std::size_t vocab,
                                                       std::uint64_t seed) {
    Rng rng(derive_seed(seed, "sequences"));
    std::vector<std::vector<std::size_t>> out(count, std::vector<std::size_t>(length));
    for (auto& seq : out) {
        for (auto& t : seq) t = static_cast<std::size_t>(rng() % vocab);
    }
    return out;
}

#define METASTATE_INSTANTIATE(T)                                                                        \
    template Tensor<T> expand_state(const Tensor<T>&, std::size_t);                                     \
    template Tensor<T> truncated_identity(std::size_t, std::size_t);                                    \
    template Tensor<T> scaled_sse_encode(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
    template Tensor<T> extend_output_projection(const Tensor<T>&, const ScalePlan&, Rng&);

METASTATE_INSTANTIATE(float)
METASTATE_INSTANTIATE(double)

} // namespace metastate
