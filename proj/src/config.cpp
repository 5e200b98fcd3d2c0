#include "metastate/config.hpp"

#include <numeric>

#include "metastate/errors.hpp"

namespace metastate {

std::string to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& s) {
    if (s == "f32") return Precision::F32;
    if (s == "f64") return Precision::F64;
    throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

ModelConfig ModelConfig::normalized() const {
    ModelConfig out = *this;
    if (out.n_head != 0 && out.residual_segments.empty()) out.residual_segments = {out.d_model};
    if (out.n_head != 0 && out.head_segments.empty()) out.head_segments = {out.head_dim()};
    if (out.n_head != 0 && out.sse_input_dim == 0) out.sse_input_dim = out.head_dim();
    return out;
}

void ModelConfig::validate() const {
    if (n_head == 0 || d_model == 0 || d_model % n_head != 0) {
        throw ConfigError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_head (" +
                          std::to_string(n_head) + ")");
    }
    if (n_layer < 1) throw ConfigError("n_layer must be at least 1");
    if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2");
    if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
    const auto total = [](const std::vector<std::size_t>& v) { return std::accumulate(v.begin(), v.end(), std::size_t{0}); };
    if (residual_segments.empty() || total(residual_segments) != d_model) {
        throw ConfigError("residual_segments must sum to d_model");
    }
    if (head_segments.empty() || total(head_segments) != head_dim()) {
        throw ConfigError("head_segments must sum to d_model / n_head");
    }
    for (auto w : residual_segments) if (w == 0) throw ConfigError("empty residual segment");
    for (auto w : head_segments) if (w == 0) throw ConfigError("empty head segment");
    if (sse_input_dim == 0 || sse_input_dim > head_dim()) {
        throw ConfigError("sse_input_dim must lie in [1, d_model / n_head]");
    }
}

ModelConfig preset(const std::string& name) {
    ModelConfig c;
    c.preset = name;
    if (name == "tiny") {
        c.n_layer = 2; c.d_model = 64; c.n_head = 4;
    } else if (name == "mini") {
        c.n_layer = 4; c.d_model = 128; c.n_head = 4;
    } else if (name == "bench") {
        c.n_layer = 2; c.d_model = 16; c.n_head = 2;
    } else if (name == "150m") {
        c.n_layer = 12; c.d_model = 768; c.n_head = 12;
    } else if (name == "450m") {
        c.n_layer = 18; c.d_model = 1024; c.n_head = 16;
    } else if (name == "900m") {
        c.n_layer = 24; c.d_model = 1280; c.n_head = 16;
    } else if (name == "1.5b") {
        c.n_layer = 32; c.d_model = 1536; c.n_head = 12;
    } else {
        throw ConfigError("unknown preset '" + name + "'");
    }
    return c.normalized();
}

std::vector<std::string> preset_names() { return {"tiny", "mini", "bench", "150m", "450m", "900m", "1.5b"}; }

nlohmann::json to_json(const ModelConfig& cfg) {
    const ModelConfig c = cfg.normalized();
    return nlohmann::json{
        {"vocab_size", c.vocab_size},
        {"d_model", c.d_model},
        {"n_head", c.n_head},
        {"n_layer", c.n_layer},
        {"precision", to_string(c.precision)},
        {"preset", c.preset},
        {"norm_eps", c.norm_eps},
        {"residual_segments", c.residual_segments},
        {"head_segments", c.head_segments},
        {"sse_input_dim", c.sse_input_dim},
    };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        if (j.contains("preset") && !j.at("preset").get<std::string>().empty() && !j.contains("d_model")) {
            c = preset(j.at("preset").get<std::string>());
        }
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.d_model = j.value("d_model", c.d_model);
        c.n_head = j.value("n_head", c.n_head);
        c.n_layer = j.value("n_layer", c.n_layer);
        c.precision = parse_precision(j.value("precision", to_string(c.precision)));
        c.preset = j.value("preset", c.preset);
        c.norm_eps = j.value("norm_eps", c.norm_eps);
        c.residual_segments = j.value("residual_segments", std::vector<std::size_t>{});
        c.head_segments = j.value("head_segments", std::vector<std::size_t>{});
        c.sse_input_dim = j.value("sse_input_dim", std::size_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed model config: ") + e.what());
    }
    c = c.normalized();
    c.validate();
    return c;
}

std::size_t parameter_count(const ModelConfig& cfg) {
    const ModelConfig c = cfg.normalized();
    const std::size_t d = c.d_model;
    const std::size_t v = c.vocab_size;
    // Per layer: seven d x d time-mix matrices plus the Meta-State output
    // projection, and eleven length-d vectors (two pre-norms, two inner norms,
    // token-shift mix, decay and learning-rate biases).
    std::size_t per_layer = 8 * d * d + 11 * d;
    if (c.has_input_projection()) {
        per_layer += c.n_head * c.sse_input_dim * c.head_dim();
    }
    return 2 * v * d + 2 * d + c.n_layer * per_layer;
}

} // namespace metastate
