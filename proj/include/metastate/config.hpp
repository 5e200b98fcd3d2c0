#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace metastate {

enum class Precision { F32, F64 };

std::string to_string(Precision p);
Precision parse_precision(const std::string& s);

// Byte-level vocabulary: ids 0..255 are raw bytes, 256 is reserved as an
// end-of-text marker the corpus loader never emits.
inline constexpr std::size_t kByteVocab = 257;
inline constexpr std::size_t kEndOfText = 256;

struct ModelConfig {
    std::size_t vocab_size = kByteVocab;
    std::size_t d_model = 64;
    std::size_t n_head = 4;
    std::size_t n_layer = 2;
    Precision precision = Precision::F32;
    std::string preset;
    double norm_eps = 1e-5;

    // Normalization segments. A freshly initialized model has one residual
    // segment of width d_model and one per-head segment of width head_dim();
    // every function-preserving widening appends one segment to each.
    std::vector<std::size_t> residual_segments;
    std::vector<std::size_t> head_segments;

    // Per-head width of the Meta-State encoder input. Equals head_dim() until
    // the state is widened; afterwards the encoder reads the original slice and
    // projects it with a per-head input matrix.
    std::size_t sse_input_dim = 0;

    std::size_t head_dim() const { return d_model / n_head; }
    bool has_input_projection() const { return sse_input_dim != head_dim(); }

    // Fills defaulted segment/encoder fields and checks every invariant.
    void validate() const;
    ModelConfig normalized() const;

    bool operator==(const ModelConfig&) const = default;
};

// "tiny", "mini", "bench", and the four reference sizes "150m", "450m", "900m", "1.5b".
ModelConfig preset(const std::string& name);
std::vector<std::string> preset_names();

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Closed-form trainable parameter count derived from shapes alone.
std::size_t parameter_count(const ModelConfig& cfg);

} // namespace metastate
