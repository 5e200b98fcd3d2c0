#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "metastate/config.hpp"

namespace metastate {

struct Corpus {
    std::size_t vocab_size = kByteVocab;
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

std::vector<std::size_t> encode_bytes(std::string_view text);
// Ids outside the byte range (the end-of-text marker) are dropped.
std::string decode_bytes(std::span<const std::size_t> ids);

// First 90% of the ids train, the remaining 10% validate.
Corpus split_corpus(std::vector<std::size_t> ids);

// Throws InputError for unreadable or empty files.
Corpus load_corpus(const std::filesystem::path& path);

} // namespace metastate
