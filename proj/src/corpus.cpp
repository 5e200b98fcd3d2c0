#include "metastate/corpus.hpp"

#include <fstream>
#include <iterator>

#include "metastate/errors.hpp"

namespace metastate {

std::vector<std::size_t> encode_bytes(std::string_view text) {
    std::vector<std::size_t> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(static_cast<unsigned char>(c));
    return ids;
}

std::string decode_bytes(std::span<const std::size_t> ids) {
    std::string out;
    out.reserve(ids.size());
    for (std::size_t id : ids) {
        if (id < 256) out.push_back(static_cast<char>(id));
    }
    return out;
}

Corpus split_corpus(std::vector<std::size_t> ids) {
    if (ids.empty()) throw InputError("corpus is empty");
    const std::size_t cut = ids.size() * 9 / 10;
    Corpus c;
    c.validation.assign(ids.begin() + static_cast<std::ptrdiff_t>(cut), ids.end());
    ids.resize(cut);
    c.train = std::move(ids);
    return c;
}

Corpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open corpus '" + path.string() + "'");
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (text.empty()) throw InputError("corpus '" + path.string() + "' is empty");
    return split_corpus(encode_bytes(text));
}

} // namespace metastate
