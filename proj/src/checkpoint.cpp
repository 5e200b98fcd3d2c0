#include "metastate/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace metastate {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, float>) return DType::F32;
    else if constexpr (std::is_same_v<T, double>) return DType::F64;
    else return DType::U8;
}

std::size_t dtype_size(DType d) {
    switch (d) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::U8: return 1;
    }
    throw CheckpointError("unknown dtype");
}

template <typename T>
StoredTensor store(const Tensor<T>& t) {
    return {dtype_of<T>(), t.rows(), t.cols(), std::vector<double>(t.values().begin(), t.values().end())};
}

template <typename T>
Tensor<T> restore(const StoredTensor& s) {
    std::vector<T> values(s.values.size());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(s.values[i]);
    return Tensor<T>(s.rows, s.cols, std::move(values));
}

class Writer {
public:
    template <typename U>
    void put(U v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(U));
    }
    void put_bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        bytes.insert(bytes.end(), p, p + n);
    }
    std::vector<std::uint8_t> bytes;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

    template <typename U>
    U get() {
        U v;
        std::memcpy(&v, take(sizeof(U)), sizeof(U));
        return v;
    }
    const std::uint8_t* take(std::size_t n) {
        if (n > bytes_.size() - pos_) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
        const std::uint8_t* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

bool has_prefix(const std::string& s, const std::string& p) { return s.compare(0, p.size(), p) == 0; }

bool is_parameter(const std::string& name) {
    return !has_prefix(name, kMomentPrefix) && !has_prefix(name, kVariancePrefix) && !has_prefix(name, kFreezePrefix);
}

} // namespace

template <typename T>
ParamStore<T> Checkpoint::parameters() const {
    ParamStore<T> out;
    for (const auto& [name, t] : tensors) {
        if (is_parameter(name)) out.emplace(name, restore<T>(t));
    }
    check_store(out, config);
    return out;
}

template <typename T>
void Checkpoint::set_parameters(const ParamStore<T>& params) {
    for (auto it = tensors.begin(); it != tensors.end();) {
        it = is_parameter(it->first) ? tensors.erase(it) : std::next(it);
    }
    for (const auto& [name, t] : params) tensors[name] = store(t);
}

template <typename T>
std::map<std::string, Tensor<T>> Checkpoint::moments(const std::string& prefix) const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, t] : tensors) {
        if (has_prefix(name, prefix)) out.emplace(name.substr(prefix.size()), restore<T>(t));
    }
    return out;
}

template <typename T>
void Checkpoint::set_moments(const std::string& prefix, const std::map<std::string, Tensor<T>>& m) {
    clear_section(prefix);
    for (const auto& [name, t] : m) tensors[prefix + name] = store(t);
}

FreezeMasks Checkpoint::freeze_masks() const { return moments<unsigned char>(kFreezePrefix); }

void Checkpoint::set_freeze_masks(const FreezeMasks& masks) { set_moments<unsigned char>(kFreezePrefix, masks); }

void Checkpoint::clear_section(const std::string& prefix) {
    for (auto it = tensors.begin(); it != tensors.end();) {
        it = has_prefix(it->first, prefix) ? tensors.erase(it) : std::next(it);
    }
}

template <typename T>
Checkpoint make_checkpoint(const ModelConfig& cfg, const ParamStore<T>& params, std::uint64_t step) {
    Checkpoint c;
    c.config = cfg.normalized();
    c.config.precision = dtype_of<T>() == DType::F32 ? Precision::F32 : Precision::F64;
    check_store(params, c.config);
    c.step = step;
    c.set_parameters(params);
    return c;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
    Writer w;
    w.put_bytes(kCheckpointMagic, 6);
    w.put_bytes(kCheckpointVersion, 2);
    const nlohmann::json header{{"model", to_json(ckpt.config)}, {"step", ckpt.step}};
    const std::string text = header.dump();
    w.put(static_cast<std::uint32_t>(text.size()));
    w.put_bytes(text.data(), text.size());
    w.put(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        if (t.values.size() != t.rows * t.cols) throw CheckpointError("tensor '" + name + "' has inconsistent shape");
        w.put(static_cast<std::uint32_t>(name.size()));
        w.put_bytes(name.data(), name.size());
        w.put(static_cast<std::uint8_t>(t.dtype));
        w.put(static_cast<std::uint64_t>(t.rows));
        w.put(static_cast<std::uint64_t>(t.cols));
        for (double v : t.values) {
            switch (t.dtype) {
            case DType::F32: w.put(static_cast<float>(v)); break;
            case DType::F64: w.put(v); break;
            case DType::U8: w.put(static_cast<std::uint8_t>(v)); break;
            }
        }
    }
    return std::move(w.bytes);
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    const auto* magic = r.take(8);
    if (std::memcmp(magic, kCheckpointMagic, 6) != 0) throw CheckpointError("not a checkpoint (bad magic)");
    if (std::memcmp(magic + 6, kCheckpointVersion, 2) != 0) {
        throw CheckpointError("unsupported checkpoint version '" + std::string(magic + 6, magic + 8) + "'");
    }
    Checkpoint c;
    const auto header_len = r.get<std::uint32_t>();
    const auto* header = r.take(header_len);
    try {
        const auto j = nlohmann::json::parse(header, header + header_len);
        c.config = model_config_from_json(j.at("model"));
        c.step = j.at("step").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("invalid model config in checkpoint: ") + e.what());
    }
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.get<std::uint32_t>();
        const auto* name_bytes = r.take(name_len);
        std::string name(name_bytes, name_bytes + name_len);
        StoredTensor t;
        const auto dtype = r.get<std::uint8_t>();
        if (dtype > 2) throw CheckpointError("tensor '" + name + "' has unknown dtype " + std::to_string(dtype));
        t.dtype = static_cast<DType>(dtype);
        t.rows = r.get<std::uint64_t>();
        t.cols = r.get<std::uint64_t>();
        const std::size_t n = t.rows * t.cols;
        if (t.cols != 0 && n / t.cols != t.rows) throw CheckpointError("tensor '" + name + "' shape overflows");
        if (n > bytes.size()) throw CheckpointError("tensor '" + name + "' larger than the file");
        t.values.resize(n);
        const auto* data = r.take(n * dtype_size(t.dtype));
        for (std::size_t k = 0; k < n; ++k) {
            switch (t.dtype) {
            case DType::F32: {
                float f;
                std::memcpy(&f, data + 4 * k, 4);
                t.values[k] = f;
                break;
            }
            case DType::F64: std::memcpy(&t.values[k], data + 8 * k, 8); break;
            case DType::U8: t.values[k] = data[k]; break;
            }
        }
        if (!c.tensors.emplace(std::move(name), std::move(t)).second) throw CheckpointError("duplicate tensor name");
    }
    if (!r.done()) throw CheckpointError("trailing bytes after the last tensor");
    return c;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path.string() + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize(ckpt);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write '" + tmp.string() + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError("write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

#define METASTATE_INSTANTIATE(T)                                                                        \
    template ParamStore<T> Checkpoint::parameters<T>() const;                                           \
    template void Checkpoint::set_parameters<T>(const ParamStore<T>&);                                  \
    template std::map<std::string, Tensor<T>> Checkpoint::moments<T>(const std::string&) const;         \
    template void Checkpoint::set_moments<T>(const std::string&, const std::map<std::string, Tensor<T>>&); \
    template Checkpoint make_checkpoint(const ModelConfig&, const ParamStore<T>&, std::uint64_t);

METASTATE_INSTANTIATE(float)
METASTATE_INSTANTIATE(double)

} // namespace metastate
