#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "metastate/config.hpp"
#include "metastate/model.hpp"

namespace metastate {

// Layout (all integers little-endian):
//   "MSTATE01"
//   u32 length, canonical JSON {"model": config, "step": n}
//   u32 tensor count
//   per tensor, in name order: u32 name length, name, u8 dtype, u64 rows, u64 cols, data
inline constexpr char kCheckpointMagic[] = "MSTATE";
inline constexpr char kCheckpointVersion[] = "01";

enum class DType : std::uint8_t { F32 = 0, F64 = 1, U8 = 2 };

// Values are held as doubles in memory; every supported dtype converts
// losslessly in both directions.
struct StoredTensor {
    DType dtype = DType::F64;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    bool operator==(const StoredTensor&) const = default;
};

// Tensor name prefixes for the optional sections.
inline constexpr char kMomentPrefix[] = "optim.m:";
inline constexpr char kVariancePrefix[] = "optim.v:";
inline constexpr char kFreezePrefix[] = "freeze:";

using FreezeMasks = std::map<std::string, Tensor<unsigned char>>;

struct Checkpoint {
    ModelConfig config;
    std::uint64_t step = 0;
    std::map<std::string, StoredTensor> tensors;

    template <typename T>
    ParamStore<T> parameters() const;
    template <typename T>
    void set_parameters(const ParamStore<T>& store);

    // Optimizer moments by parameter name; empty when none were saved.
    template <typename T>
    std::map<std::string, Tensor<T>> moments(const std::string& prefix) const;
    template <typename T>
    void set_moments(const std::string& prefix, const std::map<std::string, Tensor<T>>& moments);

    FreezeMasks freeze_masks() const;
    void set_freeze_masks(const FreezeMasks& masks);
    void clear_section(const std::string& prefix);
};

template <typename T>
Checkpoint make_checkpoint(const ModelConfig& cfg, const ParamStore<T>& store, std::uint64_t step = 0);

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

} // namespace metastate
