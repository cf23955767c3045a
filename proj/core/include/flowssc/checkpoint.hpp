#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowssc/nn.hpp"

namespace flowssc::ckpt {

inline constexpr std::uint16_t kVersion = 1;

// Named tensors plus the structural digest of the configuration that
// produced them. File layout: "FSSC", u16 version, u64 digest, u32 count,
// then per tensor u16 name length, name, u8 dtype (0 = f32, 1 = f64),
// u8 rank, u64 dims, little-endian payload; trailing CRC32 of all prior bytes.
struct Checkpoint {
    std::uint64_t digest = 0;
    nn::ParamList tensors;

    const Tensor* find(std::string_view name) const;
    // Throws DataError when missing.
    const Tensor& at(std::string_view name) const;
    // Appends copies, optionally renaming with a prefix.
    void add(const nn::ParamList& params, std::string_view prefix = "");
    void add(std::string name, const Tensor& t);
};

std::vector<std::uint8_t> encode(const Checkpoint& ckpt);
// Throws ParseError on bad magic, version, truncation or CRC mismatch.
Checkpoint decode(std::span<const std::uint8_t> bytes);

// Writes to a temporary sibling and renames it into place.
void save(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load(const std::filesystem::path& path);
// Throws ConfigError when the digest differs from the one expected.
void check_digest(const Checkpoint& ckpt, std::uint64_t expected, std::string_view what);

// Copies stored values into params (prefix + name lookup). Missing names or
// shape mismatches raise ConfigError.
void restore(const Checkpoint& ckpt, const nn::ParamList& params, std::string_view prefix = "");

// FNV-1a over a canonical configuration string.
std::uint64_t digest(std::string_view canonical);

}  // namespace flowssc::ckpt
