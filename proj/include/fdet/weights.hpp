#pragma once

#include <cstdint>
#include <filesystem>
#include <span>

#include "fdet/layers.hpp"

namespace fdet {

// Weight container layout (all integers little-endian):
//   8 bytes   magic "FDETWGT\0"
//   u32       format version
//   u32       parameter count
//   per parameter: u32 name length, name bytes, u32 rank, rank x u32 dims
//   then every parameter's values as raw little-endian float64, in order.
inline constexpr std::uint32_t kWeightFormatVersion = 1;

void save_weights(const std::filesystem::path& path, std::span<Param* const> params);

/// Loads into existing parameters. Throws std::runtime_error on bad magic,
/// version mismatch, or when the manifest (names, shapes, count) differs.
void load_weights(const std::filesystem::path& path, std::span<Param* const> params);

}  // namespace fdet
