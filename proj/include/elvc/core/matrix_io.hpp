#pragma once

#include <filesystem>

#include "elvc/core/types.hpp"

namespace elvc {

/// Binary matrix dump used for feature, unit and speaker-embedding files.
///
/// Layout (all integers little-endian):
///   bytes 0..3   magic "EMAT"
///   bytes 4..7   u32 format version (1)
///   bytes 8..11  u32 dtype (1 = float32, 2 = float64)
///   bytes 12..19 u64 rows
///   bytes 20..27 u64 cols
///   then rows*cols values, row-major, little-endian IEEE-754.
enum class DType : std::uint32_t { Float32 = 1, Float64 = 2 };

void write_matrix(const std::filesystem::path& path, const Matrix& m, DType dtype = DType::Float64);
Matrix read_matrix(const std::filesystem::path& path);

}  // namespace elvc
