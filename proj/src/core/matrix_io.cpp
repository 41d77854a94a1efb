#include "elvc/core/matrix_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "elvc/core/error.hpp"

namespace elvc {
namespace {

static_assert(std::endian::native == std::endian::little, "matrix dumps assume a little-endian host");

constexpr std::array<char, 4> kMagic = {'E', 'M', 'A', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void write_matrix(const std::filesystem::path& path, const Matrix& m, DType dtype) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(dtype));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (dtype == DType::Float32) {
        put<float>(out, static_cast<float>(m(r, c)));
      } else {
        put<double>(out, m(r, c));
      }
    }
  }
  require(out.good(), ErrorCode::IoError, "write failed: " + path.string());
}

Matrix read_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::IoError, "cannot open " + path.string());
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  require(in.good() && magic == kMagic, ErrorCode::IoError, "bad matrix magic in " + path.string());
  const auto version = get<std::uint32_t>(in);
  require(version == kVersion, ErrorCode::IoError, "unsupported matrix version in " + path.string());
  const auto dtype = static_cast<DType>(get<std::uint32_t>(in));
  require(dtype == DType::Float32 || dtype == DType::Float64, ErrorCode::IoError,
          "unknown dtype in " + path.string());
  const auto rows = get<std::uint64_t>(in);
  const auto cols = get<std::uint64_t>(in);
  require(in.good(), ErrorCode::IoError, "truncated header in " + path.string());
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      m(r, c) = dtype == DType::Float32 ? static_cast<double>(get<float>(in)) : get<double>(in);
    }
  }
  require(in.good(), ErrorCode::IoError, "truncated data in " + path.string());
  return m;
}

}  // namespace elvc
