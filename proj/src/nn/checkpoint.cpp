#include "elvc/nn/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "elvc/core/error.hpp"

namespace elvc::nn {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");
constexpr std::array<char, 8> kMagic = {'E', 'L', 'V', 'C', 'C', 'K', 'P', 'T'};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store, const nlohmann::json& meta) {
  nlohmann::json header;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const Parameter* p : store.all()) {
    header["tensors"].push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()},
                                 {"offset", offset}});
    offset += static_cast<std::uint64_t>(p->value.size()) * sizeof(double);
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    require(out.good(), ErrorCode::IoError, "cannot write checkpoint " + path.string());
    out.write(kMagic.data(), kMagic.size());
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const Parameter* p : store.all()) {
      // Row-major payload regardless of Eigen's storage order.
      const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = p->value;
      out.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
    }
    require(out.good(), ErrorCode::IoError, "checkpoint write failed " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::IoError, "cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  require(in.good() && magic == kMagic, ErrorCode::IoError, "not a checkpoint: " + path.string());
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  require(version == kCheckpointVersion, ErrorCode::IoError, "unsupported checkpoint version in " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  require(in.good(), ErrorCode::IoError, "truncated checkpoint header " + path.string());
  const auto header = nlohmann::json::parse(text);
  const auto payload_start = in.tellg();

  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& t : header.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
    in.seekg(payload_start + static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>()));
    in.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
    require(in.good(), ErrorCode::IoError, "truncated checkpoint payload " + path.string());
    ckpt.tensors.emplace(t.at("name").get<std::string>(), Matrix(rm));
  }
  return ckpt;
}

}  // namespace elvc::nn
