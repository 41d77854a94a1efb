#include "elvc/core/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include "elvc/core/error.hpp"

namespace elvc {
namespace {

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

SpeechType speech_type_from_string(const std::string& s) {
  if (s == "EL") return SpeechType::El;
  if (s == "TYPICAL") return SpeechType::Typical;
  fail(ErrorCode::InvalidInput, "unknown speech type '" + s + "'");
}

void write_wav(const std::filesystem::path& path, const Vector& samples, int sample_rate) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  out.write("RIFF", 4);
  put<std::uint32_t>(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put<std::uint32_t>(out, 16);
  put<std::uint16_t>(out, 1);  // PCM
  put<std::uint16_t>(out, 1);  // mono
  put<std::uint32_t>(out, static_cast<std::uint32_t>(sample_rate));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(sample_rate * 2));
  put<std::uint16_t>(out, 2);
  put<std::uint16_t>(out, 16);
  out.write("data", 4);
  put<std::uint32_t>(out, data_bytes);
  for (Eigen::Index i = 0; i < samples.size(); ++i) {
    const double x = std::clamp(samples[i], -1.0, 1.0);
    put<std::int16_t>(out, static_cast<std::int16_t>(std::lround(x * 32767.0)));
  }
  require(out.good(), ErrorCode::IoError, "write failed: " + path.string());
}

WavData read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::IoError, "cannot open " + path.string());
  char tag[4];
  in.read(tag, 4);
  require(in.good() && std::memcmp(tag, "RIFF", 4) == 0, ErrorCode::IoError, "not a RIFF file: " + path.string());
  get<std::uint32_t>(in);
  in.read(tag, 4);
  require(std::memcmp(tag, "WAVE", 4) == 0, ErrorCode::IoError, "not a WAVE file: " + path.string());

  std::uint16_t channels = 0, bits = 0, format = 0;
  std::uint32_t rate = 0;
  while (in.good()) {
    in.read(tag, 4);
    const auto size = get<std::uint32_t>(in);
    if (!in.good()) break;
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      format = get<std::uint16_t>(in);
      channels = get<std::uint16_t>(in);
      rate = get<std::uint32_t>(in);
      get<std::uint32_t>(in);
      get<std::uint16_t>(in);
      bits = get<std::uint16_t>(in);
      in.seekg(size - 16, std::ios::cur);
    } else if (std::memcmp(tag, "data", 4) == 0) {
      require(format == 1 && bits == 16 && channels >= 1, ErrorCode::IoError,
              "only 16-bit PCM is supported: " + path.string());
      const std::size_t frames = size / (2u * channels);
      std::vector<std::int16_t> raw(frames * channels);
      in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 2));
      require(in.good(), ErrorCode::IoError, "truncated data chunk: " + path.string());
      WavData wav;
      wav.sample_rate = static_cast<int>(rate);
      wav.samples.resize(static_cast<Eigen::Index>(frames));
      for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) acc += raw[i * channels + c];
        wav.samples[static_cast<Eigen::Index>(i)] = acc / (32767.0 * channels);
      }
      return wav;
    } else {
      in.seekg(size + (size & 1u), std::ios::cur);
    }
  }
  fail(ErrorCode::IoError, "no data chunk in " + path.string());
}

}  // namespace elvc
