#pragma once

#include <filesystem>

#include "elvc/core/types.hpp"

namespace elvc {

/// Writes mono 16-bit PCM. Samples are clipped to [-1, 1].
void write_wav(const std::filesystem::path& path, const Vector& samples, int sample_rate = kSampleRate);

struct WavData {
  Vector samples;
  int sample_rate = kSampleRate;
};

/// Reads 16-bit PCM WAV; multi-channel input is averaged down to mono.
WavData read_wav(const std::filesystem::path& path);

}  // namespace elvc
