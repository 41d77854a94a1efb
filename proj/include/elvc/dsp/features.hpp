#pragma once

#include <vector>

#include <Eigen/Core>

#include "elvc/core/types.hpp"

namespace elvc::dsp {

struct FrameConfig {
  int sample_rate = kSampleRate;
  double frame_length_ms = 25.0;
  double frame_shift_ms = 10.0;
  int fft_size = 512;

  Eigen::Index frame_length() const { return static_cast<Eigen::Index>(sample_rate * frame_length_ms / 1000.0 + 0.5); }
  Eigen::Index frame_shift() const { return static_cast<Eigen::Index>(sample_rate * frame_shift_ms / 1000.0 + 0.5); }
  /// floor((n - frame_length) / frame_shift) + 1, or 0 when n < frame_length.
  Eigen::Index num_frames(Eigen::Index n) const {
    return n < frame_length() ? 0 : (n - frame_length()) / frame_shift() + 1;
  }
};

struct MelConfig {
  FrameConfig frame;
  int n_mels = 80;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-10;
};

struct McepConfig {
  FrameConfig frame;
  int order = 24;
  double alpha = 0.42;
  int warp_points = 512;
  double log_floor = 1e-10;
};

struct F0Config {
  FrameConfig frame;
  double window_ms = 40.0;
  double fmin = 50.0;
  double fmax = 600.0;
  double voicing_threshold = 0.3;
  double silence_rms = 1e-4;
};

/// T x n_mels natural-log mel magnitudes.
struct MelSpectrogram {
  Matrix frames;
  double frame_shift_ms = 10.0;
  double frame_length_ms = 25.0;
  int n_mels = 80;
  int sample_rate = kSampleRate;

  Eigen::Index num_frames() const { return frames.rows(); }
};

/// T x (order + 1) mel-cepstra, c0 first.
struct McepSequence {
  Matrix frames;

  Eigen::Index num_frames() const { return frames.rows(); }
  int order() const { return static_cast<int>(frames.cols()) - 1; }
};

struct F0Track {
  Vector f0_hz;  ///< 0 where unvoiced
  std::vector<bool> voiced;

  Eigen::Index size() const { return f0_hz.size(); }
};

/// n_mels x (fft_size/2 + 1) triangular filterbank on the HTK mel scale.
Matrix mel_filterbank(const MelConfig& config);
double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Magnitude STFT, T x (fft_size/2 + 1), Hann window, no centering.
Matrix magnitude_stft(const Vector& waveform, const FrameConfig& frame);

MelSpectrogram mel_spectrogram(const Vector& waveform, const MelConfig& config = {});
McepSequence mel_cepstrum(const Vector& waveform, const McepConfig& config = {});
/// Mel-cepstrum of a single magnitude spectrum (fft_size/2 + 1 bins).
Vector mel_cepstrum_frame(const Vector& magnitude, const McepConfig& config);
F0Track extract_f0(const Vector& waveform, const F0Config& config = {});

/// Griffin-Lim reconstruction from a log-mel spectrogram. The initial phase is
/// a fixed pseudo-random draw, so output is a pure function of the input.
Vector griffin_lim(const MelSpectrogram& mel, int iterations, const MelConfig& config = {});

/// Mean absolute difference between `mel` and the mel-spectrogram of `waveform`
/// over their common frames.
double mel_reanalysis_error(const MelSpectrogram& mel, const Vector& waveform, const MelConfig& config = {});

}  // namespace elvc::dsp
