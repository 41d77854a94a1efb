#include "elvc/dsp/features.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include <unsupported/Eigen/FFT>

#include "elvc/core/error.hpp"
#include "elvc/core/rng.hpp"

namespace elvc::dsp {
namespace {

using Complex = std::complex<double>;
using ComplexVector = Eigen::VectorXcd;
using ComplexMatrix = Eigen::MatrixXcd;

Vector hann(Eigen::Index n) {
  Vector w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

ComplexMatrix complex_stft(const Vector& x, const FrameConfig& frame) {
  const Eigen::Index len = frame.frame_length();
  const Eigen::Index hop = frame.frame_shift();
  const Eigen::Index frames = frame.num_frames(x.size());
  const Eigen::Index bins = frame.fft_size / 2 + 1;
  const Vector window = hann(len);
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  ComplexMatrix out(frames, bins);
  Vector buf = Vector::Zero(frame.fft_size);
  ComplexVector spec;
  for (Eigen::Index t = 0; t < frames; ++t) {
    buf.setZero();
    buf.head(len) = x.segment(t * hop, len).cwiseProduct(window);
    fft.fwd(spec, buf);
    out.row(t) = spec.head(bins).transpose();
  }
  return out;
}

Vector istft(const ComplexMatrix& spec, const FrameConfig& frame) {
  const Eigen::Index len = frame.frame_length();
  const Eigen::Index hop = frame.frame_shift();
  const Eigen::Index frames = spec.rows();
  const Eigen::Index n = frames == 0 ? 0 : (frames - 1) * hop + len;
  const Vector window = hann(len);
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  Vector out = Vector::Zero(n);
  Vector norm = Vector::Zero(n);
  Vector buf;
  for (Eigen::Index t = 0; t < frames; ++t) {
    ComplexVector s = spec.row(t).transpose();
    fft.inv(buf, s);
    out.segment(t * hop, len) += buf.head(len).cwiseProduct(window);
    norm.segment(t * hop, len) += window.cwiseAbs2();
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (norm[i] > 1e-8) out[i] /= norm[i];
  }
  return out;
}

void check_length(const Vector& waveform, Eigen::Index needed, const char* what) {
  if (waveform.size() < needed) {
    fail(ErrorCode::InputTooShort, std::string(what) + ": waveform has " + std::to_string(waveform.size()) +
                                       " samples, need at least " + std::to_string(needed));
  }
}

/// Maps a warped frequency back onto the linear axis (all-pass warping with -alpha).
double unwarp(double warped, double alpha) {
  return warped - 2.0 * std::atan2(alpha * std::sin(warped), 1.0 + alpha * std::cos(warped));
}

}  // namespace

double hz_to_mel(double hz) { return 1127.0 * std::log1p(hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * std::expm1(mel / 1127.0); }

Matrix mel_filterbank(const MelConfig& config) {
  const Eigen::Index bins = config.frame.fft_size / 2 + 1;
  const double lo = hz_to_mel(config.fmin);
  const double hi = hz_to_mel(config.fmax);
  std::vector<double> edges(static_cast<std::size_t>(config.n_mels + 2));
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(config.n_mels + 1));
  }
  Matrix fb = Matrix::Zero(config.n_mels, bins);
  for (int m = 0; m < config.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    for (Eigen::Index k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * config.frame.sample_rate / config.frame.fft_size;
      const double up = (f - left) / (center - left);
      const double down = (right - f) / (right - center);
      fb(m, k) = std::max(0.0, std::min(up, down));
    }
  }
  return fb;
}

Matrix magnitude_stft(const Vector& waveform, const FrameConfig& frame) {
  check_length(waveform, frame.frame_length(), "magnitude_stft");
  return complex_stft(waveform, frame).cwiseAbs();
}

MelSpectrogram mel_spectrogram(const Vector& waveform, const MelConfig& config) {
  check_length(waveform, config.frame.frame_length(), "mel_spectrogram");
  const Matrix mag = complex_stft(waveform, config.frame).cwiseAbs();
  const Matrix fb = mel_filterbank(config);
  MelSpectrogram mel;
  mel.frames = (mag * fb.transpose()).cwiseMax(config.log_floor).array().log().matrix();
  mel.frame_shift_ms = config.frame.frame_shift_ms;
  mel.frame_length_ms = config.frame.frame_length_ms;
  mel.n_mels = config.n_mels;
  mel.sample_rate = config.frame.sample_rate;
  return mel;
}

namespace {

/// Precomputed warping interpolation and cosine basis for a fixed (bins, config).
struct McepAnalyzer {
  std::vector<Eigen::Index> lo, hi;
  Vector frac;
  Matrix basis;  // (order + 1) x warp_points
  double floor;

  McepAnalyzer(Eigen::Index bins, const McepConfig& config) : floor(config.log_floor) {
    const int k_total = config.warp_points;
    lo.resize(static_cast<std::size_t>(k_total));
    hi.resize(static_cast<std::size_t>(k_total));
    frac.resize(k_total);
    for (int k = 0; k < k_total; ++k) {
      double w = 2.0 * std::numbers::pi * k / k_total;
      if (w > std::numbers::pi) w = 2.0 * std::numbers::pi - w;
      const double pos = std::clamp(unwarp(w, config.alpha) / std::numbers::pi * static_cast<double>(bins - 1), 0.0,
                                    static_cast<double>(bins - 1));
      lo[static_cast<std::size_t>(k)] = static_cast<Eigen::Index>(std::floor(pos));
      hi[static_cast<std::size_t>(k)] = std::min(lo[static_cast<std::size_t>(k)] + 1, bins - 1);
      frac[k] = pos - static_cast<double>(lo[static_cast<std::size_t>(k)]);
    }
    basis.resize(config.order + 1, k_total);
    for (int m = 0; m <= config.order; ++m) {
      // Minimum-phase convention: log|H| = c0 + sum_{m>=1} c_m cos(m w).
      const double scale = (m == 0 ? 1.0 : 2.0) / k_total;
      for (int k = 0; k < k_total; ++k) basis(m, k) = scale * std::cos(2.0 * std::numbers::pi * k * m / k_total);
    }
  }

  Vector operator()(const Vector& magnitude) const {
    const Vector logmag = magnitude.cwiseMax(floor).array().log().matrix();
    Vector warped(basis.cols());
    for (Eigen::Index k = 0; k < warped.size(); ++k) {
      const auto i = static_cast<std::size_t>(k);
      warped[k] = (1.0 - frac[k]) * logmag[lo[i]] + frac[k] * logmag[hi[i]];
    }
    return basis * warped;
  }
};

}  // namespace

Vector mel_cepstrum_frame(const Vector& magnitude, const McepConfig& config) {
  return McepAnalyzer(magnitude.size(), config)(magnitude);
}

McepSequence mel_cepstrum(const Vector& waveform, const McepConfig& config) {
  check_length(waveform, config.frame.frame_length(), "mel_cepstrum");
  const Matrix mag = complex_stft(waveform, config.frame).cwiseAbs();
  const McepAnalyzer analyze(mag.cols(), config);
  McepSequence out;
  out.frames.resize(mag.rows(), config.order + 1);
  for (Eigen::Index t = 0; t < mag.rows(); ++t) out.frames.row(t) = analyze(mag.row(t).transpose()).transpose();
  return out;
}

F0Track extract_f0(const Vector& waveform, const F0Config& config) {
  const auto window = static_cast<Eigen::Index>(config.frame.sample_rate * config.window_ms / 1000.0 + 0.5);
  check_length(waveform, 2 * window, "extract_f0");
  const Eigen::Index frames = config.frame.num_frames(waveform.size());
  const Eigen::Index hop = config.frame.frame_shift();
  const Eigen::Index len = config.frame.frame_length();
  const auto min_lag = static_cast<Eigen::Index>(std::floor(config.frame.sample_rate / config.fmax));
  const auto max_lag = static_cast<Eigen::Index>(std::ceil(config.frame.sample_rate / config.fmin));

  F0Track track;
  track.f0_hz = Vector::Zero(frames);
  track.voiced.assign(static_cast<std::size_t>(frames), false);
  Vector r(max_lag + 2);
  for (Eigen::Index t = 0; t < frames; ++t) {
    // Window centred on the mel frame centre, clipped to the signal.
    const Eigen::Index center = t * hop + len / 2;
    const Eigen::Index start = std::clamp<Eigen::Index>(center - window / 2, 0, waveform.size() - window);
    const auto seg = waveform.segment(start, window);
    const double rms = std::sqrt(seg.squaredNorm() / static_cast<double>(window));
    if (rms < config.silence_rms) continue;

    r.setZero();
    for (Eigen::Index lag = min_lag - 1; lag <= max_lag + 1 && lag < window; ++lag) {
      const auto a = seg.head(window - lag);
      const auto b = seg.tail(window - lag);
      const double denom = std::sqrt(a.squaredNorm() * b.squaredNorm());
      r[lag] = denom > 0.0 ? a.dot(b) / denom : 0.0;
    }
    Eigen::Index best = -1;
    double best_r = -1.0;
    for (Eigen::Index lag = min_lag; lag <= std::min(max_lag, window - 2); ++lag) {
      if (r[lag] > best_r) {
        best_r = r[lag];
        best = lag;
      }
    }
    if (best < 0 || best_r < config.voicing_threshold) continue;
    // Prefer the shortest lag whose peak is nearly as strong (guards against octave-down errors).
    for (Eigen::Index lag = min_lag; lag < best; ++lag) {
      if (r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1] && r[lag] >= 0.75 * best_r) {
        best = lag;
        break;
      }
    }
    const double y0 = r[best - 1], y1 = r[best], y2 = r[best + 1];
    const double denom = y0 - 2.0 * y1 + y2;
    const double offset = std::abs(denom) > 1e-12 ? std::clamp(0.5 * (y0 - y2) / denom, -0.5, 0.5) : 0.0;
    const double f0 = config.frame.sample_rate / (static_cast<double>(best) + offset);
    if (f0 < config.fmin || f0 > config.fmax) continue;
    track.f0_hz[t] = f0;
    track.voiced[static_cast<std::size_t>(t)] = true;
  }
  return track;
}

Vector griffin_lim(const MelSpectrogram& mel, int iterations, const MelConfig& config) {
  require(iterations >= 1, ErrorCode::InvalidInput, "griffin_lim: iterations must be >= 1");
  require(mel.frames.allFinite(), ErrorCode::InvalidInput, "griffin_lim: non-finite mel");
  require(mel.frames.cols() == config.n_mels, ErrorCode::ShapeError, "griffin_lim: mel bin count mismatch");
  const Eigen::Index frames = mel.frames.rows();
  if (frames == 0) return Vector();

  // Non-negative least-squares estimate of linear magnitudes via multiplicative updates.
  const Matrix fb = mel_filterbank(config);
  const Matrix target = mel.frames.array().exp().matrix();
  const Matrix fbt_target = target * fb;
  const Matrix gram = fb.transpose() * fb;
  Matrix mag = fbt_target.cwiseMax(1e-12);
  for (int i = 0; i < 60; ++i) {
    const Matrix denom = (mag * gram).cwiseMax(1e-30);
    mag = mag.cwiseProduct(fbt_target).cwiseQuotient(denom);
  }
  // Magnitudes below the analysis floor are silence.
  mag = (mag.array() < config.log_floor * 10.0).select(0.0, mag.array()).matrix();

  Rng rng(0x6c1fULL);
  std::uniform_real_distribution<double> phase_dist(-std::numbers::pi, std::numbers::pi);
  ComplexMatrix spec(frames, mag.cols());
  for (Eigen::Index i = 0; i < spec.size(); ++i) spec.data()[i] = std::polar(mag.data()[i], phase_dist(rng));

  Vector x = istft(spec, config.frame);
  for (int it = 1; it < iterations; ++it) {
    const ComplexMatrix re = complex_stft(x, config.frame);
    for (Eigen::Index i = 0; i < spec.size(); ++i) {
      const double a = std::abs(re.data()[i]);
      spec.data()[i] = a > 1e-12 ? mag.data()[i] * (re.data()[i] / a) : Complex(mag.data()[i], 0.0);
    }
    x = istft(spec, config.frame);
  }
  return x;
}

double mel_reanalysis_error(const MelSpectrogram& mel, const Vector& waveform, const MelConfig& config) {
  const MelSpectrogram re = mel_spectrogram(waveform, config);
  const Eigen::Index t = std::min(re.frames.rows(), mel.frames.rows());
  return (re.frames.topRows(t) - mel.frames.topRows(t)).cwiseAbs().mean();
}

}  // namespace elvc::dsp
