#include <doctest.h>

#include <numeric>

#include "elvc/core/error.hpp"
#include "elvc/corpus/phonemes.hpp"
#include "elvc/corpus/synth.hpp"
#include "elvc/dsp/features.hpp"
#include "support.hpp"

using namespace elvc;

namespace {

/// Frequency of the largest FFT-magnitude bin of a whole signal.
double dominant_hz(const Vector& w) {
  dsp::FrameConfig fc;
  fc.frame_length_ms = 64.0;
  fc.fft_size = 1024;
  const Matrix mag = dsp::magnitude_stft(w, fc);
  const RowVector avg = mag.colwise().mean();
  Eigen::Index k = 0;
  avg.maxCoeff(&k);
  return static_cast<double>(k) * 16000.0 / 1024.0;
}

}  // namespace

TEST_CASE("frame count follows the framing formula") {
  const dsp::MelConfig cfg;
  for (const Eigen::Index n : {400, 401, 559, 560, 16000, 12345}) {
    const auto mel = dsp::mel_spectrogram(Vector::Zero(n), cfg);
    CHECK(mel.num_frames() == (n - 400) / 160 + 1);
    CHECK(mel.frames.cols() == 80);
  }
  CHECK_THROWS_AS(dsp::mel_spectrogram(Vector::Zero(399)), Error);
}

TEST_CASE("silence maps to the log floor") {
  const auto mel = dsp::mel_spectrogram(Vector::Zero(4000));
  CHECK((mel.frames.array() == std::log(1e-10)).all());
}

TEST_CASE("a 440 Hz sine peaks in the filter covering 440 Hz") {
  const dsp::MelConfig cfg;
  const Matrix fb = dsp::mel_filterbank(cfg);
  const auto k440 = static_cast<Eigen::Index>(std::lround(440.0 * cfg.frame.fft_size / cfg.frame.sample_rate));
  Eigen::Index expected = 0;
  fb.col(k440).maxCoeff(&expected);
  const auto mel = dsp::mel_spectrogram(test::sine(440.0, 0.5), cfg);
  for (Eigen::Index t = 0; t < mel.num_frames(); ++t) {
    Eigen::Index arg = 0;
    mel.frames.row(t).maxCoeff(&arg);
    CHECK(arg == expected);
  }
}

TEST_CASE("doubling amplitude adds log 2 above the floor") {
  Rng rng(1);
  const Vector w = 0.1 * randn(8000, 1, rng);
  const auto a = dsp::mel_spectrogram(w);
  const auto b = dsp::mel_spectrogram(2.0 * w);
  const double floor = std::log(1e-10);
  for (Eigen::Index i = 0; i < a.frames.size(); ++i) {
    if (a.frames.data()[i] > floor + 1.0) CHECK(b.frames.data()[i] - a.frames.data()[i] == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  }
}

TEST_CASE("mel-cepstrum framing and gain separation") {
  Rng rng(2);
  const Vector w = 0.1 * randn(6000, 1, rng);
  const auto mc = dsp::mel_cepstrum(w);
  CHECK(mc.num_frames() == dsp::mel_spectrogram(w).num_frames());
  CHECK(mc.order() == 24);
  CHECK(dsp::mel_cepstrum(w).frames == mc.frames);

  const auto sil = dsp::mel_cepstrum(Vector::Zero(4000));
  CHECK(sil.frames.rightCols(24).cwiseAbs().maxCoeff() < 1e-6);

  const dsp::McepConfig cfg;
  const Matrix mag = dsp::magnitude_stft(w, cfg.frame);
  const Vector frame = mag.row(3).transpose();
  const Vector c1 = dsp::mel_cepstrum_frame(frame, cfg);
  const Vector c2 = dsp::mel_cepstrum_frame(2.0 * frame, cfg);
  CHECK(std::abs(c2[0] - c1[0]) > 0.1);
  CHECK((c2.tail(24) - c1.tail(24)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("F0 of a 220 Hz sine") {
  const auto f0 = dsp::extract_f0(test::sine(220.0, 1.0));
  int good = 0;
  for (Eigen::Index t = 0; t < f0.size(); ++t) {
    if (f0.voiced[static_cast<std::size_t>(t)] && f0.f0_hz[t] >= 217.0 && f0.f0_hz[t] <= 223.0) ++good;
  }
  CHECK(good >= 0.95 * static_cast<double>(f0.size()));
}

TEST_CASE("F0 track invariants") {
  const auto sil = dsp::extract_f0(Vector::Zero(16000));
  CHECK(std::none_of(sil.voiced.begin(), sil.voiced.end(), [](bool v) { return v; }));
  CHECK(sil.f0_hz.isZero());
  CHECK_THROWS_AS(dsp::extract_f0(Vector::Zero(100)), Error);

  Rng rng(3);
  const auto u = corpus::generate_typical(corpus::random_sentence(rng, 8, 12), corpus::SpeakerParams{}, 5);
  const auto f0 = dsp::extract_f0(u.waveform);
  for (Eigen::Index t = 0; t < f0.size(); ++t) {
    const bool v = f0.voiced[static_cast<std::size_t>(t)];
    CHECK(v == (f0.f0_hz[t] > 0.0));
    if (v) CHECK((f0.f0_hz[t] >= 50.0 && f0.f0_hz[t] <= 600.0));
  }
}

TEST_CASE("extractors are pure") {
  Rng rng(4);
  const Vector w = 0.2 * randn(9000, 1, rng);
  CHECK(dsp::mel_spectrogram(w).frames == dsp::mel_spectrogram(w).frames);
  CHECK(dsp::extract_f0(w).f0_hz == dsp::extract_f0(w).f0_hz);
}

TEST_CASE("griffin-lim reconstructs a sine near its frequency") {
  const Vector w = test::sine(500.0, 0.6);
  const auto mel = dsp::mel_spectrogram(w);
  const Vector y = dsp::griffin_lim(mel, 30);
  CHECK(std::abs(dominant_hz(y) - 500.0) <= 10.0);
  CHECK(dsp::griffin_lim(mel, 30) == y);
}

TEST_CASE("griffin-lim of silence is silent") {
  const auto mel = dsp::mel_spectrogram(Vector::Zero(8000));
  const Vector y = dsp::griffin_lim(mel, 10);
  CHECK(std::sqrt(y.squaredNorm() / static_cast<double>(y.size())) < 1e-3);
}

TEST_CASE("griffin-lim re-analysis error shrinks with iterations") {
  Rng rng(6);
  for (int u = 0; u < 3; ++u) {
    const auto utt = corpus::generate_typical(corpus::random_sentence(rng, 8, 12), corpus::SpeakerParams{}, 10 + u);
    const auto mel = dsp::mel_spectrogram(utt.waveform);
    const double e10 = dsp::mel_reanalysis_error(mel, dsp::griffin_lim(mel, 10));
    const double e30 = dsp::mel_reanalysis_error(mel, dsp::griffin_lim(mel, 30));
    const double e60 = dsp::mel_reanalysis_error(mel, dsp::griffin_lim(mel, 60));
    CHECK(e30 <= e10);
    CHECK(e60 <= e30);
  }
}

TEST_CASE("griffin-lim rejects non-finite input") {
  auto mel = dsp::mel_spectrogram(Vector::Zero(4000));
  mel.frames(1, 2) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(dsp::griffin_lim(mel, 5), Error);
  CHECK_THROWS_AS(dsp::griffin_lim(dsp::mel_spectrogram(Vector::Zero(4000)), 0), Error);
}

TEST_CASE("mel scale round trip") {
  for (double hz : {0.0, 100.0, 1000.0, 7999.0}) CHECK(dsp::mel_to_hz(dsp::hz_to_mel(hz)) == doctest::Approx(hz));
}
