#include "elvc/corpus/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "elvc/core/error.hpp"
#include "elvc/corpus/phonemes.hpp"

namespace elvc::corpus {
namespace {

constexpr double kPi = std::numbers::pi;
constexpr std::array<double, 4> kBandwidths = {70.0, 100.0, 130.0, 170.0};
constexpr double kMaxHarmonicHz = 7000.0;
constexpr Eigen::Index kBlock = 80;  // 5 ms control rate

struct RenderOptions {
  bool electrolarynx = false;
  double tempo = 1.0;
  double el_f0_hz = 100.0;
  double formant_shift = 1.0;
  double highpass_hz = 0.0;
  double leakage = 0.0;
  double frication_gain = 1.0;
};

/// Per-manner articulation targets at relative position u within a segment.
struct Articulation {
  double voice = 0.0;
  double noise = 0.0;
};

Articulation articulation(Manner manner, double u, double breathiness) {
  switch (manner) {
    case Manner::Vowel: return {1.0, breathiness};
    case Manner::Nasal: return {0.45, 0.0};
    case Manner::Approximant: return {0.7, 0.0};
    case Manner::VoicedFricative: return {0.35, 0.25};
    case Manner::UnvoicedFricative: return {0.0, 0.35};
    case Manner::VoicedPlosive:
      if (u < 0.35) return {0.12, 0.0};
      if (u < 0.5) return {0.3, 0.5};
      return {0.8, 0.0};
    case Manner::UnvoicedPlosive:
      if (u < 0.35) return {0.0, 0.0};
      if (u < 0.5) return {0.0, 0.6};
      return {0.0, 0.2};
  }
  return {};
}

double resonance(double f, double center, double bandwidth) {
  const double c2 = center * center;
  return c2 / std::sqrt((c2 - f * f) * (c2 - f * f) + bandwidth * bandwidth * f * f);
}

double envelope(double f, const std::array<double, 4>& formants) {
  double g = 1.0;
  for (std::size_t i = 0; i < formants.size(); ++i) g *= resonance(f, formants[i], kBandwidths[i]);
  return g;
}

/// Constant-peak-gain band-pass biquad.
struct BandPass {
  double b0 = 0, b2 = 0, a1 = 0, a2 = 0;
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;

  void design(double center, double bandwidth, double fs) {
    center = std::clamp(center, 50.0, 0.45 * fs);
    const double w0 = 2.0 * kPi * center / fs;
    const double q = std::max(center / std::max(bandwidth, 1.0), 0.3);
    const double alpha = std::sin(w0) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    b0 = alpha / a0;
    b2 = -alpha / a0;
    a1 = -2.0 * std::cos(w0) / a0;
    a2 = (1.0 - alpha) / a0;
  }
  double operator()(double x) {
    const double y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
    x2 = x1;
    x1 = x;
    y2 = y1;
    y1 = y;
    return y;
  }
};

Vector render(const SymbolSequence& symbols, const SpeakerParams& speaker, std::uint64_t seed,
              const RenderOptions& opt) {
  const double fs = kSampleRate;
  const auto seg_len = static_cast<Eigen::Index>(std::lround(speaker.phone_duration_s * opt.tempo * fs));
  const Eigen::Index n = seg_len * static_cast<Eigen::Index>(symbols.size());
  const double total_s = static_cast<double>(n) / fs;
  Vector out = Vector::Zero(n);

  Rng rng(derive_seed(seed, 0x5eed));
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double formant_scale = speaker.formant_scale * opt.formant_shift;

  // Smoothed control state (coarticulation and click-free amplitude changes).
  std::array<double, 4> formants{};
  {
    const auto& first = phoneme(symbols.front()).formants_hz;
    for (std::size_t i = 0; i < 4; ++i) formants[i] = first[i] * formant_scale;
  }
  double voice = 0.0, noise = 0.0, noise_center = 1000.0, noise_bw = 1000.0;
  const double formant_coef = 1.0 - std::exp(-static_cast<double>(kBlock) / (0.012 * fs));
  const double amp_coef = 1.0 - std::exp(-1.0 / (0.003 * fs));

  BandPass bandpass;
  double phase = 0.0;
  std::vector<double> amps, next_amps;
  std::vector<double> sines;

  for (Eigen::Index block_start = 0; block_start < n; block_start += kBlock) {
    const Eigen::Index block_end = std::min(n, block_start + kBlock);
    const Eigen::Index seg = std::min<Eigen::Index>(block_start / seg_len, static_cast<Eigen::Index>(symbols.size()) - 1);
    const auto& ph = phoneme(symbols[static_cast<std::size_t>(seg)]);
    for (std::size_t i = 0; i < 4; ++i) {
      formants[i] += formant_coef * (ph.formants_hz[i] * formant_scale - formants[i]);
    }
    if (ph.noise_center_hz > 0.0) {
      noise_center = ph.noise_center_hz * std::sqrt(formant_scale);
      noise_bw = ph.noise_bandwidth_hz;
    } else {
      noise_center = formants[1];
      noise_bw = 2000.0;
    }
    bandpass.design(noise_center, noise_bw, fs);

    const double t_mid = (static_cast<double>(block_start + block_end) / 2.0) / fs;
    const double f0 = opt.electrolarynx ? opt.el_f0_hz : f0_contour(speaker, seed, t_mid, total_s);
    const int harmonics = std::max(1, static_cast<int>(kMaxHarmonicHz / f0));
    amps.assign(static_cast<std::size_t>(harmonics), 0.0);
    for (int h = 1; h <= harmonics; ++h) {
      const double f = h * f0;
      double a = envelope(f, formants);
      double src = opt.electrolarynx ? std::pow(static_cast<double>(h), -0.3) : 1.0 / h;
      if (opt.highpass_hz > 0.0) {
        const double r = (f / opt.highpass_hz) * (f / opt.highpass_hz);
        a *= r / (1.0 + r);
      }
      amps[static_cast<std::size_t>(h - 1)] = src * a;
    }
    std::vector<double> leak(static_cast<std::size_t>(harmonics), 0.0);
    if (opt.leakage > 0.0) {
      for (int h = 1; h <= harmonics; ++h) leak[static_cast<std::size_t>(h - 1)] = opt.leakage * 4.0 * std::pow(h, -0.3);
    }
    sines.assign(static_cast<std::size_t>(harmonics + 1), 0.0);

    for (Eigen::Index i = block_start; i < block_end; ++i) {
      const double u = static_cast<double>(i - seg * seg_len) / static_cast<double>(seg_len);
      Articulation target = articulation(ph.manner, u, speaker.breathiness);
      if (opt.electrolarynx) {
        // The device buzzes continuously; only lip closure muffles it.
        const bool closure = (ph.manner == Manner::UnvoicedPlosive || ph.manner == Manner::VoicedPlosive) && u < 0.35;
        target.voice = closure ? 0.12 : std::max(target.voice, 0.3);
        target.noise *= opt.frication_gain;
      }
      voice += amp_coef * (target.voice - voice);
      noise += amp_coef * (target.noise - noise);

      phase += 2.0 * kPi * f0 / fs;
      if (phase > 2.0 * kPi) phase -= 2.0 * kPi;
      const double s1 = std::sin(phase);
      const double c2 = 2.0 * std::cos(phase);
      double prev = 0.0, cur = s1, acc = 0.0;
      for (int h = 0; h < harmonics; ++h) {
        acc += (voice * amps[static_cast<std::size_t>(h)] + leak[static_cast<std::size_t>(h)]) * cur;
        const double next = c2 * cur - prev;
        prev = cur;
        cur = next;
      }
      out[i] = 0.05 * acc + 0.8 * noise * bandpass(gauss(rng));
    }
  }

  const double peak = out.cwiseAbs().maxCoeff();
  if (peak > 0.0) out *= 0.5 / peak;
  return out;
}

std::string default_id(const std::string& speaker, std::uint64_t seed, std::string_view tag) {
  return speaker + "_" + std::string(tag) + std::to_string(seed % 1000000007ULL);
}

}  // namespace

double f0_contour(const SpeakerParams& speaker, std::uint64_t seed, double t, double total_s) {
  const double phase = 2.0 * kPi * static_cast<double>(derive_seed(seed, 0xf0) % 10000) / 10000.0;
  const double swing = 1.0 + speaker.f0_depth * std::sin(2.0 * kPi * 1.5 * t + phase);
  const double declination = 1.0 - 0.1 * (total_s > 0.0 ? t / total_s : 0.0);
  return speaker.base_f0_hz * swing * declination;
}

Utterance generate_typical(const SymbolSequence& text, const SpeakerParams& speaker, std::uint64_t seed,
                           std::string id) {
  require(!text.empty(), ErrorCode::EmptyInput, "generate_typical: empty text");
  for (Symbol s : text) {
    require(s >= 0 && s < kInventorySize, ErrorCode::InvalidSymbol, "symbol index " + std::to_string(s));
  }
  Utterance u;
  u.id = id.empty() ? default_id(speaker.id, seed, "typ") : std::move(id);
  u.waveform = render(text, speaker, seed, RenderOptions{});
  u.transcript = text;
  u.rendered = text;
  u.speech_type = SpeechType::Typical;
  u.speaker_id = speaker.id;
  u.duration_s = static_cast<double>(u.waveform.size()) / kSampleRate;
  u.speaker = speaker;
  u.seed = seed;
  return u;
}

SymbolSequence corrupt_symbols(const SymbolSequence& text, double prob, double voicing_bias, Rng& rng) {
  SymbolSequence out = text;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& s : out) {
    if (unit(rng) >= prob) continue;
    const auto& ph = phoneme(s);
    if (!ph.partner.empty() && unit(rng) < voicing_bias) {
      s = symbol_from_name(ph.partner);
      continue;
    }
    // Substitute within the same broad class (vowel vs consonant).
    const bool vowel = ph.manner == Manner::Vowel;
    std::vector<Symbol> pool;
    for (Symbol c = 0; c < kInventorySize; ++c) {
      if (c != s && is_vowel(c) == vowel) pool.push_back(c);
    }
    s = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
  }
  return out;
}

Utterance simulate_el(const Utterance& src, const ElSimulationParams& params, std::string id) {
  require(src.speech_type == SpeechType::Typical, ErrorCode::InvalidSpeechType,
          "simulate_el: source " + src.id + " is already EL");
  require(params.corruption_prob >= 0.0 && params.corruption_prob < 1.0, ErrorCode::ConfigError,
          "simulate_el: corruption_prob must be in [0, 1)");
  require(params.tempo_factor >= 1.0, ErrorCode::ConfigError, "simulate_el: tempo_factor must be >= 1");

  Rng rng(derive_seed(params.seed, src.seed));
  Utterance el;
  el.id = id.empty() ? src.id + "_el" : std::move(id);
  el.rendered = corrupt_symbols(src.transcript, params.corruption_prob, params.voicing_confusion_bias, rng);
  RenderOptions opt;
  opt.electrolarynx = true;
  opt.tempo = params.tempo_factor;
  opt.el_f0_hz = params.excitation_f0_hz;
  opt.formant_shift = params.formant_shift;
  opt.highpass_hz = params.highpass_hz;
  opt.leakage = params.leakage;
  opt.frication_gain = params.frication_gain;
  el.waveform = render(el.rendered, src.speaker, derive_seed(src.seed, params.seed + 1), opt);
  el.transcript = src.transcript;
  el.speech_type = SpeechType::El;
  el.speaker_id = src.speaker_id + "_el";
  el.duration_s = static_cast<double>(el.waveform.size()) / kSampleRate;
  el.source_id = src.id;
  el.speaker = src.speaker;
  el.seed = src.seed;
  return el;
}

SymbolSequence random_sentence(Rng& rng, int min_len, int max_len) {
  std::vector<Symbol> vowels, consonants;
  for (Symbol s = 0; s < kInventorySize; ++s) {
    if (is_vowel(s)) {
      vowels.push_back(s);
    } else if (symbol_name(s) != "N") {
      consonants.push_back(s);
    }
  }
  const Symbol moraic_n = symbol_from_name("N");
  const int target = std::uniform_int_distribution<int>(min_len, max_len)(rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto pick = [&](const std::vector<Symbol>& pool) {
    return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
  };
  SymbolSequence out;
  while (static_cast<int>(out.size()) < target) {
    if (unit(rng) < 0.85 && static_cast<int>(out.size()) + 2 <= target) out.push_back(pick(consonants));
    out.push_back(pick(vowels));
    if (unit(rng) < 0.08 && static_cast<int>(out.size()) < target) out.push_back(moraic_n);
  }
  return out;
}

}  // namespace elvc::corpus
