#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "elvc/core/rng.hpp"
#include "elvc/core/types.hpp"

namespace elvc::corpus {

/// Voice of a synthetic speaker.
struct SpeakerParams {
  std::string id;
  double base_f0_hz = 120.0;
  double f0_depth = 0.06;  ///< relative depth of the slow intonation swing
  double formant_scale = 1.0;
  double phone_duration_s = 0.08;
  double breathiness = 0.02;
};

struct ElSimulationParams {
  double tempo_factor = 1.32;
  double excitation_f0_hz = 100.0;
  double corruption_prob = 0.15;
  std::uint64_t seed = 0;
  /// Resonance shift of the EL speaker's vocal tract relative to the source voice.
  double formant_shift = 1.0;
  /// Low-frequency energy below this corner is attenuated (device coupling through the neck).
  double highpass_hz = 400.0;
  /// Level of buzz radiated directly from the device, bypassing the vocal tract.
  double leakage = 0.05;
  /// Frication strength relative to typical speech (no pulmonary airflow).
  double frication_gain = 0.3;
  /// Probability that a corrupted symbol flips to its voicing partner when it has one.
  double voicing_confusion_bias = 0.7;
};

struct Utterance {
  std::string id;
  Vector waveform;
  SymbolSequence transcript;
  SpeechType speech_type = SpeechType::Typical;
  std::string speaker_id;
  double duration_s = 0.0;

  /// EL only: id of the typical utterance this was simulated from.
  std::optional<std::string> source_id;
  /// Symbols actually realised in the waveform (differs from transcript after corruption).
  SymbolSequence rendered;
  SpeakerParams speaker;
  std::uint64_t seed = 0;
};

/// Slow intonation contour of a speaker, evaluated at time t of an utterance of length `total_s`.
double f0_contour(const SpeakerParams& speaker, std::uint64_t seed, double t, double total_s);

Utterance generate_typical(const SymbolSequence& text, const SpeakerParams& speaker, std::uint64_t seed,
                           std::string id = {});

/// Re-renders the source text with electrolarynx excitation, slower tempo and
/// per-symbol substitutions. The stored transcript stays the clean source text.
Utterance simulate_el(const Utterance& src, const ElSimulationParams& params, std::string id = {});

/// Symbol-level corruption used by simulate_el.
SymbolSequence corrupt_symbols(const SymbolSequence& text, double prob, double voicing_bias, Rng& rng);

/// Random CV-structured phoneme sentence with a length in [min_len, max_len].
SymbolSequence random_sentence(Rng& rng, int min_len, int max_len);

}  // namespace elvc::corpus
