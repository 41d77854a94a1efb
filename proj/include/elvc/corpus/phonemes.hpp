#pragma once

#include <array>
#include <string>
#include <string_view>

#include "elvc/core/types.hpp"

namespace elvc::corpus {

enum class Manner {
  Vowel,
  Nasal,
  Approximant,
  VoicedFricative,
  UnvoicedFricative,
  VoicedPlosive,
  UnvoicedPlosive,
};

struct PhonemeTemplate {
  std::string_view name;
  Manner manner;
  std::array<double, 4> formants_hz;
  double noise_center_hz;  ///< frication / burst band, 0 if none
  double noise_bandwidth_hz;
  std::string_view partner;  ///< voicing counterpart, empty if none
};

constexpr int kInventorySize = 20;

const std::array<PhonemeTemplate, kInventorySize>& inventory();
const PhonemeTemplate& phoneme(Symbol s);

bool is_voiced(Manner m);
bool is_sonorant(Manner m);
bool is_vowel(Symbol s);

/// Throws InvalidSymbol for names outside the inventory.
Symbol symbol_from_name(std::string_view name);
std::string_view symbol_name(Symbol s);

/// Space-separated phoneme names, e.g. "k a s a".
std::string format_transcript(const SymbolSequence& symbols);
SymbolSequence parse_transcript(std::string_view text);

}  // namespace elvc::corpus
