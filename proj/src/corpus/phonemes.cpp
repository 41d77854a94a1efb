#include "elvc/corpus/phonemes.hpp"

#include <sstream>

#include "elvc/core/error.hpp"

namespace elvc::corpus {

const std::array<PhonemeTemplate, kInventorySize>& inventory() {
  static const std::array<PhonemeTemplate, kInventorySize> table = {{
      {"a", Manner::Vowel, {750, 1200, 2600, 3500}, 0, 0, ""},
      {"i", Manner::Vowel, {300, 2250, 3000, 3700}, 0, 0, ""},
      {"u", Manner::Vowel, {350, 1350, 2400, 3400}, 0, 0, ""},
      {"e", Manner::Vowel, {480, 1900, 2600, 3500}, 0, 0, ""},
      {"o", Manner::Vowel, {500, 850, 2500, 3400}, 0, 0, ""},
      {"k", Manner::UnvoicedPlosive, {400, 1700, 2500, 3500}, 2200, 1200, "g"},
      {"g", Manner::VoicedPlosive, {350, 1700, 2400, 3400}, 2000, 1200, "k"},
      {"s", Manner::UnvoicedFricative, {400, 1800, 2600, 3600}, 5500, 1800, "z"},
      {"z", Manner::VoicedFricative, {350, 1700, 2600, 3600}, 5000, 1800, "s"},
      {"t", Manner::UnvoicedPlosive, {400, 1800, 2700, 3700}, 4200, 1500, "d"},
      {"d", Manner::VoicedPlosive, {350, 1700, 2600, 3600}, 3800, 1500, "t"},
      {"n", Manner::Nasal, {250, 1500, 2500, 3500}, 0, 0, ""},
      {"h", Manner::UnvoicedFricative, {600, 1500, 2500, 3500}, 1600, 2400, ""},
      {"b", Manner::VoicedPlosive, {300, 900, 2300, 3300}, 900, 900, "p"},
      {"p", Manner::UnvoicedPlosive, {400, 900, 2300, 3300}, 1000, 900, "b"},
      {"m", Manner::Nasal, {250, 1100, 2300, 3300}, 0, 0, ""},
      {"y", Manner::Approximant, {280, 2300, 3000, 3700}, 0, 0, ""},
      {"r", Manner::Approximant, {420, 1300, 1900, 3000}, 0, 0, ""},
      {"w", Manner::Approximant, {320, 750, 2400, 3400}, 0, 0, ""},
      {"N", Manner::Nasal, {270, 1250, 2300, 3300}, 0, 0, ""},
  }};
  return table;
}

const PhonemeTemplate& phoneme(Symbol s) {
  require(s >= 0 && s < kInventorySize, ErrorCode::InvalidSymbol, "symbol index " + std::to_string(s));
  return inventory()[static_cast<std::size_t>(s)];
}

bool is_voiced(Manner m) {
  return m != Manner::UnvoicedFricative && m != Manner::UnvoicedPlosive;
}

bool is_sonorant(Manner m) { return m == Manner::Vowel || m == Manner::Nasal || m == Manner::Approximant; }

bool is_vowel(Symbol s) { return phoneme(s).manner == Manner::Vowel; }

Symbol symbol_from_name(std::string_view name) {
  const auto& inv = inventory();
  for (std::size_t i = 0; i < inv.size(); ++i) {
    if (inv[i].name == name) return static_cast<Symbol>(i);
  }
  fail(ErrorCode::InvalidSymbol, "unknown phoneme '" + std::string(name) + "'");
}

std::string_view symbol_name(Symbol s) { return phoneme(s).name; }

std::string format_transcript(const SymbolSequence& symbols) {
  std::string out;
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i) out += ' ';
    out += symbol_name(symbols[i]);
  }
  return out;
}

SymbolSequence parse_transcript(std::string_view text) {
  SymbolSequence out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) out.push_back(symbol_from_name(tok));
  return out;
}

}  // namespace elvc::corpus
