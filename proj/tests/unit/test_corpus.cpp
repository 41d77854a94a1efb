#include <doctest.h>

#include <fstream>
#include <iterator>

#include "elvc/core/error.hpp"
#include "elvc/core/wav.hpp"
#include "elvc/corpus/build.hpp"
#include "elvc/corpus/phonemes.hpp"
#include "elvc/corpus/synth.hpp"
#include "elvc/dsp/features.hpp"
#include "support.hpp"

using namespace elvc;
using namespace elvc::corpus;

namespace {

CorpusConfig small_config() {
  CorpusConfig c;
  c.train_count = 6;
  c.dev_count = 2;
  c.test_count = 2;
  c.target_utterances = 10;
  c.pretrain_speakers = 2;
  c.pretrain_utterances_per_speaker = 4;
  c.synthetic_el_speakers = 1;
  c.synthetic_el_utterances = 4;
  c.parallel_pairs = 4;
  return c;
}

const Corpus& default_corpus() {
  static const Corpus c = build_corpus(CorpusConfig{}, test::scratch_dir("corpus_default"));
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::StageFailure;
}

}  // namespace

TEST_CASE("inventory and transcripts") {
  CHECK(inventory().size() == 20);
  const auto seq = parse_transcript("k a s a");
  CHECK(seq.size() == 4);
  CHECK(format_transcript(seq) == "k a s a");
  CHECK(code_of([] { parse_transcript("k a zz"); }) == ErrorCode::InvalidSymbol);
  for (Symbol s = 0; s < kInventorySize; ++s) CHECK(symbol_from_name(symbol_name(s)) == s);
}

TEST_CASE("generate_typical contract") {
  Rng rng(1);
  const auto text = random_sentence(rng, 8, 12);
  const SpeakerParams spk{"a", 130.0, 0.06, 1.0, 0.08, 0.02};
  const auto u1 = generate_typical(text, spk, 42);
  const auto u2 = generate_typical(text, spk, 42);
  CHECK(u1.waveform == u2.waveform);
  CHECK(u1.transcript == text);
  CHECK(u1.speech_type == SpeechType::Typical);
  CHECK(std::abs(u1.duration_s - static_cast<double>(u1.waveform.size()) / 16000.0) <= 1.0 / 16000.0);
  CHECK(std::abs(u1.duration_s - static_cast<double>(text.size()) * spk.phone_duration_s) <= 0.01);
  CHECK(code_of([&] { generate_typical({}, spk, 1); }) == ErrorCode::EmptyInput);
  CHECK(code_of([&] { generate_typical({3, 99}, spk, 1); }) == ErrorCode::InvalidSymbol);
}

TEST_CASE("typical F0 follows the speaker contour") {
  Rng rng(2);
  const SpeakerParams spk{"a", 140.0, 0.06, 1.0, 0.08, 0.02};
  const dsp::F0Config cfg;
  std::size_t voiced = 0, within = 0;
  for (int i = 0; i < 5; ++i) {
    const auto u = generate_typical(random_sentence(rng, 10, 14), spk, 100 + i);
    const auto f0 = dsp::extract_f0(u.waveform, cfg);
    for (Eigen::Index t = 0; t < f0.size(); ++t) {
      if (!f0.voiced[static_cast<std::size_t>(t)]) continue;
      const double centre = (static_cast<double>(t * cfg.frame.frame_shift()) + cfg.window_ms * 8.0) / 16000.0;
      ++voiced;
      if (std::abs(f0.f0_hz[t] - f0_contour(spk, u.seed, centre, u.duration_s)) <= 5.0) ++within;
    }
  }
  REQUIRE(voiced > 100);
  CHECK(static_cast<double>(within) / static_cast<double>(voiced) >= 0.95);
}

TEST_CASE("simulate_el contract") {
  Rng rng(3);
  const SpeakerParams spk{"a", 120.0, 0.06, 1.0, 0.08, 0.02};
  const auto src = generate_typical(random_sentence(rng, 10, 14), spk, 7, "src");
  ElSimulationParams p;
  p.seed = 9;
  const auto el = simulate_el(src, p, "el");
  CHECK(el.speech_type == SpeechType::El);
  CHECK(el.transcript == src.transcript);
  REQUIRE(el.source_id.has_value());
  CHECK(*el.source_id == "src");
  CHECK(el.duration_s / src.duration_s == doctest::Approx(p.tempo_factor).epsilon(0.02));
  CHECK(simulate_el(src, p, "el").waveform == el.waveform);
  CHECK(code_of([&] { simulate_el(el, p); }) == ErrorCode::InvalidSpeechType);

  p.corruption_prob = 0.0;
  CHECK(simulate_el(src, p).rendered == src.transcript);

  const auto f0 = dsp::extract_f0(el.waveform);
  std::vector<double> v;
  for (Eigen::Index t = 0; t < f0.size(); ++t) {
    if (f0.voiced[static_cast<std::size_t>(t)]) v.push_back(f0.f0_hz[t]);
  }
  REQUIRE(v.size() > 20);
  const Eigen::Map<const Vector> vv(v.data(), static_cast<Eigen::Index>(v.size()));
  const double sd = std::sqrt((vv.array() - vv.mean()).square().mean());
  CHECK(sd < 1.0);
}

TEST_CASE("corruption rate and voicing bias") {
  Rng rng(4);
  SymbolSequence text;
  for (int i = 0; i < 20000; ++i) text.push_back(i % kInventorySize);
  const auto out = corrupt_symbols(text, 0.15, 0.7, rng);
  REQUIRE(out.size() == text.size());
  std::size_t changed = 0;
  for (std::size_t i = 0; i < text.size(); ++i) changed += out[i] != text[i];
  CHECK(static_cast<double>(changed) / static_cast<double>(text.size()) == doctest::Approx(0.15).epsilon(0.1));
  Rng rng0(4);
  CHECK(corrupt_symbols(text, 0.0, 0.7, rng0) == text);
}

TEST_CASE("default corpus splits, parallelism and tempo") {
  const auto& c = default_corpus();
  const auto& m = c.manifest;
  CHECK(m.count(c.roles.target_typical, Split::Train) == 116);
  CHECK(m.count(c.roles.target_typical, Split::Dev) == 40);
  CHECK(m.count(c.roles.target_typical, Split::Test) == 40);
  CHECK(m.count(c.roles.target_el, Split::Train) == 116);
  CHECK(m.count(c.roles.target_el, Split::Test) == 40);
  CHECK(validate_manifest(m).empty());

  for (const auto* e : m.select(c.roles.target_el, Split::Test)) {
    REQUIRE(e->parallel_id.has_value());
    const auto* ref = m.find(*e->parallel_id);
    REQUIRE(ref != nullptr);
    CHECK(ref->speech_type == SpeechType::Typical);
    CHECK(ref->split == Split::Test);
    CHECK(ref->transcript == e->transcript);
  }

  double el_s = 0.0, typ_s = 0.0;
  for (const auto* e : m.select(c.roles.target_el, Split::Train)) {
    el_s += static_cast<double>(read_wav(m.resolve(*e)).samples.size()) / 16000.0;
    typ_s += static_cast<double>(read_wav(m.resolve(*m.find(*e->parallel_id))).samples.size()) / 16000.0;
  }
  CHECK(el_s / typ_s == doctest::Approx(5.77 / 4.38).epsilon(0.02));
  CHECK(el_s / typ_s == doctest::Approx(c.config.target_el.tempo_factor).epsilon(0.02));
}

TEST_CASE("manifest round trip is identity") {
  const auto& c = default_corpus();
  const auto loaded = load_manifest(c.manifest.path);
  CHECK(loaded.entries == c.manifest.entries);
  const auto dir = test::scratch_dir("manifest_rt");
  save_manifest(loaded, dir / "m.jsonl");
  CHECK(load_manifest(dir / "m.jsonl").entries == loaded.entries);
}

TEST_CASE("corpus build is a pure function of config") {
  const auto a = build_corpus(small_config(), test::scratch_dir("corpus_a"));
  const auto b = build_corpus(small_config(), test::scratch_dir("corpus_b"));
  REQUIRE(a.manifest.entries == b.manifest.entries);
  CHECK(slurp(a.manifest.path) == slurp(b.manifest.path));
  for (const auto& e : a.manifest.entries) CHECK(slurp(a.manifest.resolve(e)) == slurp(b.manifest.resolve(e)));
  const auto again = build_corpus(small_config(), a.root);
  CHECK(again.manifest.entries == a.manifest.entries);
  CHECK(load_corpus(a.root).manifest.entries == a.manifest.entries);
}

TEST_CASE("corpus build errors") {
  auto bad = small_config();
  bad.target_utterances = 11;
  CHECK(code_of([&] { build_corpus(bad, test::scratch_dir("corpus_bad")); }) == ErrorCode::ConfigError);
  const auto blocker = test::scratch_dir("corpus_blocker") / "file";
  std::ofstream(blocker) << "x";
  CHECK(code_of([&] { build_corpus(small_config(), blocker / "sub"); }) == ErrorCode::IoError);
}

TEST_CASE("validation reports broken parallel links") {
  Manifest m;
  m.entries.push_back({"t1", "wav/t1.wav", "k a", SpeechType::Typical, "s", Split::Train, std::nullopt});
  m.entries.push_back({"e1", "wav/e1.wav", "k a", SpeechType::El, "s_el", Split::Train, std::string("t1")});
  CHECK(validate_manifest(m, false).empty());
  m.entries[1].transcript = "k o";
  CHECK_FALSE(validate_manifest(m, false).empty());
  m.entries[1].transcript = "k a";
  m.entries[1].parallel_id = "nope";
  CHECK_FALSE(validate_manifest(m, false).empty());
}
