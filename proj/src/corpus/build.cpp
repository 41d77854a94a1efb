#include "elvc/corpus/build.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "elvc/core/error.hpp"
#include "elvc/core/wav.hpp"
#include "elvc/corpus/phonemes.hpp"

namespace elvc::corpus {
namespace {

nlohmann::json speaker_json(const SpeakerParams& s) {
  return {{"id", s.id},
          {"base_f0_hz", s.base_f0_hz},
          {"f0_depth", s.f0_depth},
          {"formant_scale", s.formant_scale},
          {"phone_duration_s", s.phone_duration_s},
          {"breathiness", s.breathiness}};
}

SpeakerParams speaker_from_json(const nlohmann::json& j) {
  SpeakerParams s;
  s.id = j.at("id").get<std::string>();
  s.base_f0_hz = j.at("base_f0_hz").get<double>();
  s.f0_depth = j.at("f0_depth").get<double>();
  s.formant_scale = j.at("formant_scale").get<double>();
  s.phone_duration_s = j.at("phone_duration_s").get<double>();
  s.breathiness = j.at("breathiness").get<double>();
  return s;
}

nlohmann::json el_json(const ElSimulationParams& p) {
  return {{"tempo_factor", p.tempo_factor},   {"excitation_f0_hz", p.excitation_f0_hz},
          {"corruption_prob", p.corruption_prob}, {"seed", p.seed},
          {"formant_shift", p.formant_shift}, {"highpass_hz", p.highpass_hz},
          {"leakage", p.leakage},             {"frication_gain", p.frication_gain},
          {"voicing_confusion_bias", p.voicing_confusion_bias}};
}

ElSimulationParams el_from_json(const nlohmann::json& j) {
  ElSimulationParams p;
  p.tempo_factor = j.value("tempo_factor", p.tempo_factor);
  p.excitation_f0_hz = j.value("excitation_f0_hz", p.excitation_f0_hz);
  p.corruption_prob = j.value("corruption_prob", p.corruption_prob);
  p.seed = j.value("seed", p.seed);
  p.formant_shift = j.value("formant_shift", p.formant_shift);
  p.highpass_hz = j.value("highpass_hz", p.highpass_hz);
  p.leakage = j.value("leakage", p.leakage);
  p.frication_gain = j.value("frication_gain", p.frication_gain);
  p.voicing_confusion_bias = j.value("voicing_confusion_bias", p.voicing_confusion_bias);
  return p;
}

std::string padded(int i) {
  std::ostringstream s;
  s << std::setw(4) << std::setfill('0') << i;
  return s.str();
}

class CorpusWriter {
 public:
  CorpusWriter(std::filesystem::path root) : root_(std::move(root)) {
    std::error_code ec;
    std::filesystem::create_directories(root_ / "wav", ec);
    require(!ec, ErrorCode::IoError, "cannot create " + (root_ / "wav").string() + ": " + ec.message());
  }

  void add(const Utterance& u, const std::string& speaker_id, Split split, std::optional<std::string> parallel_id) {
    const std::string rel = "wav/" + u.id + ".wav";
    write_wav(root_ / rel, u.waveform);
    ManifestEntry e;
    e.utterance_id = u.id;
    e.file_path = rel;
    e.transcript = format_transcript(u.transcript);
    e.speech_type = u.speech_type;
    e.speaker_id = speaker_id;
    e.split = split;
    e.parallel_id = std::move(parallel_id);
    manifest_.entries.push_back(std::move(e));
  }

  Manifest& manifest() { return manifest_; }

 private:
  std::filesystem::path root_;
  Manifest manifest_;
};

}  // namespace

nlohmann::json to_json(const CorpusConfig& c) {
  return {{"seed", c.seed},
          {"min_phones", c.min_phones},
          {"max_phones", c.max_phones},
          {"target", speaker_json(c.target)},
          {"target_el", el_json(c.target_el)},
          {"split", {c.train_count, c.dev_count, c.test_count}},
          {"target_utterances", c.target_utterances},
          {"pretrain_speakers", c.pretrain_speakers},
          {"pretrain_utterances_per_speaker", c.pretrain_utterances_per_speaker},
          {"synthetic_el_speakers", c.synthetic_el_speakers},
          {"synthetic_el_utterances", c.synthetic_el_utterances},
          {"synthetic_corruption_prob", c.synthetic_corruption_prob},
          {"parallel_source", speaker_json(c.parallel_source)},
          {"parallel_target", speaker_json(c.parallel_target)},
          {"parallel_pairs", c.parallel_pairs},
          {"aux_dev_fraction", c.aux_dev_fraction}};
}

CorpusConfig corpus_config_from_json(const nlohmann::json& j) {
  CorpusConfig c;
  c.seed = j.value("seed", c.seed);
  c.min_phones = j.value("min_phones", c.min_phones);
  c.max_phones = j.value("max_phones", c.max_phones);
  if (j.contains("target")) c.target = speaker_from_json(j.at("target"));
  if (j.contains("target_el")) c.target_el = el_from_json(j.at("target_el"));
  if (j.contains("split")) {
    const auto& s = j.at("split");
    require(s.is_array() && s.size() == 3, ErrorCode::ConfigError, "split must be [train, dev, test]");
    c.train_count = s[0].get<int>();
    c.dev_count = s[1].get<int>();
    c.test_count = s[2].get<int>();
  }
  c.target_utterances = j.value("target_utterances", c.train_count + c.dev_count + c.test_count);
  c.pretrain_speakers = j.value("pretrain_speakers", c.pretrain_speakers);
  c.pretrain_utterances_per_speaker = j.value("pretrain_utterances_per_speaker", c.pretrain_utterances_per_speaker);
  c.synthetic_el_speakers = j.value("synthetic_el_speakers", c.synthetic_el_speakers);
  c.synthetic_el_utterances = j.value("synthetic_el_utterances", c.synthetic_el_utterances);
  c.synthetic_corruption_prob = j.value("synthetic_corruption_prob", c.synthetic_corruption_prob);
  if (j.contains("parallel_source")) c.parallel_source = speaker_from_json(j.at("parallel_source"));
  if (j.contains("parallel_target")) c.parallel_target = speaker_from_json(j.at("parallel_target"));
  c.parallel_pairs = j.value("parallel_pairs", c.parallel_pairs);
  c.aux_dev_fraction = j.value("aux_dev_fraction", c.aux_dev_fraction);
  return c;
}

std::string config_hash(const nlohmann::json& j) {
  // FNV-1a over the canonical dump; stable across runs and platforms.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

std::vector<SpeakerParams> pretrain_speakers(const CorpusConfig& config) {
  Rng rng(derive_seed(config.seed, 0x5bea));
  std::vector<SpeakerParams> out;
  for (int i = 0; i < config.pretrain_speakers; ++i) {
    SpeakerParams s;
    s.id = "pre" + padded(i);
    s.base_f0_hz = uniform(rng, 95.0, 230.0);
    s.formant_scale = 0.9 + 0.2 * (s.base_f0_hz - 95.0) / 135.0 + uniform(rng, -0.03, 0.03);
    s.f0_depth = uniform(rng, 0.04, 0.09);
    s.phone_duration_s = uniform(rng, 0.07, 0.09);
    s.breathiness = uniform(rng, 0.01, 0.04);
    out.push_back(s);
  }
  return out;
}

std::vector<ElSimulationParams> synthetic_el_params(const CorpusConfig& config) {
  Rng rng(derive_seed(config.seed, 0xe1));
  std::vector<ElSimulationParams> out;
  for (int i = 0; i < config.synthetic_el_speakers; ++i) {
    ElSimulationParams p = config.target_el;
    p.excitation_f0_hz = uniform(rng, 80.0, 140.0);
    p.formant_shift = uniform(rng, 1.0, 1.2);
    p.tempo_factor = uniform(rng, 1.25, 1.4);
    p.corruption_prob = config.synthetic_corruption_prob;
    p.seed = derive_seed(config.seed, 0xe100 + static_cast<std::uint64_t>(i));
    out.push_back(p);
  }
  return out;
}

Corpus build_corpus(const CorpusConfig& config, const std::filesystem::path& out_dir) {
  require(config.train_count >= 0 && config.dev_count >= 0 && config.test_count >= 0, ErrorCode::ConfigError,
          "split counts must be non-negative");
  require(config.train_count + config.dev_count + config.test_count == config.target_utterances,
          ErrorCode::ConfigError,
          "split counts " + std::to_string(config.train_count) + "/" + std::to_string(config.dev_count) + "/" +
              std::to_string(config.test_count) + " do not sum to " + std::to_string(config.target_utterances));
  require(config.min_phones >= 1 && config.max_phones >= config.min_phones, ErrorCode::ConfigError,
          "bad sentence length range");

  const nlohmann::json cfg_json = to_json(config);
  const std::string hash = config_hash(cfg_json);
  const auto index_path = out_dir / "corpus.json";
  if (std::filesystem::exists(index_path) && std::filesystem::exists(out_dir / "manifest.jsonl")) {
    std::ifstream in(index_path);
    const auto j = nlohmann::json::parse(in, nullptr, false);
    if (!j.is_discarded() && j.value("config_hash", "") == hash) return load_corpus(out_dir);
  }

  CorpusWriter writer(out_dir);
  Corpus corpus;
  corpus.config = config;
  corpus.root = out_dir;
  Rng text_rng(derive_seed(config.seed, 0x7e47));
  auto sentence = [&] { return random_sentence(text_rng, config.min_phones, config.max_phones); };
  std::uint64_t counter = 0;
  auto next_seed = [&] { return derive_seed(config.seed, 1000 + counter++); };

  // Target typical speaker and its parallel EL counterpart.
  corpus.speakers[config.target.id] = config.target;
  corpus.speakers[corpus.roles.target_el] = config.target;
  for (int i = 0; i < config.target_utterances; ++i) {
    const Split split = i < config.train_count ? Split::Train
                        : i < config.train_count + config.dev_count ? Split::Dev
                                                                    : Split::Test;
    const auto text = sentence();
    const auto typ = generate_typical(text, config.target, next_seed(), "tgt_" + padded(i));
    ElSimulationParams el_params = config.target_el;
    el_params.seed = derive_seed(config.seed, 0xe0);
    const auto el = simulate_el(typ, el_params, "tgtel_" + padded(i));
    writer.add(typ, corpus.roles.target_typical, split, std::nullopt);
    writer.add(el, corpus.roles.target_el, split, typ.id);
  }

  auto aux_split = [&](int i, int total) {
    const int dev = static_cast<int>(config.aux_dev_fraction * total + 0.5);
    return i >= total - dev ? Split::Dev : Split::Train;
  };

  // Multi-speaker typical pretraining material.
  for (const auto& spk : pretrain_speakers(config)) {
    corpus.roles.pretrain_typical.push_back(spk.id);
    corpus.speakers[spk.id] = spk;
    for (int i = 0; i < config.pretrain_utterances_per_speaker; ++i) {
      const auto u = generate_typical(sentence(), spk, next_seed(), spk.id + "_" + padded(i));
      writer.add(u, spk.id, aux_split(i, config.pretrain_utterances_per_speaker), std::nullopt);
    }
  }

  // Synthetic EL: target-voice renderings paired with pseudo-EL versions from several EL "speakers".
  SpeakerParams synthetic_voice = config.target;
  synthetic_voice.id = corpus.roles.synthetic_typical;
  corpus.speakers[synthetic_voice.id] = synthetic_voice;
  const auto el_params = synthetic_el_params(config);
  for (std::size_t k = 0; k < el_params.size(); ++k) {
    const std::string id = "synel" + padded(static_cast<int>(k));
    corpus.roles.synthetic_el.push_back(id);
    corpus.speakers[id] = synthetic_voice;
  }
  for (int i = 0; i < config.synthetic_el_utterances; ++i) {
    const Split split = aux_split(i, config.synthetic_el_utterances);
    const auto typ = generate_typical(sentence(), synthetic_voice, next_seed(), "tgtsyn_" + padded(i));
    const std::size_t k = static_cast<std::size_t>(i) % el_params.size();
    const auto el = simulate_el(typ, el_params[k], "synel_" + padded(i));
    writer.add(typ, synthetic_voice.id, split, std::nullopt);
    writer.add(el, corpus.roles.synthetic_el[k], split, typ.id);
  }

  // Parallel typical-to-typical pairs for sequence-to-sequence pretraining.
  corpus.speakers[config.parallel_source.id] = config.parallel_source;
  corpus.speakers[config.parallel_target.id] = config.parallel_target;
  corpus.roles.parallel_source = config.parallel_source.id;
  corpus.roles.parallel_target = config.parallel_target.id;
  for (int i = 0; i < config.parallel_pairs; ++i) {
    const Split split = aux_split(i, config.parallel_pairs);
    const auto text = sentence();
    const auto tgt = generate_typical(text, config.parallel_target, next_seed(), "pvctgt_" + padded(i));
    const auto src = generate_typical(text, config.parallel_source, next_seed(), "pvcsrc_" + padded(i));
    writer.add(tgt, config.parallel_target.id, split, std::nullopt);
    writer.add(src, config.parallel_source.id, split, tgt.id);
  }

  corpus.manifest = std::move(writer.manifest());
  corpus.manifest.path = out_dir / "manifest.jsonl";
  save_manifest(corpus.manifest, corpus.manifest.path);

  nlohmann::json speakers = nlohmann::json::object();
  for (const auto& [id, s] : corpus.speakers) speakers[id] = speaker_json(s);
  nlohmann::json index{{"config", cfg_json},
                       {"config_hash", hash},
                       {"roles",
                        {{"target_typical", corpus.roles.target_typical},
                         {"target_el", corpus.roles.target_el},
                         {"pretrain_typical", corpus.roles.pretrain_typical},
                         {"synthetic_typical", corpus.roles.synthetic_typical},
                         {"synthetic_el", corpus.roles.synthetic_el},
                         {"parallel_source", corpus.roles.parallel_source},
                         {"parallel_target", corpus.roles.parallel_target}}},
                       {"speakers", speakers}};
  std::ofstream out(index_path);
  require(out.good(), ErrorCode::IoError, "cannot write " + index_path.string());
  out << index.dump(2) << '\n';
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / "corpus.json");
  require(in.good(), ErrorCode::IoError, "no corpus.json in " + dir.string());
  const auto j = nlohmann::json::parse(in);
  Corpus c;
  c.root = dir;
  c.config = corpus_config_from_json(j.at("config"));
  const auto& r = j.at("roles");
  c.roles.target_typical = r.at("target_typical").get<std::string>();
  c.roles.target_el = r.at("target_el").get<std::string>();
  c.roles.pretrain_typical = r.at("pretrain_typical").get<std::vector<std::string>>();
  c.roles.synthetic_typical = r.at("synthetic_typical").get<std::string>();
  c.roles.synthetic_el = r.at("synthetic_el").get<std::vector<std::string>>();
  c.roles.parallel_source = r.at("parallel_source").get<std::string>();
  c.roles.parallel_target = r.at("parallel_target").get<std::string>();
  for (const auto& [id, s] : j.at("speakers").items()) c.speakers[id] = speaker_from_json(s);
  c.manifest = load_manifest(dir / "manifest.jsonl");
  return c;
}

}  // namespace elvc::corpus
