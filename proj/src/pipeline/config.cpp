#include "elvc/pipeline/config.hpp"

#include <fstream>
#include <set>

#include "elvc/core/error.hpp"
#include "elvc/core/rng.hpp"

namespace elvc::pipeline {

using alignment::FeatureType;
using alignment::PretrainMode;

std::vector<SystemSpec> default_systems() {
  return {{"1", FeatureType::Mel, FeatureType::Mel, PretrainMode::TtsAe},
          {"2", FeatureType::Mel, FeatureType::Mel, PretrainMode::ParallelVc},
          {"3", FeatureType::Bnf, FeatureType::Units, PretrainMode::TtsAe},
          {"4", FeatureType::Bnf, FeatureType::Units, PretrainMode::ParallelVc},
          {"5", FeatureType::Bnf, FeatureType::Mel, PretrainMode::ParallelVc}};
}

std::string inputs_label(const SystemSpec& s) { return s.input == FeatureType::Mel ? "mel" : "BNF"; }

std::string outputs_label(const SystemSpec& s) { return s.output == FeatureType::Mel ? "mel" : "units"; }

std::string pretraining_label(const SystemSpec& s) {
  return s.pretrain == PretrainMode::ParallelVc ? "Parallel VC" : "TTS/AE";
}

const SystemSpec& ExperimentConfig::system(const std::string& id) const {
  for (const auto& s : systems) {
    if (s.id == id) return s;
  }
  fail(ErrorCode::ConfigError, "unknown system '" + id + "'");
}

nlohmann::json to_json(const TrainSettings& t) {
  return {{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"lr", t.lr}, {"warmup_steps", t.warmup_steps}};
}

TrainSettings train_settings_from_json(const nlohmann::json& j, TrainSettings d) {
  d.epochs = j.value("epochs", d.epochs);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.lr = j.value("lr", d.lr);
  d.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  require(d.epochs >= 0 && d.batch_size >= 1 && d.lr > 0.0 && d.warmup_steps >= 0, ErrorCode::ConfigError,
          "invalid training settings " + j.dump());
  return d;
}

nlohmann::json to_json(const SystemSpec& s) {
  return {{"id", s.id},
          {"input", alignment::to_string(s.input)},
          {"output", alignment::to_string(s.output)},
          {"pretrain", alignment::to_string(s.pretrain)}};
}

SystemSpec system_spec_from_json(const nlohmann::json& j) {
  SystemSpec s;
  s.id = j.at("id").get<std::string>();
  s.input = alignment::feature_type_from_string(j.at("input").get<std::string>());
  s.output = alignment::feature_type_from_string(j.at("output").get<std::string>());
  s.pretrain = alignment::pretrain_mode_from_string(j.at("pretrain").get<std::string>());
  require(s.input != FeatureType::Units && s.output != FeatureType::Bnf, ErrorCode::ConfigError,
          "system " + s.id + ": invalid feature chain");
  return s;
}

namespace {

void put_seed(nlohmann::json& j, const std::optional<std::uint64_t>& seed) {
  if (seed) j["seed"] = *seed;
}

std::optional<std::uint64_t> get_seed(const nlohmann::json& j) {
  if (j.contains("seed") && !j.at("seed").is_null()) return j.at("seed").get<std::uint64_t>();
  return std::nullopt;
}

nlohmann::json unit_config_json(const units::UnitConfig& u) {
  return {{"k", u.k},
          {"tau", u.tau},
          {"pool", u.pool},
          {"max_iterations", u.max_iterations},
          {"max_fit_frames", u.max_fit_frames},
          {"seed", u.seed}};
}

units::UnitConfig unit_config_from_json(const nlohmann::json& j) {
  units::UnitConfig u;
  u.k = j.value("k", u.k);
  u.tau = j.value("tau", u.tau);
  u.pool = j.value("pool", u.pool);
  u.max_iterations = j.value("max_iterations", u.max_iterations);
  u.max_fit_frames = j.value("max_fit_frames", u.max_fit_frames);
  u.seed = j.value("seed", u.seed);
  require(u.k >= 1 && u.tau > 0.0 && u.pool >= 1, ErrorCode::ConfigError, "invalid unit settings");
  return u;
}

nlohmann::json section(const nlohmann::json& j, const char* key) {
  return j.contains(key) ? j.at(key) : nlohmann::json::object();
}

}  // namespace

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json rec = {{"model", to_json(c.recognition.model)},
                        {"stage1", to_json(c.recognition.stage1)},
                        {"stage2", to_json(c.recognition.stage2)},
                        {"stage3", to_json(c.recognition.stage3)},
                        {"stage2_mode", recognition::to_string(c.recognition.stage2_mode)},
                        {"stage3_mode", recognition::to_string(c.recognition.stage3_mode)},
                        {"stage2_typical", c.recognition.stage2_typical}};
  put_seed(rec, c.recognition.seed);
  nlohmann::json al = {{"model", to_json(c.alignment.model)},
                       {"parallel_vc", to_json(c.alignment.parallel_vc)},
                       {"tts", to_json(c.alignment.tts)},
                       {"ae", to_json(c.alignment.ae)},
                       {"ft_synthetic", to_json(c.alignment.ft_synthetic)},
                       {"ft_target", to_json(c.alignment.ft_target)}};
  put_seed(al, c.alignment.seed);
  nlohmann::json syn = {{"model", to_json(c.synthesis.model)},
                        {"pretrain", to_json(c.synthesis.pretrain)},
                        {"adapt", to_json(c.synthesis.adapt)},
                        {"pretrain_dev", c.synthesis.pretrain_dev},
                        {"speaker_embedding", c.synthesis.speaker_embedding}};
  put_seed(syn, c.synthesis.seed);
  nlohmann::json systems = nlohmann::json::array();
  for (const auto& s : c.systems) systems.push_back(to_json(s));
  return {{"seed", c.seed},
          {"corpus", corpus::to_json(c.corpus)},
          {"recognition", rec},
          {"units",
           {{"kind", c.units.kind},
            {"codebook", unit_config_json(c.units.codebook)},
            {"external_dir", c.units.external_dir},
            {"external_dim", c.units.external_dim}}},
          {"alignment", al},
          {"synthesis", syn},
          {"vocoder", {{"kind", c.vocoder.kind}, {"iterations", c.vocoder.iterations}, {"command", c.vocoder.command}}},
          {"eval", {{"seed", c.eval.seed}, {"max_utterances", c.eval.max_utterances}}},
          {"systems", systems}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorCode::ConfigError, "experiment config must be a JSON object");
  static const std::set<std::string> known = {"seed",      "corpus",  "recognition", "units", "alignment",
                                              "synthesis", "vocoder", "eval",        "systems"};
  for (const auto& [key, value] : j.items()) {
    require(known.count(key) > 0, ErrorCode::ConfigError, "unknown config section '" + key + "'");
  }
  ExperimentConfig c;
  c.seed = j.value("seed", c.seed);
  if (j.contains("corpus")) c.corpus = corpus::corpus_config_from_json(j.at("corpus"));

  const auto rec = section(j, "recognition");
  if (rec.contains("model")) c.recognition.model = recognition::recognizer_config_from_json(rec.at("model"));
  c.recognition.stage1 = train_settings_from_json(section(rec, "stage1"), c.recognition.stage1);
  c.recognition.stage2 = train_settings_from_json(section(rec, "stage2"), c.recognition.stage2);
  c.recognition.stage3 = train_settings_from_json(section(rec, "stage3"), c.recognition.stage3);
  if (rec.contains("stage2_mode")) c.recognition.stage2_mode = recognition::loss_mode_from_string(rec.at("stage2_mode"));
  if (rec.contains("stage3_mode")) c.recognition.stage3_mode = recognition::loss_mode_from_string(rec.at("stage3_mode"));
  c.recognition.stage2_typical = rec.value("stage2_typical", c.recognition.stage2_typical);
  c.recognition.seed = get_seed(rec);

  const auto un = section(j, "units");
  c.units.kind = un.value("kind", c.units.kind);
  require(c.units.kind == "codebook" || c.units.kind == "external", ErrorCode::ConfigError,
          "units.kind must be codebook or external");
  if (un.contains("codebook")) c.units.codebook = unit_config_from_json(un.at("codebook"));
  c.units.external_dir = un.value("external_dir", c.units.external_dir);
  c.units.external_dim = un.value("external_dim", c.units.external_dim);
  require(c.units.kind != "external" || !c.units.external_dir.empty(), ErrorCode::ConfigError,
          "units.external_dir is required for external units");

  const auto al = section(j, "alignment");
  if (al.contains("model")) c.alignment.model = alignment::alignment_config_from_json(al.at("model"));
  c.alignment.parallel_vc = train_settings_from_json(section(al, "parallel_vc"), c.alignment.parallel_vc);
  c.alignment.tts = train_settings_from_json(section(al, "tts"), c.alignment.tts);
  c.alignment.ae = train_settings_from_json(section(al, "ae"), c.alignment.ae);
  c.alignment.ft_synthetic = train_settings_from_json(section(al, "ft_synthetic"), c.alignment.ft_synthetic);
  c.alignment.ft_target = train_settings_from_json(section(al, "ft_target"), c.alignment.ft_target);
  c.alignment.seed = get_seed(al);

  const auto syn = section(j, "synthesis");
  if (syn.contains("model")) c.synthesis.model = synthesis::diffusion_config_from_json(syn.at("model"));
  c.synthesis.pretrain = train_settings_from_json(section(syn, "pretrain"), c.synthesis.pretrain);
  c.synthesis.adapt = train_settings_from_json(section(syn, "adapt"), c.synthesis.adapt);
  c.synthesis.pretrain_dev = syn.value("pretrain_dev", c.synthesis.pretrain_dev);
  c.synthesis.speaker_embedding = syn.value("speaker_embedding", c.synthesis.speaker_embedding);
  c.synthesis.seed = get_seed(syn);

  const auto voc = section(j, "vocoder");
  c.vocoder.kind = voc.value("kind", c.vocoder.kind);
  c.vocoder.iterations = voc.value("iterations", c.vocoder.iterations);
  c.vocoder.command = voc.value("command", c.vocoder.command);
  require(c.vocoder.kind == "griffin_lim" || c.vocoder.kind == "external", ErrorCode::ConfigError,
          "vocoder.kind must be griffin_lim or external");
  require(c.vocoder.iterations >= 1, ErrorCode::ConfigError, "vocoder.iterations must be >= 1");

  const auto ev = section(j, "eval");
  c.eval.seed = ev.value("seed", c.eval.seed);
  c.eval.max_utterances = ev.value("max_utterances", c.eval.max_utterances);

  if (j.contains("systems")) {
    c.systems.clear();
    std::set<std::string> ids;
    for (const auto& s : j.at("systems")) {
      c.systems.push_back(system_spec_from_json(s));
      require(ids.insert(c.systems.back().id).second, ErrorCode::ConfigError,
              "duplicate system id '" + c.systems.back().id + "'");
    }
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::ConfigError, "cannot read config " + path.string());
  const auto j = nlohmann::json::parse(in, nullptr, false);
  require(!j.is_discarded(), ErrorCode::ConfigError, "malformed JSON in " + path.string());
  return experiment_config_from_json(j);
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), ErrorCode::IoError, "cannot write " + path.string());
  out << to_json(c).dump(2) << "\n";
}

std::uint64_t section_seed(const ExperimentConfig& c, const std::optional<std::uint64_t>& override_seed,
                           std::uint64_t tag) {
  return override_seed ? *override_seed : derive_seed(c.seed, tag);
}

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  auto& k = c.corpus;
  k.train_count = 6;
  k.dev_count = 2;
  k.test_count = 2;
  k.target_utterances = 10;
  k.pretrain_speakers = 2;
  k.pretrain_utterances_per_speaker = 8;
  k.synthetic_el_speakers = 1;
  k.synthetic_el_utterances = 8;
  k.parallel_pairs = 8;
  k.min_phones = 4;
  k.max_phones = 6;
  auto& r = c.recognition;
  r.model.dim = 16;
  r.model.heads = 2;
  r.model.ff_dim = 32;
  r.model.encoder_blocks = 1;
  r.model.decoder_blocks = 1;
  r.model.bnf_dim = 16;
  r.stage1 = {1, 4, 1e-3, 0};
  r.stage2 = {1, 4, 1e-3, 0};
  r.stage3 = {1, 4, 1e-3, 0};
  r.stage2_typical = 4;
  c.units.codebook.k = 8;
  c.units.codebook.max_iterations = 5;
  auto& a = c.alignment;
  a.model.dim = 16;
  a.model.heads = 2;
  a.model.ff_dim = 32;
  a.model.encoder_blocks = 1;
  a.model.decoder_blocks = 1;
  a.parallel_vc = a.tts = a.ae = a.ft_synthetic = a.ft_target = {1, 4, 1e-3, 0};
  auto& s = c.synthesis;
  s.model.channels = 8;
  s.model.residual_blocks = 2;
  s.model.steps = 4;
  s.pretrain = s.adapt = {1, 4, 1e-3, 0};
  s.pretrain_dev = 2;
  c.vocoder.iterations = 2;
  return c;
}

}  // namespace elvc::pipeline
