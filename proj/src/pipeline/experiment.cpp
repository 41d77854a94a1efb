#include "elvc/pipeline/experiment.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "elvc/core/error.hpp"
#include "elvc/core/matrix_io.hpp"
#include "elvc/core/rng.hpp"
#include "elvc/core/wav.hpp"
#include "elvc/corpus/phonemes.hpp"

namespace elvc::pipeline {

namespace fs = std::filesystem;
using alignment::FeatureType;
using alignment::PretrainMode;
using alignment::Stage;
using clock_type = std::chrono::steady_clock;

namespace {

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::IoError, "cannot read " + path.string());
  auto j = nlohmann::json::parse(in, nullptr, false);
  require(!j.is_discarded(), ErrorCode::IoError, "malformed JSON in " + path.string());
  return j;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

constexpr const char* kStageFile = "stage.json";

std::unique_ptr<synthesis::Vocoder> make_vocoder(const VocoderSettings& v, const fs::path& work_dir) {
  if (v.kind == "external") return std::make_unique<synthesis::ExternalVocoder>(v.command, work_dir);
  return std::make_unique<synthesis::GriffinLimVocoder>(v.iterations);
}

}  // namespace

fs::path default_checkpoint_root() {
  if (const char* env = std::getenv(kCheckpointRootEnv); env != nullptr && *env != '\0') return env;
  return "elvc_runs";
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::IoError, "cannot read " + path.string());
  std::uint64_t h = 1469598103934665603ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

nlohmann::json StageArtifact::to_json() const {
  return {{"name", name}, {"hash", hash}, {"dir", dir.string()}, {"path", path.string()}, {"digest", digest}};
}

StageArtifact StageArtifact::from_json(const nlohmann::json& j) {
  StageArtifact a;
  a.name = j.at("name").get<std::string>();
  a.hash = j.at("hash").get<std::string>();
  a.dir = j.at("dir").get<std::string>();
  a.path = j.at("path").get<std::string>();
  a.digest = j.at("digest").get<std::string>();
  return a;
}

void verify_artifact(const StageArtifact& a) {
  require(fs::exists(a.path), ErrorCode::IoError, a.name + ": missing artifact " + a.path.string());
  const auto record = a.dir / kStageFile;
  require(fs::exists(record), ErrorCode::StaleArtifact, a.name + ": missing stage record in " + a.dir.string());
  const auto j = read_json(record);
  require(j.value("hash", std::string{}) == a.hash, ErrorCode::StaleArtifact,
          a.name + ": config hash changed (" + j.value("hash", std::string{}) + " != " + a.hash + ")");
  require(file_digest(a.path) == a.digest, ErrorCode::StaleArtifact, a.name + ": artifact contents changed");
}

const StageArtifact& SystemLineage::artifact(const std::string& key) const {
  const auto it = artifacts.find(key);
  require(it != artifacts.end(), ErrorCode::ConfigError, "lineage " + system_id + " has no " + key + " artifact");
  return it->second;
}

namespace {

std::string lineage_hash(const SystemLineage& l) {
  nlohmann::json j = {{"spec", to_json(l.spec)},
                      {"vocoder", {{"kind", l.vocoder.kind}, {"iterations", l.vocoder.iterations},
                                   {"command", l.vocoder.command}}}};
  for (const auto& [k, a] : l.artifacts) j["artifacts"][k] = a.hash;
  return corpus::config_hash(j);
}

}  // namespace

nlohmann::json SystemLineage::to_json() const {
  nlohmann::json arts = nlohmann::json::object();
  for (const auto& [k, a] : artifacts) arts[k] = a.to_json();
  return {{"system_id", system_id},
          {"spec", pipeline::to_json(spec)},
          {"inputs", inputs_label(spec)},
          {"outputs", outputs_label(spec)},
          {"pretraining", pretraining_label(spec)},
          {"artifacts", arts},
          {"vocoder", {{"kind", vocoder.kind}, {"iterations", vocoder.iterations}, {"command", vocoder.command}}},
          {"config_hash", config_hash}};
}

SystemLineage SystemLineage::from_json(const nlohmann::json& j) {
  SystemLineage l;
  l.system_id = j.at("system_id").get<std::string>();
  l.spec = system_spec_from_json(j.at("spec"));
  for (const auto& [k, a] : j.at("artifacts").items()) l.artifacts[k] = StageArtifact::from_json(a);
  const auto& v = j.at("vocoder");
  l.vocoder.kind = v.value("kind", l.vocoder.kind);
  l.vocoder.iterations = v.value("iterations", l.vocoder.iterations);
  l.vocoder.command = v.value("command", l.vocoder.command);
  l.config_hash = j.at("config_hash").get<std::string>();
  return l;
}

void SystemLineage::save(const fs::path& path) const { write_json(path, to_json()); }

SystemLineage SystemLineage::load(const fs::path& path) {
  require(fs::exists(path), ErrorCode::IoError, "lineage not found: " + path.string());
  return from_json(read_json(path));
}

void SystemLineage::verify() const {
  require(spec.input != FeatureType::Units && spec.output != FeatureType::Bnf, ErrorCode::ConfigError,
          system_id + ": invalid feature chain");
  require(has(kAlignment) && has(kCerRecognizer), ErrorCode::ConfigError, system_id + ": incomplete lineage");
  if (spec.uses_bnf()) require(has(kRecognizer), ErrorCode::ConfigError, system_id + ": BNF input needs a recognizer");
  if (spec.uses_units()) {
    require(has(kUnits) && has(kSynthesis) && has(kSpeaker), ErrorCode::ConfigError,
            system_id + ": unit output needs units, synthesis and speaker artifacts");
  }
  require(lineage_hash(*this) == config_hash, ErrorCode::StaleArtifact, system_id + ": lineage config hash mismatch");
  for (const auto& [k, a] : artifacts) verify_artifact(a);
}

nlohmann::json ConvertMetadata::to_json() const {
  return {{"stage_seconds", stage_seconds},
          {"input_seconds", input_seconds},
          {"output_seconds", output_seconds},
          {"duration_ratio", duration_ratio},
          {"truncated", truncated}};
}

struct Converter::Models {
  std::unique_ptr<recognition::RecognizerModel> recognizer;
  std::unique_ptr<alignment::AlignmentModel> alignment;
  std::unique_ptr<synthesis::DiffusionDecoder> decoder;
  Vector speaker;
  std::unique_ptr<synthesis::Vocoder> vocoder;
};

Converter::Converter(const SystemLineage& lineage) : lineage_(lineage), models_(std::make_unique<Models>()) {
  lineage_.verify();
  if (lineage_.spec.uses_bnf()) {
    models_->recognizer = recognition::load_recognizer(lineage_.artifact(SystemLineage::kRecognizer).path);
  }
  models_->alignment = alignment::load_alignment(lineage_.artifact(SystemLineage::kAlignment).path);
  if (lineage_.spec.uses_units()) {
    models_->decoder = synthesis::load_decoder(lineage_.artifact(SystemLineage::kSynthesis).path);
    models_->speaker = synthesis::load_embedding(lineage_.artifact(SystemLineage::kSpeaker).path).vector;
  }
  models_->vocoder = make_vocoder(lineage_.vocoder, lineage_.artifact(SystemLineage::kAlignment).dir / "vocoder");
}

Converter::~Converter() = default;

Vector Converter::synthesize_units(const Matrix& units, std::uint64_t seed) const {
  require(models_->decoder != nullptr, ErrorCode::ConfigError, lineage_.system_id + " has no unit decoder");
  const auto mel = synthesis::sample(*models_->decoder, units, models_->speaker, models_->decoder->config().guidance,
                                     seed);
  return models_->vocoder->synthesize(mel);
}

Vector Converter::convert(const Vector& waveform, std::uint64_t seed, ConvertMetadata* meta) const {
  ConvertMetadata local;
  ConvertMetadata& m = meta ? *meta : local;
  auto stage = [&](const std::string& name, auto&& fn) {
    const auto t0 = clock_type::now();
    try {
      auto out = fn();
      m.stage_seconds[name] = seconds_since(t0);
      return out;
    } catch (const Error& e) {
      if (e.code() == ErrorCode::StageFailure) throw;
      fail(ErrorCode::StageFailure, name + ": " + e.what());
    }
  };
  const auto mel = stage("features", [&] { return dsp::mel_spectrogram(waveform); });
  const Matrix src = stage("recognition", [&] {
    return models_->recognizer ? recognition::extract_bnf(*models_->recognizer, mel).frames : Matrix(mel.frames);
  });
  const auto converted = stage("alignment", [&] { return alignment::convert(*models_->alignment, src); });
  m.truncated = converted.truncated;
  const auto out_mel = stage("synthesis", [&] {
    if (!models_->decoder) {
      dsp::MelSpectrogram direct;
      direct.frames = converted.frames;
      direct.n_mels = static_cast<int>(converted.frames.cols());
      return direct;
    }
    return synthesis::sample(*models_->decoder, converted.frames, models_->speaker,
                             models_->decoder->config().guidance, seed);
  });
  Vector out = stage("vocoder", [&] { return models_->vocoder->synthesize(out_mel); });
  m.input_seconds = static_cast<double>(waveform.size()) / kSampleRate;
  m.output_seconds = static_cast<double>(out.size()) / kSampleRate;
  m.duration_ratio = m.input_seconds > 0.0 ? m.output_seconds / m.input_seconds : 0.0;
  return out;
}

ConvertMetadata convert_file(const SystemLineage& lineage, const fs::path& in_wav, const fs::path& out_wav,
                             std::uint64_t seed) {
  const auto audio = read_wav(in_wav);
  require(audio.sample_rate == kSampleRate, ErrorCode::InvalidInput, "input must be 16 kHz: " + in_wav.string());
  Converter conv(lineage);
  ConvertMetadata meta;
  const Vector out = conv.convert(audio.samples, seed, &meta);
  if (out_wav.has_parent_path()) fs::create_directories(out_wav.parent_path());
  write_wav(out_wav, out, kSampleRate);
  return meta;
}

std::vector<Stage> alignment_stages(PretrainMode mode) {
  if (mode == PretrainMode::ParallelVc) return {Stage::PretrainParallelVc, Stage::FtSyntheticEl, Stage::FtTargetEl};
  return {Stage::PretrainTts, Stage::PretrainAe, Stage::FtSyntheticEl, Stage::FtTargetEl};
}

struct Experiment::Cache {
  std::optional<corpus::Corpus> corpus;
  std::string corpus_hash;
  std::map<std::string, Vector> wavs;
  std::map<std::string, dsp::MelSpectrogram> mels;
  std::map<std::string, Matrix> units;
  std::map<std::string, std::map<std::string, Matrix>> bnfs;  ///< recognizer hash -> id -> BNF
  std::map<std::string, std::unique_ptr<recognition::RecognizerModel>> recognizers;
  std::map<std::string, Vector> speakers;
  std::unique_ptr<units::UnitSource> unit_source;
  std::string unit_source_hash;
  std::map<std::string, StageArtifact> stages;
};

Experiment::Experiment(ExperimentConfig config, fs::path root, LogFn log)
    : config_(std::move(config)), root_(std::move(root)), log_(std::move(log)), cache_(std::make_unique<Cache>()) {
  fs::create_directories(root_);
}

Experiment::~Experiment() = default;

StageArtifact Experiment::run_stage(const std::string& name, const nlohmann::json& key, const std::string& file,
                                    const Producer& produce) {
  const std::string hash = corpus::config_hash(nlohmann::json{{"stage", name}, {"key", key}});
  if (const auto it = cache_->stages.find(hash); it != cache_->stages.end()) return it->second;
  StageArtifact a;
  a.name = name;
  a.hash = hash;
  a.dir = root_ / (name + "-" + hash);
  a.path = a.dir / file;
  const auto record = a.dir / kStageFile;
  if (fs::exists(record) && fs::exists(a.path)) {
    const auto j = read_json(record);
    require(j.value("hash", std::string{}) == hash, ErrorCode::StaleArtifact,
            name + ": stage record hash does not match its directory");
    a.digest = file_digest(a.path);
    require(j.value("digest", std::string{}) == a.digest, ErrorCode::StaleArtifact,
            name + ": artifact " + a.path.string() + " was modified after training");
    records_.push_back({name, hash, true, 0.0});
    if (log_) log_("[cached] " + name + " " + a.dir.string());
    cache_->stages[hash] = a;
    return a;
  }
  if (log_) log_("[run] " + name);
  fs::create_directories(a.dir);
  fs::remove(record);
  const auto t0 = clock_type::now();
  nlohmann::json meta = nlohmann::json::object();
  try {
    produce(a.path, meta);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::StageFailure || e.code() == ErrorCode::ConfigError ||
        e.code() == ErrorCode::StaleArtifact) {
      throw;
    }
    fail(ErrorCode::StageFailure, name + ": " + e.what());
  } catch (const std::exception& e) {
    fail(ErrorCode::StageFailure, name + ": " + e.what());
  }
  require(fs::exists(a.path), ErrorCode::StageFailure, name + ": produced no artifact");
  const double secs = seconds_since(t0);
  a.digest = file_digest(a.path);
  write_json(record, {{"stage", name}, {"hash", hash}, {"key", key}, {"artifact", file}, {"digest", a.digest},
                      {"seconds", secs}, {"meta", meta}});
  records_.push_back({name, hash, false, secs});
  if (log_) {
    std::ostringstream s;
    s << "[done] " << name << " in " << std::fixed << std::setprecision(1) << secs << " s";
    log_(s.str());
  }
  cache_->stages[hash] = a;
  return a;
}

const corpus::Corpus& Experiment::corpus() {
  if (cache_->corpus) return *cache_->corpus;
  const auto cfg = corpus::to_json(config_.corpus);
  const std::string hash = corpus::config_hash(cfg);
  const auto dir = root_ / ("corpus-" + hash);
  const bool existed = fs::exists(dir / "corpus.json");
  const auto t0 = clock_type::now();
  try {
    cache_->corpus = corpus::build_corpus(config_.corpus, dir);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigError) throw;
    fail(ErrorCode::StageFailure, std::string("corpus: ") + e.what());
  }
  cache_->corpus_hash = hash;
  records_.push_back({"corpus", hash, existed, existed ? 0.0 : seconds_since(t0)});
  if (log_) log_(std::string(existed ? "[cached] " : "[done] ") + "corpus " + dir.string());
  return *cache_->corpus;
}

namespace {

std::vector<const corpus::ManifestEntry*> select(const corpus::Corpus& c, const std::vector<std::string>& speakers,
                                                 corpus::Split split) {
  std::vector<const corpus::ManifestEntry*> out;
  for (const auto& s : speakers) {
    for (const auto* e : c.manifest.select(s, split)) out.push_back(e);
  }
  return out;
}

const corpus::ManifestEntry& parallel_of(const corpus::Corpus& c, const corpus::ManifestEntry& e) {
  require(e.parallel_id.has_value(), ErrorCode::InvalidInput, e.utterance_id + " has no parallel reference");
  const auto* p = c.manifest.find(*e.parallel_id);
  require(p != nullptr, ErrorCode::InvalidInput, "missing parallel entry " + *e.parallel_id);
  return *p;
}

}  // namespace

StageArtifact Experiment::recognizer(int stage) {
  require(stage >= 1 && stage <= 3, ErrorCode::ConfigError, "recognition stage must be 1, 2 or 3");
  const auto& c = corpus();
  const auto& rs = config_.recognition;
  recognition::RecognizerConfig model_cfg = rs.model;
  model_cfg.seed = section_seed(config_, rs.seed, 0x524543);
  const TrainSettings& ts = stage == 1 ? rs.stage1 : stage == 2 ? rs.stage2 : rs.stage3;
  const recognition::LossMode mode =
      stage == 1 ? recognition::LossMode::Standard : stage == 2 ? rs.stage2_mode : rs.stage3_mode;
  nlohmann::json key = {{"train", to_json(ts)}, {"mode", recognition::to_string(mode)}};
  if (stage == 1) {
    key["model"] = to_json(model_cfg);
    key["corpus"] = cache_->corpus_hash;
  } else {
    key["previous"] = recognizer(stage - 1).hash;
    if (stage == 2) key["typical"] = rs.stage2_typical;
  }
  const std::string name = "recognition_stage" + std::to_string(stage);
  return run_stage(name, key, "recognizer.ckpt", [&, stage](const fs::path& out, nlohmann::json& meta) {
    using corpus::Split;
    std::unique_ptr<recognition::RecognizerModel> model;
    if (stage == 1) {
      model = std::make_unique<recognition::RecognizerModel>(model_cfg);
    } else {
      model = recognition::load_recognizer(recognizer(stage - 1).path);
    }
    std::vector<const corpus::ManifestEntry*> train, dev;
    const auto& r = c.roles;
    if (stage == 1) {
      train = select(c, r.pretrain_typical, Split::Train);
      dev = select(c, r.pretrain_typical, Split::Dev);
    } else if (stage == 2) {
      train = select(c, r.synthetic_el, Split::Train);
      for (const auto* e : c.manifest.select(r.target_typical, Split::Train)) train.push_back(e);
      const auto typical = select(c, r.pretrain_typical, Split::Train);
      const auto n = std::min<std::size_t>(typical.size(), static_cast<std::size_t>(std::max(0, rs.stage2_typical)));
      train.insert(train.end(), typical.begin(), typical.begin() + static_cast<std::ptrdiff_t>(n));
      dev = select(c, r.synthetic_el, Split::Dev);
      for (const auto* e : c.manifest.select(r.target_typical, Split::Dev)) dev.push_back(e);
    } else {
      train = c.manifest.select(r.target_el, Split::Train);
      dev = c.manifest.select(r.target_el, Split::Dev);
    }
    auto batch = [&](const std::vector<const corpus::ManifestEntry*>& entries) {
      recognition::RecognitionBatch b;
      for (const auto* e : entries) {
        b.push_back(dsp::mel_spectrogram(read_wav(c.manifest.resolve(*e)).samples),
                    corpus::parse_transcript(e->transcript), e->speech_type);
      }
      return b;
    };
    recognition::RecognitionRecipe recipe;
    recipe.name = "stage" + std::to_string(stage);
    recipe.mode = mode;
    recipe.epochs = ts.epochs;
    recipe.batch_size = ts.batch_size;
    recipe.lr = ts.lr;
    recipe.warmup_steps = ts.warmup_steps;
    recipe.seed = derive_seed(model_cfg.seed, static_cast<std::uint64_t>(stage));
    const auto log = recognition::train_stage(*model, recipe, batch(train), batch(dev), std::nullopt,
                                              [&](int ep, double tl, double dl) {
                                                if (!log_) return;
                                                std::ostringstream s;
                                                s << "  " << recipe.name << " epoch " << ep << " train " << tl
                                                  << " dev " << dl;
                                                log_(s.str());
                                              });
    meta["train_loss"] = log.train_loss;
    meta["dev_loss"] = log.dev_loss;
    recognition::save_recognizer(out, *model, {{"stage", stage}});
  });
}

StageArtifact Experiment::units() {
  const auto& c = corpus();
  const auto& us = config_.units;
  nlohmann::json key = {{"kind", us.kind}, {"corpus", cache_->corpus_hash}};
  if (us.kind == "external") {
    key["dir"] = us.external_dir;
    key["dim"] = us.external_dim;
    return run_stage("units", key, "external.json", [&](const fs::path& out, nlohmann::json&) {
      units::ExternalUnitAdapter adapter(us.external_dir, us.external_dim);
      adapter.verify_complete(c.manifest);
      write_json(out, {{"dir", us.external_dir}, {"dim", us.external_dim}});
    });
  }
  key["k"] = us.codebook.k;
  key["tau"] = us.codebook.tau;
  key["pool"] = us.codebook.pool;
  key["max_iterations"] = us.codebook.max_iterations;
  key["max_fit_frames"] = us.codebook.max_fit_frames;
  key["seed"] = us.codebook.seed;
  return run_stage("units", key, "codebook.ckpt", [&](const fs::path& out, nlohmann::json& meta) {
    const auto cb = units::fit_unit_extractor(c.manifest, us.codebook);
    meta["inertia"] = cb.inertia;
    meta["iterations"] = cb.iterations;
    units::save_codebook(out, cb);
  });
}

StageArtifact Experiment::speaker() {
  const auto& c = corpus();
  const auto& ss = config_.synthesis;
  nlohmann::json key = {{"source", ss.speaker_embedding}, {"dim", ss.model.speaker_dim},
                        {"corpus", cache_->corpus_hash}};
  return run_stage("speaker", key, "speaker.emat", [&](const fs::path& out, nlohmann::json& meta) {
    synthesis::SpeakerEmbedding e;
    if (ss.speaker_embedding.empty()) {
      std::vector<Vector> wavs;
      for (const auto* x : c.manifest.select(c.roles.target_typical, corpus::Split::Train)) {
        wavs.push_back(read_wav(c.manifest.resolve(*x)).samples);
      }
      e = synthesis::speaker_embedding(wavs, ss.model.speaker_dim);
      meta["source"] = "toy_stats";
    } else {
      e = synthesis::load_external_embedding(fs::path(ss.speaker_embedding) / (c.roles.target_typical + ".emat"));
      require(e.vector.size() == ss.model.speaker_dim, ErrorCode::ConfigError, "speaker embedding dim mismatch");
      meta["source"] = "external";
    }
    synthesis::save_embedding(out, e);
  });
}

StageArtifact Experiment::synthesis(const std::string& phase) {
  require(phase == "pretrain" || phase == "adapt", ErrorCode::ConfigError, "synthesis phase must be pretrain or adapt");
  const auto& c = corpus();
  const auto& ss = config_.synthesis;
  const StageArtifact unit_art = units();
  synthesis::DiffusionConfig model_cfg = ss.model;
  model_cfg.seed = section_seed(config_, ss.seed, 0x53594e);
  const TrainSettings& ts = phase == "pretrain" ? ss.pretrain : ss.adapt;
  nlohmann::json key = {{"train", to_json(ts)}};
  StageArtifact previous;
  if (phase == "pretrain") {
    key["model"] = synthesis::to_json(model_cfg);
    key["units"] = unit_art.hash;
    key["speaker_source"] = ss.speaker_embedding;
    key["dev"] = ss.pretrain_dev;
  } else {
    previous = synthesis("pretrain");
    key["previous"] = previous.hash;
    key["speaker"] = speaker().hash;
  }
  return run_stage("synthesis_" + phase, key, "decoder.ckpt", [&](const fs::path& out, nlohmann::json& meta) {
    using corpus::Split;
    const auto& source = [&]() -> const units::UnitSource& {
      if (!cache_->unit_source || cache_->unit_source_hash != unit_art.hash) {
        if (config_.units.kind == "external") {
          cache_->unit_source = std::make_unique<units::ExternalUnitAdapter>(config_.units.external_dir,
                                                                             config_.units.external_dim);
        } else {
          cache_->unit_source = std::make_unique<units::CodebookUnitSource>(units::load_codebook(unit_art.path));
        }
        cache_->unit_source_hash = unit_art.hash;
      }
      return *cache_->unit_source;
    }();
    auto embed = [&](const std::string& spk) -> const Vector& {
      auto it = cache_->speakers.find(spk);
      if (it != cache_->speakers.end()) return it->second;
      Vector v;
      if (ss.speaker_embedding.empty()) {
        std::vector<Vector> wavs;
        for (const auto* x : c.manifest.select(spk, Split::Train)) wavs.push_back(read_wav(c.manifest.resolve(*x)).samples);
        v = synthesis::speaker_embedding(wavs, ss.model.speaker_dim).vector;
      } else {
        v = synthesis::load_external_embedding(fs::path(ss.speaker_embedding) / (spk + ".emat")).vector;
      }
      return cache_->speakers.emplace(spk, std::move(v)).first->second;
    };
    auto examples = [&](const std::vector<const corpus::ManifestEntry*>& entries, const Vector* speaker_override) {
      std::vector<synthesis::SynthesisExample> v;
      for (const auto* e : entries) {
        const Vector wav = read_wav(c.manifest.resolve(*e)).samples;
        v.push_back({dsp::mel_spectrogram(wav).frames, source.units(c.manifest, *e).frames,
                     speaker_override ? *speaker_override : embed(e->speaker_id)});
      }
      return v;
    };
    synthesis::SynthesisRecipe recipe;
    recipe.phase = phase;
    recipe.epochs = ts.epochs;
    recipe.batch_size = ts.batch_size;
    recipe.lr = ts.lr;
    recipe.warmup_steps = ts.warmup_steps;
    recipe.seed = derive_seed(model_cfg.seed, phase == "pretrain" ? 1 : 2);
    auto cb = [&](int ep, double tl, double dl) {
      if (!log_) return;
      std::ostringstream s;
      s << "  synthesis " << phase << " epoch " << ep << " train " << tl << " dev " << dl;
      log_(s.str());
    };
    synthesis::TrainLog log;
    if (phase == "pretrain") {
      std::vector<std::string> speakers = c.roles.pretrain_typical;
      speakers.push_back(c.roles.parallel_source);
      speakers.push_back(c.roles.parallel_target);
      auto dev_entries = select(c, speakers, Split::Dev);
      if (dev_entries.size() > static_cast<std::size_t>(std::max(0, ss.pretrain_dev))) {
        dev_entries.resize(static_cast<std::size_t>(std::max(0, ss.pretrain_dev)));
      }
      model_cfg.unit_dim = static_cast<int>(source.dim());
      synthesis::DiffusionDecoder decoder(model_cfg);
      log = synthesis::pretrain_multispeaker(decoder, recipe, examples(select(c, speakers, Split::Train), nullptr),
                                             examples(dev_entries, nullptr), cb);
      synthesis::save_decoder(out, decoder, {{"phase", phase}});
    } else {
      auto decoder = synthesis::load_decoder(previous.path);
      const Vector target = synthesis::load_embedding(speaker().path).vector;
      log = synthesis::adapt_fewshot(*decoder, recipe,
                                     examples(c.manifest.select(c.roles.target_typical, Split::Train), &target),
                                     examples(c.manifest.select(c.roles.target_typical, Split::Dev), &target), cb);
      synthesis::save_decoder(out, *decoder, {{"phase", phase}});
    }
    meta["train_loss"] = log.train_loss;
    meta["dev_loss"] = log.dev_loss;
    meta["null_condition_uses"] = log.null_condition_uses;
  });
}

StageArtifact Experiment::alignment(const SystemSpec& system, std::optional<Stage> last) {
  const auto& c = corpus();
  const auto& as = config_.alignment;
  const auto stages = alignment_stages(system.pretrain);
  if (!last) last = stages.back();
  require(std::find(stages.begin(), stages.end(), *last) != stages.end(), ErrorCode::ConfigError,
          alignment::to_string(*last) + " is not part of " + alignment::to_string(system.pretrain) + " training");

  std::optional<StageArtifact> rec_art, unit_art;
  if (system.uses_bnf()) rec_art = recognizer(3);
  if (system.uses_units()) unit_art = units();

  alignment::AlignmentConfig model_cfg = as.model;
  model_cfg.input = system.input;
  model_cfg.output = system.output;
  model_cfg.input_dim = system.uses_bnf() ? config_.recognition.model.bnf_dim : config_.recognition.model.n_mels;
  model_cfg.output_dim = system.uses_units() ? (config_.units.kind == "external" ? config_.units.external_dim
                                                                                 : config_.units.codebook.k)
                                             : config_.recognition.model.n_mels;
  model_cfg.seed = section_seed(config_, as.seed, 0x414c47);

  auto settings = [&](Stage s) -> const TrainSettings& {
    switch (s) {
      case Stage::PretrainParallelVc: return as.parallel_vc;
      case Stage::PretrainTts: return as.tts;
      case Stage::PretrainAe: return as.ae;
      case Stage::FtSyntheticEl: return as.ft_synthetic;
      case Stage::FtTargetEl: return as.ft_target;
    }
    return as.ft_target;
  };

  std::optional<StageArtifact> previous;
  for (Stage stage : stages) {
    nlohmann::json key = {{"train", to_json(settings(stage))}};
    if (!previous) {
      key["model"] = alignment::to_json(model_cfg);
      key["corpus"] = cache_->corpus_hash;
      if (rec_art) key["recognizer"] = rec_art->hash;
      if (unit_art) key["units"] = unit_art->hash;
    } else {
      key["previous"] = previous->hash;
    }
    const auto prev = previous;
    const StageArtifact art = run_stage(
        "alignment_" + alignment::to_string(stage), key, "alignment.ckpt",
        [&, stage, prev](const fs::path& out, nlohmann::json& meta) {
          using corpus::Split;
          const recognition::RecognizerModel* rec = nullptr;
          if (rec_art) {
            auto& slot = cache_->recognizers[rec_art->hash];
            if (!slot) slot = recognition::load_recognizer(rec_art->path);
            rec = slot.get();
          }
          const units::UnitSource* source = nullptr;
          if (unit_art) {
            if (!cache_->unit_source || cache_->unit_source_hash != unit_art->hash) {
              if (config_.units.kind == "external") {
                cache_->unit_source = std::make_unique<units::ExternalUnitAdapter>(config_.units.external_dir,
                                                                                   config_.units.external_dim);
              } else {
                cache_->unit_source =
                    std::make_unique<units::CodebookUnitSource>(units::load_codebook(unit_art->path));
              }
              cache_->unit_source_hash = unit_art->hash;
            }
            source = cache_->unit_source.get();
          }
          auto mel_of = [&](const corpus::ManifestEntry& e) -> const dsp::MelSpectrogram& {
            auto it = cache_->mels.find(e.utterance_id);
            if (it != cache_->mels.end()) return it->second;
            return cache_->mels.emplace(e.utterance_id, dsp::mel_spectrogram(read_wav(c.manifest.resolve(e)).samples))
                .first->second;
          };
          auto input_of = [&](const corpus::ManifestEntry& e) -> Matrix {
            if (!rec) return mel_of(e).frames;
            auto& per = cache_->bnfs[rec_art->hash];
            auto it = per.find(e.utterance_id);
            if (it != per.end()) return it->second;
            return per.emplace(e.utterance_id, recognition::extract_bnf(*rec, mel_of(e)).frames).first->second;
          };
          auto output_of = [&](const corpus::ManifestEntry& e) -> Matrix {
            if (!source) return mel_of(e).frames;
            auto it = cache_->units.find(e.utterance_id);
            if (it != cache_->units.end()) return it->second;
            return cache_->units.emplace(e.utterance_id, source->units(c.manifest, e).frames).first->second;
          };
          auto pairs = [&](Split split) {
            std::vector<alignment::SequencePair> v;
            auto add = [&](const corpus::ManifestEntry& src, const corpus::ManifestEntry& tgt) {
              v.push_back({input_of(src), output_of(tgt), corpus::parse_transcript(tgt.transcript)});
            };
            const auto& r = c.roles;
            switch (stage) {
              case Stage::PretrainParallelVc:
                for (const auto* e : c.manifest.select(r.parallel_source, split)) add(*e, parallel_of(c, *e));
                break;
              case Stage::PretrainTts:
              case Stage::PretrainAe:
                for (const auto* e : c.manifest.select(r.parallel_target, split)) add(*e, *e);
                break;
              case Stage::FtSyntheticEl:
                for (const auto* e : select(c, r.synthetic_el, split)) add(*e, parallel_of(c, *e));
                break;
              case Stage::FtTargetEl:
                for (const auto* e : c.manifest.select(r.target_el, split)) add(*e, parallel_of(c, *e));
                break;
            }
            return v;
          };
          const auto train = pairs(Split::Train);
          const auto dev = pairs(Split::Dev);
          std::unique_ptr<alignment::AlignmentModel> model;
          if (prev) {
            model = alignment::load_alignment(prev->path);
          } else {
            model = std::make_unique<alignment::AlignmentModel>(model_cfg);
            model->fit_output_normalization(train);
          }
          const auto& ts = settings(stage);
          alignment::AlignmentRecipe recipe;
          recipe.stage = stage;
          recipe.epochs = ts.epochs;
          recipe.batch_size = ts.batch_size;
          recipe.lr = ts.lr;
          recipe.warmup_steps = ts.warmup_steps;
          recipe.seed = derive_seed(model_cfg.seed, static_cast<std::uint64_t>(stage) + 1);
          const auto log = alignment::train_stage(*model, recipe, train, dev, std::nullopt,
                                                  [&](int ep, double tl, double dl) {
                                                    if (!log_) return;
                                                    std::ostringstream s;
                                                    s << "  " << alignment::to_string(stage) << " epoch " << ep
                                                      << " train " << tl << " dev " << dl;
                                                    log_(s.str());
                                                  });
          meta["train_loss"] = log.train_loss;
          meta["dev_loss"] = log.dev_loss;
          alignment::save_alignment(out, *model);
        });
    previous = art;
    if (stage == *last) break;
  }
  return *previous;
}

SystemLineage Experiment::lineage(const SystemSpec& system) {
  SystemLineage l;
  l.system_id = system.id;
  l.spec = system;
  l.vocoder = config_.vocoder;
  l.artifacts[SystemLineage::kCerRecognizer] = recognizer(1);
  if (system.uses_bnf()) l.artifacts[SystemLineage::kRecognizer] = recognizer(3);
  if (system.uses_units()) {
    l.artifacts[SystemLineage::kUnits] = units();
    l.artifacts[SystemLineage::kSynthesis] = synthesis("adapt");
    l.artifacts[SystemLineage::kSpeaker] = speaker();
  }
  l.artifacts[SystemLineage::kAlignment] = alignment(system);
  l.config_hash = lineage_hash(l);
  l.save(root_ / "lineages" / (system.id + ".json"));
  return l;
}

std::vector<const corpus::ManifestEntry*> Experiment::test_sources() {
  const auto& c = corpus();
  auto sources = c.manifest.select(c.roles.target_el, corpus::Split::Test);
  if (config_.eval.max_utterances > 0 && sources.size() > static_cast<std::size_t>(config_.eval.max_utterances)) {
    sources.resize(static_cast<std::size_t>(config_.eval.max_utterances));
  }
  return sources;
}

eval::SystemEvaluation Experiment::evaluate(const SystemLineage& lineage) {
  const auto& c = corpus();
  const auto sources = test_sources();
  nlohmann::json key = {{"lineage", lineage.config_hash}, {"seed", config_.eval.seed},
                        {"max_utterances", config_.eval.max_utterances}};
  const eval::SystemDescriptor desc{lineage.system_id, inputs_label(lineage.spec), outputs_label(lineage.spec),
                                    pretraining_label(lineage.spec)};
  const auto art = run_stage("evaluation", key, "evaluation.json", [&](const fs::path& out, nlohmann::json&) {
    Converter conv(lineage);
    const auto dir = out.parent_path() / "wav";
    fs::create_directories(dir);
    nlohmann::json ratios = nlohmann::json::object();
    for (const auto* e : sources) {
      ConvertMetadata meta;
      const Vector wav = conv.convert(read_wav(c.manifest.resolve(*e)).samples,
                                      derive_seed(config_.eval.seed, std::hash<std::string>{}(e->utterance_id)), &meta);
      write_wav(dir / (e->utterance_id + ".wav"), wav, kSampleRate);
      ratios[e->utterance_id] = meta.duration_ratio;
    }
    const auto cer_model = recognition::load_recognizer(lineage.artifact(SystemLineage::kCerRecognizer).path);
    const auto result = eval::evaluate_system(desc, c.manifest, sources, dir, *cer_model);
    eval::EvalReport rep;
    rep.rows.push_back(result.row);
    nlohmann::json utts = nlohmann::json::array();
    for (const auto& u : result.utterances) {
      utts.push_back({{"utterance_id", u.utterance_id}, {"mcd_db", u.mcd_db}, {"edits", u.edits},
                      {"ref_length", u.ref_length}, {"voiced_pairs", u.voiced_pairs},
                      {"duration_ratio", ratios.at(u.utterance_id)}});
    }
    write_json(out, {{"report", rep.to_json()}, {"utterances", utts}});
  });
  const auto j = read_json(art.path);
  eval::SystemEvaluation result;
  result.row = eval::EvalReport::from_json(j.at("report")).rows.at(0);
  for (const auto& u : j.at("utterances")) {
    result.utterances.push_back({u.at("utterance_id").get<std::string>(), u.at("mcd_db").get<double>(),
                                 u.at("edits").get<std::size_t>(), u.at("ref_length").get<std::size_t>(),
                                 u.at("voiced_pairs").get<std::size_t>()});
  }
  return result;
}

ExperimentResult run_experiment(const ExperimentConfig& config, const fs::path& root, const RunOptions& options,
                                LogFn log) {
  Experiment exp(config, root, std::move(log));
  std::vector<SystemSpec> systems;
  if (options.systems.empty()) {
    systems = config.systems;
  } else {
    for (const auto& id : options.systems) systems.push_back(config.system(id));
  }
  require(!systems.empty(), ErrorCode::ConfigError, "no systems configured");
  ExperimentResult result;
  exp.corpus();
  for (int s = 1; s <= 3; ++s) exp.recognizer(s);
  const bool any_units = std::any_of(systems.begin(), systems.end(), [](const SystemSpec& s) { return s.uses_units(); });
  if (any_units) {
    exp.units();
    exp.synthesis("adapt");
  }
  for (const auto& s : systems) result.lineages.push_back(exp.lineage(s));
  if (options.evaluate) {
    for (const auto& l : result.lineages) result.report.rows.push_back(exp.evaluate(l).row);
    result.report.save(root / "report.json");
  }
  result.stages = exp.records();
  return result;
}

}  // namespace elvc::pipeline
