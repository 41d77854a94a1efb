#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "elvc/alignment/alignment.hpp"
#include "elvc/corpus/build.hpp"
#include "elvc/recognition/recognizer.hpp"
#include "elvc/synthesis/diffusion.hpp"
#include "elvc/units/units.hpp"

namespace elvc::pipeline {

/// Optimizer schedule shared by every trainable stage.
struct TrainSettings {
  int epochs = 10;
  int batch_size = 8;
  double lr = 1e-3;
  int warmup_steps = 50;
};

struct RecognitionSettings {
  recognition::RecognizerConfig model;
  TrainSettings stage1{12, 8, 2e-3, 50};
  TrainSettings stage2{6, 8, 3e-4, 50};
  TrainSettings stage3{8, 8, 5e-4, 50};
  recognition::LossMode stage2_mode = recognition::LossMode::Intermediate;
  recognition::LossMode stage3_mode = recognition::LossMode::Standard;
  /// Typical pretraining utterances mixed into the intermediate stage.
  int stage2_typical = 120;
  std::optional<std::uint64_t> seed;
};

struct UnitSettings {
  std::string kind = "codebook";  ///< "codebook" or "external"
  units::UnitConfig codebook;
  std::string external_dir;
  int external_dim = 64;
};

struct AlignmentSettings {
  alignment::AlignmentConfig model;  ///< input/output kinds and dims are set per system
  TrainSettings parallel_vc{50, 8, 2e-3, 100};
  TrainSettings tts{50, 8, 2e-3, 100};
  TrainSettings ae{20, 8, 1e-3, 100};
  TrainSettings ft_synthetic{20, 8, 5e-4, 100};
  TrainSettings ft_target{20, 8, 5e-4, 100};
  std::optional<std::uint64_t> seed;
};

struct SynthesisSettings {
  synthesis::DiffusionConfig model;  ///< unit_dim is set from the unit source
  TrainSettings pretrain{15, 8, 2e-3, 100};
  TrainSettings adapt{10, 8, 5e-4, 0};
  int pretrain_dev = 40;
  std::string speaker_embedding;  ///< empty: TOY_STATS from target training audio; else an external dump
  std::optional<std::uint64_t> seed;
};

struct VocoderSettings {
  std::string kind = "griffin_lim";  ///< "griffin_lim" or "external"
  int iterations = 32;
  std::string command;
};

struct EvalSettings {
  std::uint64_t seed = 11;
  int max_utterances = 0;  ///< 0 evaluates the whole test split
};

struct SystemSpec {
  std::string id;
  alignment::FeatureType input = alignment::FeatureType::Bnf;
  alignment::FeatureType output = alignment::FeatureType::Units;
  alignment::PretrainMode pretrain = alignment::PretrainMode::ParallelVc;

  bool uses_bnf() const { return input == alignment::FeatureType::Bnf; }
  bool uses_units() const { return output == alignment::FeatureType::Units; }
};

/// The five reference configurations: mel/mel TTS-AE, mel/mel parallel VC, BNF/units TTS-AE,
/// BNF/units parallel VC, BNF/mel parallel VC.
std::vector<SystemSpec> default_systems();

std::string inputs_label(const SystemSpec& s);
std::string outputs_label(const SystemSpec& s);
std::string pretraining_label(const SystemSpec& s);

/// One tree-structured configuration for a whole experiment.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  corpus::CorpusConfig corpus;
  RecognitionSettings recognition;
  UnitSettings units;
  AlignmentSettings alignment;
  SynthesisSettings synthesis;
  VocoderSettings vocoder;
  EvalSettings eval;
  std::vector<SystemSpec> systems = default_systems();

  const SystemSpec& system(const std::string& id) const;
};

nlohmann::json to_json(const TrainSettings& t);
TrainSettings train_settings_from_json(const nlohmann::json& j, TrainSettings defaults);
nlohmann::json to_json(const SystemSpec& s);
SystemSpec system_spec_from_json(const nlohmann::json& j);

nlohmann::json to_json(const ExperimentConfig& c);
/// Missing keys keep their defaults; unknown top-level sections raise ConfigError.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const ExperimentConfig& c);

/// Stage-specific seed: the section override when present, else derived from the global seed.
std::uint64_t section_seed(const ExperimentConfig& c, const std::optional<std::uint64_t>& override_seed,
                           std::uint64_t tag);

/// Small sizes for smoke runs of the whole pipeline.
ExperimentConfig tiny_config();

}  // namespace elvc::pipeline
