#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "elvc/eval/evaluate.hpp"
#include "elvc/pipeline/config.hpp"

namespace elvc::pipeline {

/// Environment variable naming the default checkpoint root.
inline constexpr const char* kCheckpointRootEnv = "ELVC_CHECKPOINT_ROOT";

/// `ELVC_CHECKPOINT_ROOT` when set, else "./elvc_runs".
std::filesystem::path default_checkpoint_root();

/// FNV-1a digest of a file's bytes, hex encoded.
std::string file_digest(const std::filesystem::path& path);

/// A completed stage: <root>/<name>-<hash>/ with stage.json and one artifact file.
struct StageArtifact {
  std::string name;
  std::string hash;
  std::filesystem::path dir;
  std::filesystem::path path;  ///< the artifact itself
  std::string digest;

  nlohmann::json to_json() const;
  static StageArtifact from_json(const nlohmann::json& j);
};

/// Throws IoError when the artifact is missing and StaleArtifact when its stage record or
/// digest no longer matches.
void verify_artifact(const StageArtifact& a);

struct StageRecord {
  std::string name;
  std::string hash;
  bool cached = false;
  double seconds = 0.0;
};

/// Everything needed to run one system end to end.
struct SystemLineage {
  std::string system_id;
  SystemSpec spec;
  std::map<std::string, StageArtifact> artifacts;  ///< keys below
  VocoderSettings vocoder;
  std::string config_hash;

  static constexpr const char* kRecognizer = "recognizer";          ///< BNF extractor (stage 3)
  static constexpr const char* kCerRecognizer = "cer_recognizer";   ///< typical recognizer (stage 1)
  static constexpr const char* kUnits = "units";
  static constexpr const char* kAlignment = "alignment";
  static constexpr const char* kSynthesis = "synthesis";
  static constexpr const char* kSpeaker = "speaker";

  const StageArtifact& artifact(const std::string& key) const;
  bool has(const std::string& key) const { return artifacts.count(key) > 0; }

  nlohmann::json to_json() const;
  static SystemLineage from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static SystemLineage load(const std::filesystem::path& path);
  /// Checks the feature chain, the config hash and every artifact.
  void verify() const;
};

struct ConvertMetadata {
  std::map<std::string, double> stage_seconds;
  double input_seconds = 0.0;
  double output_seconds = 0.0;
  double duration_ratio = 0.0;
  bool truncated = false;

  nlohmann::json to_json() const;
};

/// Loaded models behind a lineage; conversion is deterministic given the seed.
class Converter {
 public:
  explicit Converter(const SystemLineage& lineage);
  ~Converter();
  Converter(const Converter&) = delete;
  Converter& operator=(const Converter&) = delete;

  /// EL waveform in, enhanced waveform out.
  Vector convert(const Vector& waveform, std::uint64_t seed, ConvertMetadata* meta = nullptr) const;
  /// Mel-spectrogram from units through the diffusion decoder and the vocoder.
  Vector synthesize_units(const Matrix& units, std::uint64_t seed) const;
  const SystemLineage& lineage() const { return lineage_; }

 private:
  struct Models;
  SystemLineage lineage_;
  std::unique_ptr<Models> models_;
};

/// Reads `in_wav`, converts it and writes a 16 kHz mono WAV to `out_wav`.
ConvertMetadata convert_file(const SystemLineage& lineage, const std::filesystem::path& in_wav,
                             const std::filesystem::path& out_wav, std::uint64_t seed);

using LogFn = std::function<void(const std::string&)>;

/// Stage-by-stage runner over a content-addressed checkpoint root. Every stage directory name
/// carries the hash of its settings and of all upstream stages, so an unchanged stage is reused
/// and any upstream change produces a fresh directory.
class Experiment {
 public:
  Experiment(ExperimentConfig config, std::filesystem::path root, LogFn log = {});
  ~Experiment();
  Experiment(const Experiment&) = delete;
  Experiment& operator=(const Experiment&) = delete;

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& root() const { return root_; }

  const corpus::Corpus& corpus();
  /// Recognition stage 1, 2 or 3.
  StageArtifact recognizer(int stage);
  StageArtifact units();
  /// "pretrain" or "adapt".
  StageArtifact synthesis(const std::string& phase);
  StageArtifact speaker();
  /// Alignment up to and including `last` along the system's stage sequence.
  StageArtifact alignment(const SystemSpec& system, std::optional<alignment::Stage> last = std::nullopt);
  SystemLineage lineage(const SystemSpec& system);
  /// Converts the target-EL test split (cached per lineage and seed) and scores it.
  eval::SystemEvaluation evaluate(const SystemLineage& lineage);

  const std::vector<StageRecord>& records() const { return records_; }

 private:
  struct Cache;
  using Producer = std::function<void(const std::filesystem::path& artifact, nlohmann::json& meta)>;
  StageArtifact run_stage(const std::string& name, const nlohmann::json& key, const std::string& file,
                          const Producer& produce);
  std::vector<const corpus::ManifestEntry*> test_sources();

  ExperimentConfig config_;
  std::filesystem::path root_;
  LogFn log_;
  std::unique_ptr<Cache> cache_;
  std::vector<StageRecord> records_;
};

/// Ordered alignment stages for a pretraining mode.
std::vector<alignment::Stage> alignment_stages(alignment::PretrainMode mode);

struct ExperimentResult {
  std::vector<SystemLineage> lineages;
  eval::EvalReport report;
  std::vector<StageRecord> stages;
};

struct RunOptions {
  bool evaluate = true;
  std::vector<std::string> systems;  ///< empty runs every configured system
};

/// Runs every stage in order (skipping completed ones), writes <root>/lineages/<id>.json and,
/// when requested, <root>/report.json. A failing stage is rethrown as StageFailure naming it.
ExperimentResult run_experiment(const ExperimentConfig& config, const std::filesystem::path& root,
                                const RunOptions& options = {}, LogFn log = {});

}  // namespace elvc::pipeline
