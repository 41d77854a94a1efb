#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "elvc/corpus/manifest.hpp"
#include "elvc/corpus/synth.hpp"

namespace elvc::corpus {

/// Role -> speaker ids inside a built corpus.
struct CorpusRoles {
  std::string target_typical = "tgt";
  std::string target_el = "tgt_el";
  std::vector<std::string> pretrain_typical;
  std::string synthetic_typical = "tgt_syn";
  std::vector<std::string> synthetic_el;
  std::string parallel_source = "pvc_src";
  std::string parallel_target = "pvc_tgt";
};

struct CorpusConfig {
  std::uint64_t seed = 20240101;
  int min_phones = 8;
  int max_phones = 14;

  SpeakerParams target{"tgt", 125.0, 0.06, 1.0, 0.08, 0.02};
  ElSimulationParams target_el{1.32, 100.0, 0.15, 0, 1.12, 400.0, 0.05, 0.3, 0.7};
  int train_count = 116;
  int dev_count = 40;
  int test_count = 40;
  /// Must equal train + dev + test.
  int target_utterances = 196;

  int pretrain_speakers = 8;
  int pretrain_utterances_per_speaker = 50;

  int synthetic_el_speakers = 4;
  int synthetic_el_utterances = 240;
  double synthetic_corruption_prob = 0.25;

  SpeakerParams parallel_source{"pvc_src", 210.0, 0.07, 1.1, 0.075, 0.03};
  SpeakerParams parallel_target{"pvc_tgt", 105.0, 0.05, 0.94, 0.085, 0.02};
  int parallel_pairs = 300;

  /// Fraction of non-target material held out as dev.
  double aux_dev_fraction = 0.1;
};

nlohmann::json to_json(const CorpusConfig& config);
CorpusConfig corpus_config_from_json(const nlohmann::json& j);
std::string config_hash(const nlohmann::json& j);

struct Corpus {
  Manifest manifest;
  CorpusRoles roles;
  CorpusConfig config;
  std::filesystem::path root;
  /// Speaker voice parameters by speaker id (EL speakers map to their source voice).
  std::map<std::string, SpeakerParams> speakers;
};

/// Builds (or reuses, when an identical build exists) the corpus under `out_dir`:
///   out_dir/manifest.jsonl, out_dir/corpus.json, out_dir/wav/<id>.wav
Corpus build_corpus(const CorpusConfig& config, const std::filesystem::path& out_dir);
Corpus load_corpus(const std::filesystem::path& dir);

/// The pretraining speakers drawn for a config.
std::vector<SpeakerParams> pretrain_speakers(const CorpusConfig& config);
std::vector<ElSimulationParams> synthetic_el_params(const CorpusConfig& config);

}  // namespace elvc::corpus
