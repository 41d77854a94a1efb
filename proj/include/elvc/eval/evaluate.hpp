#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "elvc/corpus/manifest.hpp"
#include "elvc/eval/report.hpp"
#include "elvc/recognition/recognizer.hpp"

namespace elvc::eval {

struct SystemDescriptor {
  std::string system_id;
  std::string inputs;
  std::string outputs;
  std::string pretraining;
};

/// Metrics of one converted utterance against its reference.
struct UtteranceScore {
  std::string utterance_id;
  double mcd_db = 0.0;
  std::size_t edits = 0;
  std::size_t ref_length = 0;
  std::size_t voiced_pairs = 0;
};

struct SystemEvaluation {
  EvalRow row;
  std::vector<UtteranceScore> utterances;
};

/// Scores `outputs_dir/<source id>.wav` for every source entry against the source's parallel
/// reference (the source itself when it has none). CER uses greedy decoding with `recognizer`;
/// F0 statistics pool the co-voiced pairs of all utterances along the mcep DTW paths.
SystemEvaluation evaluate_system(const SystemDescriptor& system, const corpus::Manifest& manifest,
                                 std::span<const corpus::ManifestEntry* const> sources,
                                 const std::filesystem::path& outputs_dir,
                                 const recognition::RecognizerModel& recognizer);

}  // namespace elvc::eval
