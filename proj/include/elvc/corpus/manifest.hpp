#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "elvc/core/types.hpp"

namespace elvc::corpus {

enum class Split { Train, Dev, Test };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
  std::string utterance_id;
  std::string file_path;  ///< relative to the manifest's directory
  std::string transcript;  ///< space-separated phoneme names
  SpeechType speech_type = SpeechType::Typical;
  std::string speaker_id;
  Split split = Split::Train;
  std::optional<std::string> parallel_id;

  bool operator==(const ManifestEntry&) const = default;
};

/// JSON-lines manifest; one entry object per line.
struct Manifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path path;  ///< file the manifest was loaded from / written to

  const ManifestEntry* find(const std::string& utterance_id) const;
  std::filesystem::path resolve(const ManifestEntry& entry) const;
  std::vector<const ManifestEntry*> select(const std::string& speaker_id, std::optional<Split> split = {}) const;
  std::size_t count(const std::string& speaker_id, Split split) const;
};

void save_manifest(const Manifest& manifest, const std::filesystem::path& path);
Manifest load_manifest(const std::filesystem::path& path);

/// Checks every structural invariant (unique ids, resolvable parallel ids with
/// equal transcripts, parseable transcripts). Returns human-readable problems; empty when valid.
std::vector<std::string> validate_manifest(const Manifest& manifest, bool check_files = true);

}  // namespace elvc::corpus
