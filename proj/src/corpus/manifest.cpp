#include "elvc/corpus/manifest.hpp"

#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "elvc/core/error.hpp"
#include "elvc/corpus/phonemes.hpp"

namespace elvc::corpus {

const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "dev") return Split::Dev;
  if (s == "test") return Split::Test;
  fail(ErrorCode::ConfigError, "unknown split '" + s + "'");
}

const ManifestEntry* Manifest::find(const std::string& utterance_id) const {
  for (const auto& e : entries) {
    if (e.utterance_id == utterance_id) return &e;
  }
  return nullptr;
}

std::filesystem::path Manifest::resolve(const ManifestEntry& entry) const {
  const std::filesystem::path p(entry.file_path);
  if (p.is_absolute()) return p;
  return path.has_parent_path() ? path.parent_path() / p : p;
}

std::vector<const ManifestEntry*> Manifest::select(const std::string& speaker_id, std::optional<Split> split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.speaker_id == speaker_id && (!split || e.split == *split)) out.push_back(&e);
  }
  return out;
}

std::size_t Manifest::count(const std::string& speaker_id, Split split) const {
  return select(speaker_id, split).size();
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), ErrorCode::IoError, "cannot write manifest " + path.string());
  for (const auto& e : manifest.entries) {
    nlohmann::json j{{"utterance_id", e.utterance_id},
                     {"file_path", e.file_path},
                     {"transcript", e.transcript},
                     {"speech_type", to_string(e.speech_type)},
                     {"speaker_id", e.speaker_id},
                     {"split", to_string(e.split)}};
    if (e.parallel_id) j["parallel_id"] = *e.parallel_id;
    out << j.dump() << '\n';
  }
  require(out.good(), ErrorCode::IoError, "manifest write failed " + path.string());
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::IoError, "cannot open manifest " + path.string());
  Manifest m;
  m.path = path;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.utterance_id = j.at("utterance_id").get<std::string>();
      e.file_path = j.at("file_path").get<std::string>();
      e.transcript = j.at("transcript").get<std::string>();
      e.speech_type = speech_type_from_string(j.at("speech_type").get<std::string>());
      e.speaker_id = j.at("speaker_id").get<std::string>();
      e.split = split_from_string(j.at("split").get<std::string>());
      if (j.contains("parallel_id") && !j.at("parallel_id").is_null()) {
        e.parallel_id = j.at("parallel_id").get<std::string>();
      }
      m.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      fail(ErrorCode::ConfigError, path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return m;
}

std::vector<std::string> validate_manifest(const Manifest& manifest, bool check_files) {
  std::vector<std::string> problems;
  std::map<std::string, const ManifestEntry*> by_id;
  for (const auto& e : manifest.entries) {
    if (!by_id.emplace(e.utterance_id, &e).second) problems.push_back("duplicate utterance id " + e.utterance_id);
    try {
      if (parse_transcript(e.transcript).empty()) problems.push_back(e.utterance_id + ": empty transcript");
    } catch (const Error& err) {
      problems.push_back(e.utterance_id + ": " + err.what());
    }
    if (check_files && !std::filesystem::exists(manifest.resolve(e))) {
      problems.push_back(e.utterance_id + ": missing file " + manifest.resolve(e).string());
    }
  }
  for (const auto& e : manifest.entries) {
    if (!e.parallel_id) continue;
    auto it = by_id.find(*e.parallel_id);
    if (it == by_id.end()) {
      problems.push_back(e.utterance_id + ": parallel_id " + *e.parallel_id + " not found");
      continue;
    }
    const ManifestEntry& partner = *it->second;
    if (e.speech_type == SpeechType::El && partner.speech_type != SpeechType::Typical) {
      problems.push_back(e.utterance_id + ": parallel partner " + partner.utterance_id + " is not TYPICAL");
    }
    if (partner.transcript != e.transcript) {
      problems.push_back(e.utterance_id + ": transcript differs from parallel partner " + partner.utterance_id);
    }
  }
  return problems;
}

}  // namespace elvc::corpus
