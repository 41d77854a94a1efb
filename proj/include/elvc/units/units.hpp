#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "elvc/corpus/manifest.hpp"
#include "elvc/dsp/features.hpp"

namespace elvc::units {

/// Soft content units, one probability row per (pooled) frame.
struct UnitSequence {
  Matrix frames;
  double frame_shift_ms = 40.0;

  Eigen::Index num_frames() const { return frames.rows(); }
  Eigen::Index dim() const { return frames.cols(); }
};

struct UnitConfig {
  int k = 64;
  double tau = 1.0;
  int pool = 4;  ///< feature frames averaged into one unit frame
  int max_iterations = 60;
  std::size_t max_fit_frames = 60000;
  std::uint64_t seed = 7;
  dsp::McepConfig mcep;
};

/// K centroids over standardized c1..cD mel-cepstra.
struct UnitCodebook {
  Matrix centroids;  ///< K x F
  RowVector mean;    ///< 1 x F, feature standardization
  RowVector scale;   ///< 1 x F
  double tau = 1.0;
  int pool = 4;
  double inertia = 0.0;
  int iterations = 0;
  dsp::McepConfig mcep;

  Eigen::Index k() const { return centroids.rows(); }
  Eigen::Index feature_dim() const { return centroids.cols(); }
};

/// c1..cD of the waveform's mel-cepstrum, T x D.
Matrix unit_features(const Vector& waveform, const dsp::McepConfig& mcep = {});

/// Seeded k-means++ / Lloyd on the rows of `features` (standardized internally).
UnitCodebook fit_codebook(const Matrix& features, const UnitConfig& config);
/// Fits on every TYPICAL train-split entry of the manifest.
UnitCodebook fit_unit_extractor(const corpus::Manifest& manifest, const UnitConfig& config);

/// Row-centered log of soft assignments, clamped at 1e-8.
Matrix centered_log(const Matrix& units);

/// softmax(-distance / tau) per feature frame, before pooling.
Matrix soft_assign(const UnitCodebook& codebook, const Matrix& features);
/// Averages consecutive groups of `pool` rows (the last group may be shorter).
Matrix pool_rows(const Matrix& frames, int pool);

UnitSequence assign_units(const UnitCodebook& codebook, const Matrix& features);
UnitSequence extract_units(const UnitCodebook& codebook, const Vector& waveform);

void save_codebook(const std::filesystem::path& path, const UnitCodebook& codebook);
UnitCodebook load_codebook(const std::filesystem::path& path);

/// Where unit sequences for manifest utterances come from.
class UnitSource {
 public:
  virtual ~UnitSource() = default;
  virtual UnitSequence units(const corpus::Manifest& manifest, const corpus::ManifestEntry& entry) const = 0;
  virtual Eigen::Index dim() const = 0;
};

class CodebookUnitSource : public UnitSource {
 public:
  explicit CodebookUnitSource(UnitCodebook codebook) : codebook_(std::move(codebook)) {}
  UnitSequence units(const corpus::Manifest& manifest, const corpus::ManifestEntry& entry) const override;
  Eigen::Index dim() const override { return codebook_.k(); }
  const UnitCodebook& codebook() const { return codebook_; }

 private:
  UnitCodebook codebook_;
};

/// Serves precomputed unit matrices stored as <dir>/<utterance_id>.emat.
class ExternalUnitAdapter : public UnitSource {
 public:
  ExternalUnitAdapter(std::filesystem::path dir, Eigen::Index expected_dim, double frame_shift_ms = 40.0);
  UnitSequence units(const std::string& utterance_id) const;
  UnitSequence units(const corpus::Manifest& manifest, const corpus::ManifestEntry& entry) const override;
  Eigen::Index dim() const override { return dim_; }
  /// Throws IoError naming the first manifest utterance without a dump.
  void verify_complete(const corpus::Manifest& manifest) const;
  std::filesystem::path path_for(const std::string& utterance_id) const;

 private:
  std::filesystem::path dir_;
  Eigen::Index dim_;
  double frame_shift_ms_;
};

void dump_units(const std::filesystem::path& dir, const std::string& utterance_id, const UnitSequence& units);

}  // namespace elvc::units
