#include "elvc/units/units.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "elvc/core/error.hpp"
#include "elvc/core/matrix_io.hpp"
#include "elvc/core/rng.hpp"
#include "elvc/core/wav.hpp"
#include "elvc/nn/checkpoint.hpp"

namespace elvc::units {
namespace {

Matrix standardize(const UnitCodebook& cb, const Matrix& features) {
  return ((features.rowwise() - cb.mean).array().rowwise() / cb.scale.array()).matrix();
}

// Squared Euclidean distances, N x K.
Matrix squared_distances(const Matrix& x, const Matrix& centroids) {
  Matrix d = -2.0 * x * centroids.transpose();
  d.colwise() += x.rowwise().squaredNorm();
  d.rowwise() += centroids.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

Matrix kmeans_pp_init(const Matrix& x, int k, Rng& rng) {
  const Eigen::Index n = x.rows();
  Matrix c(k, x.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  c.row(0) = x.row(pick(rng));
  Vector best = (x.rowwise() - c.row(0)).rowwise().squaredNorm();
  for (int j = 1; j < k; ++j) {
    const double total = best.sum();
    Eigen::Index chosen = pick(rng);
    if (total > 0.0) {
      double r = uniform(rng, 0.0, total);
      for (Eigen::Index i = 0; i < n; ++i) {
        r -= best(i);
        if (r <= 0.0) {
          chosen = i;
          break;
        }
      }
    }
    c.row(j) = x.row(chosen);
    best = best.cwiseMin((x.rowwise() - c.row(j)).rowwise().squaredNorm());
  }
  return c;
}

}  // namespace

Matrix unit_features(const Vector& waveform, const dsp::McepConfig& mcep) {
  const auto seq = dsp::mel_cepstrum(waveform, mcep);
  return seq.frames.rightCols(seq.frames.cols() - 1);
}

UnitCodebook fit_codebook(const Matrix& features, const UnitConfig& config) {
  require(config.k >= 1, ErrorCode::ConfigError, "units: k must be >= 1");
  require(config.tau > 0.0, ErrorCode::ConfigError, "units: tau must be positive");
  require(config.pool >= 1, ErrorCode::ConfigError, "units: pool must be >= 1");
  require(features.rows() >= config.k, ErrorCode::ConfigError,
          "units: k=" + std::to_string(config.k) + " exceeds " + std::to_string(features.rows()) + " frames");
  Rng rng(derive_seed(config.seed, 0x554e495453ULL));

  Matrix data = features;
  if (static_cast<std::size_t>(data.rows()) > config.max_fit_frames) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(data.rows()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(config.max_fit_frames);
    std::sort(idx.begin(), idx.end());
    data = features(idx, Eigen::all);
  }

  UnitCodebook cb;
  cb.tau = config.tau;
  cb.pool = config.pool;
  cb.mcep = config.mcep;
  cb.mean = data.colwise().mean();
  const Matrix centered = data.rowwise() - cb.mean;
  cb.scale = (centered.array().square().colwise().sum() / static_cast<double>(data.rows())).sqrt().max(1e-8);
  const Matrix x = standardize(cb, data);

  Matrix c = kmeans_pp_init(x, config.k, rng);
  std::vector<int> assign(static_cast<std::size_t>(x.rows()), -1);
  double inertia = 0.0;
  int it = 0;
  for (; it < config.max_iterations; ++it) {
    const Matrix d = squared_distances(x, c);
    bool changed = false;
    inertia = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      Eigen::Index j;
      inertia += d.row(i).minCoeff(&j);
      if (assign[static_cast<std::size_t>(i)] != static_cast<int>(j)) {
        assign[static_cast<std::size_t>(i)] = static_cast<int>(j);
        changed = true;
      }
    }
    if (!changed) break;
    Matrix sums = Matrix::Zero(c.rows(), c.cols());
    std::vector<int> counts(static_cast<std::size_t>(c.rows()), 0);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    for (Eigen::Index j = 0; j < c.rows(); ++j) {
      if (counts[static_cast<std::size_t>(j)] > 0) {
        c.row(j) = sums.row(j) / counts[static_cast<std::size_t>(j)];
      } else {
        // Re-seed an empty cluster at the worst-fit point.
        Eigen::Index far;
        d.rowwise().minCoeff().maxCoeff(&far);
        c.row(j) = x.row(far);
      }
    }
  }
  const Matrix d = squared_distances(x, c);
  cb.inertia = d.rowwise().minCoeff().sum();
  cb.iterations = it;
  cb.centroids = std::move(c);
  std::fprintf(stderr, "[units] k=%d frames=%ld iterations=%d inertia=%.4f\n", config.k,
               static_cast<long>(x.rows()), it, cb.inertia);
  return cb;
}

UnitCodebook fit_unit_extractor(const corpus::Manifest& manifest, const UnitConfig& config) {
  std::vector<Matrix> blocks;
  Eigen::Index rows = 0;
  for (const auto& e : manifest.entries) {
    if (e.speech_type != SpeechType::Typical || e.split != corpus::Split::Train) continue;
    blocks.push_back(unit_features(read_wav(manifest.resolve(e)).samples, config.mcep));
    rows += blocks.back().rows();
  }
  require(!blocks.empty(), ErrorCode::ConfigError, "units: manifest has no typical training utterances");
  Matrix all(rows, blocks.front().cols());
  Eigen::Index at = 0;
  for (const auto& b : blocks) {
    all.middleRows(at, b.rows()) = b;
    at += b.rows();
  }
  return fit_codebook(all, config);
}

Matrix centered_log(const Matrix& units) {
  Matrix l = units.cwiseMax(1e-8).array().log().matrix();
  const Vector mean = l.rowwise().mean();
  l.colwise() -= mean;
  return l;
}

Matrix soft_assign(const UnitCodebook& codebook, const Matrix& features) {
  require(features.cols() == codebook.feature_dim(), ErrorCode::ShapeError,
          "units: feature dim " + std::to_string(features.cols()) + " != codebook dim " +
              std::to_string(codebook.feature_dim()));
  const Matrix d = squared_distances(standardize(codebook, features), codebook.centroids).cwiseSqrt();
  Matrix logits = -d / codebook.tau;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - m).exp();
    logits.row(i) /= logits.row(i).sum();
  }
  return logits;
}

Matrix pool_rows(const Matrix& frames, int pool) {
  require(pool >= 1, ErrorCode::ConfigError, "pool_rows: pool must be >= 1");
  const Eigen::Index out_rows = (frames.rows() + pool - 1) / pool;
  Matrix out(out_rows, frames.cols());
  for (Eigen::Index i = 0; i < out_rows; ++i) {
    const Eigen::Index start = i * pool;
    const Eigen::Index n = std::min<Eigen::Index>(pool, frames.rows() - start);
    out.row(i) = frames.middleRows(start, n).colwise().mean();
  }
  return out;
}

UnitSequence assign_units(const UnitCodebook& codebook, const Matrix& features) {
  return {pool_rows(soft_assign(codebook, features), codebook.pool),
          codebook.mcep.frame.frame_shift_ms * codebook.pool};
}

UnitSequence extract_units(const UnitCodebook& codebook, const Vector& waveform) {
  return assign_units(codebook, unit_features(waveform, codebook.mcep));
}

void save_codebook(const std::filesystem::path& path, const UnitCodebook& codebook) {
  nn::ParameterStore store;
  store.add("centroids", codebook.centroids);
  store.add("mean", codebook.mean);
  store.add("scale", codebook.scale);
  nlohmann::json meta = {{"kind", "unit_codebook"},
                         {"tau", codebook.tau},
                         {"pool", codebook.pool},
                         {"inertia", codebook.inertia},
                         {"iterations", codebook.iterations},
                         {"mcep_order", codebook.mcep.order},
                         {"mcep_alpha", codebook.mcep.alpha}};
  nn::save_checkpoint(path, store, meta);
}

UnitCodebook load_codebook(const std::filesystem::path& path) {
  auto ckpt = nn::load_checkpoint(path);
  require(ckpt.meta.value("kind", std::string{}) == "unit_codebook", ErrorCode::ConfigError,
          path.string() + " is not a unit codebook");
  UnitCodebook cb;
  cb.centroids = ckpt.tensors.at("centroids");
  cb.mean = ckpt.tensors.at("mean");
  cb.scale = ckpt.tensors.at("scale");
  cb.tau = ckpt.meta.at("tau").get<double>();
  cb.pool = ckpt.meta.at("pool").get<int>();
  cb.inertia = ckpt.meta.at("inertia").get<double>();
  cb.iterations = ckpt.meta.at("iterations").get<int>();
  cb.mcep.order = ckpt.meta.at("mcep_order").get<int>();
  cb.mcep.alpha = ckpt.meta.at("mcep_alpha").get<double>();
  return cb;
}

UnitSequence CodebookUnitSource::units(const corpus::Manifest& manifest, const corpus::ManifestEntry& entry) const {
  return extract_units(codebook_, read_wav(manifest.resolve(entry)).samples);
}

ExternalUnitAdapter::ExternalUnitAdapter(std::filesystem::path dir, Eigen::Index expected_dim, double frame_shift_ms)
    : dir_(std::move(dir)), dim_(expected_dim), frame_shift_ms_(frame_shift_ms) {
  require(expected_dim > 0, ErrorCode::ConfigError, "unit adapter: dimension must be positive");
}

std::filesystem::path ExternalUnitAdapter::path_for(const std::string& utterance_id) const {
  return dir_ / (utterance_id + ".emat");
}

UnitSequence ExternalUnitAdapter::units(const std::string& utterance_id) const {
  const auto path = path_for(utterance_id);
  require(std::filesystem::exists(path), ErrorCode::IoError, "unit adapter: no dump for " + utterance_id);
  Matrix m = read_matrix(path);
  require(m.cols() == dim_, ErrorCode::ConfigError,
          "unit adapter: " + utterance_id + " has dim " + std::to_string(m.cols()) + ", expected " +
              std::to_string(dim_));
  return {std::move(m), frame_shift_ms_};
}

UnitSequence ExternalUnitAdapter::units(const corpus::Manifest&, const corpus::ManifestEntry& entry) const {
  return units(entry.utterance_id);
}

void ExternalUnitAdapter::verify_complete(const corpus::Manifest& manifest) const {
  for (const auto& e : manifest.entries) {
    require(std::filesystem::exists(path_for(e.utterance_id)), ErrorCode::IoError,
            "unit adapter: missing dump for " + e.utterance_id);
  }
}

void dump_units(const std::filesystem::path& dir, const std::string& utterance_id, const UnitSequence& units) {
  std::filesystem::create_directories(dir);
  write_matrix(dir / (utterance_id + ".emat"), units.frames, DType::Float64);
}

}  // namespace elvc::units
