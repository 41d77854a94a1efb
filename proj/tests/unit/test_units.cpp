#include <doctest.h>

#include "elvc/core/error.hpp"
#include "elvc/corpus/build.hpp"
#include "elvc/corpus/phonemes.hpp"
#include "elvc/corpus/synth.hpp"
#include "elvc/eval/metrics.hpp"
#include "elvc/units/units.hpp"
#include "support.hpp"

using namespace elvc;
using namespace elvc::units;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::StageFailure;
}

const std::vector<corpus::SpeakerParams>& speakers() {
  static const std::vector<corpus::SpeakerParams> s = {
      {"a", 110.0, 0.06, 1.0, 0.08, 0.02},
      {"b", 190.0, 0.07, 1.12, 0.075, 0.03},
      {"c", 140.0, 0.05, 0.92, 0.085, 0.02},
  };
  return s;
}

Matrix training_features(int utterances, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Matrix> parts;
  Eigen::Index rows = 0;
  for (int i = 0; i < utterances; ++i) {
    const auto& spk = speakers()[static_cast<std::size_t>(i) % speakers().size()];
    const auto u = corpus::generate_typical(corpus::random_sentence(rng, 8, 12), spk, seed + static_cast<std::uint64_t>(i));
    parts.push_back(unit_features(u.waveform));
    rows += parts.back().rows();
  }
  Matrix all(rows, parts.front().cols());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    all.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  return all;
}

const UnitCodebook& codebook64() {
  static const UnitCodebook cb = [] {
    UnitConfig cfg;
    return fit_codebook(training_features(45, 11), cfg);
  }();
  return cb;
}

Matrix standardize_columns(const Matrix& m, const RowVector& mean, const RowVector& sd) {
  return (m.rowwise() - mean).array().rowwise() / sd.array();
}

void column_stats(const std::vector<Matrix>& ms, RowVector& mean, RowVector& sd) {
  Eigen::Index rows = 0;
  for (const auto& m : ms) rows += m.rows();
  Matrix all(rows, ms.front().cols());
  Eigen::Index r = 0;
  for (const auto& m : ms) {
    all.middleRows(r, m.rows()) = m;
    r += m.rows();
  }
  mean = all.colwise().mean();
  sd = ((all.rowwise() - mean).array().square().colwise().mean()).sqrt().max(1e-8).matrix();
}

}  // namespace

TEST_CASE("single centroid gives one-hot rows") {
  UnitConfig cfg;
  cfg.k = 1;
  const auto cb = fit_codebook(training_features(3, 1), cfg);
  Rng rng(2);
  const auto u = assign_units(cb, randn(17, cb.feature_dim(), rng));
  CHECK(u.dim() == 1);
  CHECK((u.frames.array() == 1.0).all());
}

TEST_CASE("codebook fit is deterministic and inertia shrinks with k") {
  const Matrix feats = training_features(12, 3);
  UnitConfig c8;
  c8.k = 8;
  UnitConfig c64;
  c64.k = 64;
  const auto a = fit_codebook(feats, c64);
  const auto b = fit_codebook(feats, c64);
  CHECK(a.centroids == b.centroids);
  CHECK(a.inertia == b.inertia);
  CHECK(a.centroids.allFinite());
  CHECK(a.tau > 0.0);
  CHECK(a.inertia <= fit_codebook(feats, c8).inertia);
  UnitConfig huge;
  huge.k = static_cast<int>(feats.rows()) + 1;
  CHECK(code_of([&] { fit_codebook(feats, huge); }) == ErrorCode::ConfigError);
}

TEST_CASE("soft assignment normalization and limits") {
  const auto& cb = codebook64();
  Rng rng(4);
  const auto u = corpus::generate_typical(corpus::random_sentence(rng, 8, 12), speakers()[0], 77);
  const auto seq = extract_units(cb, u.waveform);
  CHECK(seq.dim() == 64);
  CHECK(seq.frame_shift_ms == 40.0);
  CHECK((seq.frames.array() >= 0.0).all());
  CHECK(((seq.frames.rowwise().sum().array() - 1.0).abs() < 1e-6).all());
  CHECK(extract_units(cb, u.waveform).frames == seq.frames);
  const Matrix feats = unit_features(u.waveform);
  CHECK(seq.num_frames() == (feats.rows() + 3) / 4);

  auto sharp = cb;
  sharp.tau = 1e-6;
  const Matrix at = (cb.centroids.row(5).array() * cb.scale.array() + cb.mean.array()).matrix();
  const Matrix p = soft_assign(sharp, at);
  CHECK(p(0, 5) == doctest::Approx(1.0));
  CHECK(code_of([&] { soft_assign(cb, Matrix::Zero(3, cb.feature_dim() + 1)); }) == ErrorCode::ShapeError);
}

TEST_CASE("pooling averages groups") {
  Matrix m(5, 2);
  m << 1, 0, 3, 0, 5, 2, 7, 2, 9, 4;
  const Matrix p = pool_rows(m, 2);
  REQUIRE(p.rows() == 3);
  CHECK(p(0, 0) == 2.0);
  CHECK(p(1, 0) == 6.0);
  CHECK(p(2, 0) == 9.0);
  CHECK(p(2, 1) == 4.0);
}

TEST_CASE("centered log is row-centred") {
  Rng rng(5);
  Matrix u = randn(4, 6, rng).array().exp().matrix();
  u = u.array().colwise() / u.rowwise().sum().array();
  const Matrix c = centered_log(u);
  CHECK(c.rowwise().sum().cwiseAbs().maxCoeff() < 1e-9);
  CHECK((c.row(1).array() - (u.row(1).array().log() - u.row(1).array().log().mean())).abs().maxCoeff() < 1e-12);
}

TEST_CASE("codebook save and load round trip") {
  const auto dir = test::scratch_dir("units_cb");
  save_codebook(dir / "cb.ckpt", codebook64());
  const auto back = load_codebook(dir / "cb.ckpt");
  CHECK(back.centroids == codebook64().centroids);
  CHECK(back.mean == codebook64().mean);
  CHECK(back.scale == codebook64().scale);
  CHECK(back.tau == codebook64().tau);
}

TEST_CASE("external adapter round trip and validation") {
  const auto dir = test::scratch_dir("units_ext");
  auto cfg = corpus::CorpusConfig{};
  cfg.train_count = 4;
  cfg.dev_count = 1;
  cfg.test_count = 1;
  cfg.target_utterances = 6;
  cfg.pretrain_speakers = 1;
  cfg.pretrain_utterances_per_speaker = 2;
  cfg.synthetic_el_speakers = 1;
  cfg.synthetic_el_utterances = 2;
  cfg.parallel_pairs = 2;
  const auto c = corpus::build_corpus(cfg, dir / "corpus");
  const CodebookUnitSource src(codebook64());
  for (const auto& e : c.manifest.entries) dump_units(dir / "units", e.utterance_id, src.units(c.manifest, e));
  const ExternalUnitAdapter adapter(dir / "units", 64);
  adapter.verify_complete(c.manifest);
  for (const auto& e : c.manifest.entries) CHECK(adapter.units(c.manifest, e).frames == src.units(c.manifest, e).frames);

  const ExternalUnitAdapter wrong(dir / "units", 32);
  CHECK(code_of([&] { wrong.units(c.manifest.entries.front().utterance_id); }) == ErrorCode::ConfigError);

  const auto& victim = c.manifest.entries[3].utterance_id;
  std::filesystem::remove(adapter.path_for(victim));
  try {
    adapter.verify_complete(c.manifest);
    FAIL("expected IoError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::IoError);
    CHECK(std::string(e.what()).find(victim) != std::string::npos);
  }
  CHECK(code_of([&] { adapter.units(victim); }) == ErrorCode::IoError);
}

TEST_CASE("units reduce speaker differences relative to mel" * doctest::may_fail()) {
  const auto& cb = codebook64();
  Rng rng(6);
  std::vector<std::pair<Matrix, Matrix>> mels, units;
  std::vector<Matrix> all_mel, all_units;
  for (int i = 0; i < 8; ++i) {
    const auto text = corpus::random_sentence(rng, 8, 12);
    const auto a = corpus::generate_typical(text, speakers()[0], 500 + static_cast<std::uint64_t>(i));
    const auto b = corpus::generate_typical(text, speakers()[1], 600 + static_cast<std::uint64_t>(i));
    const Matrix ua = soft_assign(cb, unit_features(a.waveform));
    const Matrix ub = soft_assign(cb, unit_features(b.waveform));
    const Matrix ma = dsp::mel_spectrogram(a.waveform).frames;
    const Matrix mb = dsp::mel_spectrogram(b.waveform).frames;
    mels.emplace_back(ma, mb);
    units.emplace_back(ua, ub);
    all_mel.insert(all_mel.end(), {ma, mb});
    all_units.insert(all_units.end(), {ua, ub});
  }
  RowVector mm, ms, um, us;
  column_stats(all_mel, mm, ms);
  column_stats(all_units, um, us);
  double mel_d = 0.0, unit_d = 0.0;
  for (std::size_t i = 0; i < mels.size(); ++i) {
    const auto dm = eval::dtw_align(standardize_columns(mels[i].first, mm, ms), standardize_columns(mels[i].second, mm, ms));
    const auto du =
        eval::dtw_align(standardize_columns(units[i].first, um, us), standardize_columns(units[i].second, um, us));
    mel_d += dm.cost / static_cast<double>(dm.path.size()) / std::sqrt(static_cast<double>(mm.size()));
    unit_d += du.cost / static_cast<double>(du.path.size()) / std::sqrt(static_cast<double>(um.size()));
  }
  MESSAGE("per-dimension DTW distance: units " << unit_d / 8.0 << ", mel " << mel_d / 8.0);
  CHECK(unit_d < mel_d);
}

TEST_CASE("mean unit activations retain phoneme content") {
  const auto& cb = codebook64();
  const std::vector<std::string> vowels = {"a", "i", "u", "e", "o"};
  Rng rng(7);
  auto make = [&](int n, std::uint64_t seed0, std::vector<RowVector>& x, std::vector<int>& y) {
    for (int i = 0; i < n; ++i) {
      const int cls = i % 5;
      const Symbol v = corpus::symbol_from_name(vowels[static_cast<std::size_t>(cls)]);
      SymbolSequence text = corpus::random_sentence(rng, 4, 5);
      for (int k = 0; k < 6; ++k) text.insert(text.begin() + static_cast<long>(rng() % text.size()), v);
      const auto& spk = speakers()[static_cast<std::size_t>(i) % speakers().size()];
      const auto u = corpus::generate_typical(text, spk, seed0 + static_cast<std::uint64_t>(i));
      x.push_back(extract_units(cb, u.waveform).frames.colwise().mean());
      y.push_back(cls);
    }
  };
  std::vector<RowVector> xtr, xte;
  std::vector<int> ytr, yte;
  make(100, 1000, xtr, ytr);
  make(50, 5000, xte, yte);

  // Multinomial logistic regression by full-batch gradient descent.
  const Eigen::Index d = cb.k();
  Matrix w = Matrix::Zero(d + 1, 5);
  auto features = [&](const RowVector& r) {
    RowVector f(d + 1);
    f << r * static_cast<double>(d), 1.0;
    return f;
  };
  for (int it = 0; it < 500; ++it) {
    Matrix g = Matrix::Zero(d + 1, 5);
    for (std::size_t i = 0; i < xtr.size(); ++i) {
      const RowVector f = features(xtr[i]);
      RowVector z = f * w;
      z = (z.array() - z.maxCoeff()).exp();
      z /= z.sum();
      z[ytr[i]] -= 1.0;
      g += f.transpose() * z;
    }
    w -= 0.5 * g / static_cast<double>(xtr.size());
  }
  int correct = 0;
  for (std::size_t i = 0; i < xte.size(); ++i) {
    Eigen::Index arg = 0;
    (features(xte[i]) * w).maxCoeff(&arg);
    correct += static_cast<int>(arg) == yte[i];
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(xte.size());
  MESSAGE("held-out accuracy " << acc << " (chance 0.2)");
  CHECK(acc > 0.4);
}
