#include <doctest.h>

#include "elvc/core/error.hpp"
#include "elvc/corpus/phonemes.hpp"
#include "elvc/corpus/synth.hpp"
#include "elvc/synthesis/diffusion.hpp"
#include "support.hpp"

using namespace elvc;
using namespace elvc::synthesis;

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

DiffusionConfig tiny_config() {
  DiffusionConfig c;
  c.n_mels = 3;
  c.unit_dim = 3;
  c.speaker_dim = 2;
  c.channels = 4;
  c.residual_blocks = 2;
  c.kernel = 3;
  return c;
}

DiffusionConfig toy_config() {
  DiffusionConfig c;
  c.n_mels = 2;
  c.unit_dim = 2;
  c.speaker_dim = 2;
  c.channels = 32;
  c.residual_blocks = 2;
  c.kernel = 1;
  c.p_uncond = 0.1;
  return c;
}

/// Frames drawn from a two-component mixture in 2-D; units are the one-hot component labels.
std::vector<SynthesisExample> mixture(int n, const Matrix& means, double sd, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SynthesisExample> out;
  for (int i = 0; i < n; ++i) {
    SynthesisExample ex;
    ex.mel.resize(16, 2);
    ex.units = Matrix::Zero(16, 2);
    for (int t = 0; t < 16; ++t) {
      const int k = static_cast<int>(rng() % 2);
      ex.units(t, k) = 1.0;
      ex.mel.row(t) = means.row(k) + sd * randn(1, 2, rng);
    }
    ex.speaker = Vector::Constant(2, std::sqrt(0.5));
    out.push_back(std::move(ex));
  }
  return out;
}

SynthesisRecipe recipe(int epochs, double lr = 3e-3) {
  SynthesisRecipe r;
  r.epochs = epochs;
  r.batch_size = 8;
  r.lr = lr;
  r.warmup_steps = 20;
  return r;
}

/// Conditional ancestral sampler written directly from the reverse-process formula.
Matrix reference_sample(const DiffusionDecoder& dec, const Matrix& units, const Vector& spk, std::uint64_t seed) {
  const auto& s = dec.schedule();
  Rng rng(seed);
  Matrix x = randn(units.rows(), dec.config().n_mels, rng);
  for (int n = s.steps(); n >= 1; --n) {
    const Matrix eps = dec.predict_noise(x, n, &units, spk).value();
    const Matrix mean = (x - s.beta(n) / std::sqrt(1.0 - s.alpha_bar(n)) * eps) / std::sqrt(1.0 - s.beta(n));
    if (n > 1) {
      const double prev = s.alpha_bar(n - 1);
      const double var = (1.0 - prev) / (1.0 - s.alpha_bar(n)) * s.beta(n);
      x = mean + std::sqrt(var) * randn(units.rows(), dec.config().n_mels, rng);
    } else {
      x = mean;
    }
  }
  return dec.denormalize(x);
}

const DiffusionDecoder& trained_toy() {
  static const auto dec = [] {
    auto d = std::make_unique<DiffusionDecoder>(toy_config());
    d->set_identity_normalization();
    Matrix means(2, 2);
    means << -1.5, 0.5, 1.0, -1.0;
    const auto data = mixture(400, means, 0.2, 1);
    train(*d, recipe(30), data, {});
    return d;
  }();
  return *dec;
}

}  // namespace

TEST_CASE("noise schedule") {
  const NoiseSchedule s;
  CHECK(s.steps() == 100);
  CHECK(s.beta(1) == doctest::Approx(1e-4));
  CHECK(s.beta(100) == doctest::Approx(0.2));
  for (int n = 2; n <= s.steps(); ++n) CHECK(s.alpha_bar(n) < s.alpha_bar(n - 1));
  CHECK(s.alpha_bar(1) == doctest::Approx(1.0 - 1e-4));
  CHECK(s.alpha_bar(100) < 1e-3);
  CHECK(code_of([&] { s.beta(0); }) == ErrorCode::RangeError);
  CHECK(code_of([&] { s.alpha_bar(101); }) == ErrorCode::RangeError);
  CHECK(code_of([] { NoiseSchedule(10, 0.3, 0.2); }) == ErrorCode::ConfigError);
}

TEST_CASE("composed one-step transitions match the closed-form marginal") {
  const NoiseSchedule s;
  double mean_coef = 1.0, var = 0.0;
  for (int n = 1; n <= s.steps(); ++n) {
    mean_coef *= std::sqrt(s.alpha(n));
    var = s.alpha(n) * var + s.beta(n);
    CHECK(mean_coef == doctest::Approx(std::sqrt(s.alpha_bar(n))).epsilon(1e-12));
    CHECK(var == doctest::Approx(1.0 - s.alpha_bar(n)).epsilon(1e-12));
  }
}

TEST_CASE("q_sample") {
  const NoiseSchedule s;
  Rng rng(1);
  const Matrix x0 = randn(4, 3, rng);
  CHECK(q_sample(s, x0, 1, Matrix::Zero(4, 3)).isApprox(std::sqrt(s.alpha_bar(1)) * x0));
  CHECK(code_of([&] { q_sample(s, x0, 0, Matrix::Zero(4, 3)); }) == ErrorCode::RangeError);
  CHECK(code_of([&] { q_sample(s, x0, 101, Matrix::Zero(4, 3)); }) == ErrorCode::RangeError);
  CHECK(code_of([&] { q_sample(s, x0, 5, Matrix::Zero(3, 3)); }) == ErrorCode::ShapeError);

  const Matrix one = Matrix::Constant(1, 1, 0.7);
  for (int n : {10, 50, 100}) {
    constexpr int kDraws = 20000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < kDraws; ++i) {
      const double v = q_sample(s, one, n, randn(1, 1, rng))(0, 0);
      sum += v;
      sq += v * v;
    }
    const double mean = sum / kDraws;
    const double var = sq / kDraws - mean * mean;
    CHECK(var == doctest::Approx(1.0 - s.alpha_bar(n)).epsilon(0.05));
    CHECK(std::abs(mean - std::sqrt(s.alpha_bar(n)) * 0.7) < 0.03);
  }
}

TEST_CASE("guided noise") {
  Rng rng(2);
  const Matrix c = randn(5, 4, rng), u = randn(5, 4, rng);
  CHECK(guided_noise(c, u, 0.0) == c);
  CHECK(guided_noise(c, c, 3.0).isApprox(c));
  CHECK(guided_noise(c, u, -1.0).isApprox(u));
  CHECK(guided_noise(c, u, 1.0).isApprox(2.0 * c - u));
  CHECK(guided_noise(c, u, 2.0).isApprox(3.0 * c - 2.0 * u));
  CHECK(code_of([&] { guided_noise(c, Matrix::Zero(4, 4), 1.0); }) == ErrorCode::ShapeError);
}

TEST_CASE("a zero network scores the noise energy") {
  DiffusionDecoder dec(tiny_config());
  dec.store().unflatten(Vector::Zero(dec.store().flatten().size()));
  dec.set_identity_normalization();
  Rng rng(3);
  std::vector<SynthesisExample> data;
  for (int i = 0; i < 200; ++i) data.push_back({randn(20, 3, rng), Matrix::Constant(20, 3, 1.0 / 3.0), Vector::Ones(2)});
  CHECK(evaluation_loss(dec, data, 7) == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("condition dropout frequency") {
  Matrix means(2, 2);
  means << 0.0, 0.0, 1.0, 1.0;
  const auto data = mixture(40, means, 0.3, 4);
  for (const double p : {0.0, 0.25, 1.0}) {
    auto cfg = tiny_config();
    cfg.n_mels = cfg.unit_dim = 2;
    cfg.p_uncond = p;
    DiffusionDecoder dec(cfg);
    const auto log = train(dec, recipe(25), data, {});
    const double rate = static_cast<double>(log.null_condition_uses) / (25.0 * 40.0);
    if (p == 0.0) CHECK(log.null_condition_uses == 0);
    else if (p == 1.0) CHECK(rate == 1.0);
    else CHECK(std::abs(rate - p) < 0.04);
  }
}

TEST_CASE("denoising loss gradient matches finite differences") {
  DiffusionDecoder dec(tiny_config());
  REQUIRE(dec.store().num_scalars() <= 1000);
  test::jitter(dec.store(), 0.1, 5);
  Rng rng(6);
  const Matrix x = randn(7, 3, rng), eps = randn(7, 3, rng);
  Matrix units = randn(7, 3, rng).cwiseAbs();
  units = units.array().colwise() / units.rowwise().sum().array();
  const Vector spk = Vector::Constant(2, std::sqrt(0.5));
  const auto loss = [&] {
    return ad::mse_loss(dec.predict_noise(x, 37, &units, spk), eps) +
           ad::mse_loss(dec.predict_noise(x, 80, nullptr, spk), eps);
  };
  const auto r = test::grad_check(dec.store(), loss, 1e-5, {kDiffusionNormScope});
  CHECK(r.analytic_norm > 0.0);
  CHECK(r.rel_error < 1e-5);
}

TEST_CASE("sampler determinism, shape and plain conditional limit") {
  auto cfg = tiny_config();
  cfg.steps = 20;
  DiffusionDecoder dec(cfg);
  test::jitter(dec.store(), 0.05, 7);
  Rng rng(8);
  Matrix units = randn(5, 3, rng).cwiseAbs();
  units = units.array().colwise() / units.rowwise().sum().array();
  const Vector spk = Vector::Constant(2, std::sqrt(0.5));
  const auto a = sample(dec, units, spk, 1.0, 11);
  CHECK(a.frames.rows() == 20);
  CHECK(a.frames.cols() == 3);
  CHECK(sample(dec, units, spk, 1.0, 11).frames == a.frames);
  CHECK(sample(dec, units, spk, 1.0, 12).frames != a.frames);
  CHECK(sample(dec, units, spk, 1.0, 11, 9).frames.rows() == 9);
  const Matrix cond = interpolate_units(units, 20);
  CHECK((sample(dec, units, spk, 0.0, 11).frames - reference_sample(dec, cond, spk, 11)).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(code_of([&] { sample(dec, Matrix(0, 3), spk, 1.0, 1); }) == ErrorCode::EmptyInput);
}

TEST_CASE("toy mixture recovery") {
  const auto& dec = trained_toy();
  Matrix means(2, 2);
  means << -1.5, 0.5, 1.0, -1.0;
  const Vector spk = Vector::Constant(2, std::sqrt(0.5));
  for (int k = 0; k < 2; ++k) {
    Matrix units = Matrix::Zero(50, 2);
    units.col(k).setOnes();
    Matrix all(0, 2);
    for (std::uint64_t s = 0; s < 4; ++s) {
      const Matrix m = sample(dec, units, spk, 1.0, 100 + s, 50).frames;
      all.conservativeResize(all.rows() + m.rows(), 2);
      all.bottomRows(m.rows()) = m;
    }
    const RowVector mean = all.colwise().mean();
    const RowVector sd = (all.rowwise() - mean).array().square().colwise().mean().sqrt();
    MESSAGE("component " << k << " sample mean " << mean << " sd " << sd);
    CHECK((mean - means.row(k)).cwiseAbs().maxCoeff() < 0.1);
    CHECK((sd.array() - 0.2).abs().maxCoeff() < 0.1);
  }
}

TEST_CASE("unit interpolation and conditioning form") {
  Rng rng(9);
  Matrix u = randn(6, 4, rng).cwiseAbs();
  u = u.array().colwise() / u.rowwise().sum().array();
  for (Eigen::Index frames : {1, 6, 13, 24}) {
    const Matrix v = interpolate_units(u, frames);
    CHECK(v.rows() == frames);
    CHECK((v.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK(v.minCoeff() >= 0.0);
  }
  CHECK(interpolate_units(u, 6) == u);
  CHECK(interpolate_units(u, 24).row(0) == u.row(0));
  CHECK(interpolate_units(u, 24).row(23) == u.row(5));
  CHECK(code_of([&] { interpolate_units(Matrix(0, 4), 3); }) == ErrorCode::ShapeError);
  CHECK(unit_logits(u).rowwise().sum().cwiseAbs().maxCoeff() < 1e-12);
  CHECK(unit_logits(Matrix::Constant(2, 4, 0.25)).isZero());
}

TEST_CASE("speaker embedding") {
  Rng rng(10);
  const corpus::SpeakerParams a{"a", 110.0, 0.06, 0.9, 0.08, 0.02};
  const corpus::SpeakerParams b{"b", 210.0, 0.06, 1.15, 0.08, 0.02};
  std::vector<Vector> wa, wb;
  for (int i = 0; i < 6; ++i) {
    wa.push_back(corpus::generate_typical(corpus::random_sentence(rng, 8, 12), a, 20 + i).waveform);
    wb.push_back(corpus::generate_typical(corpus::random_sentence(rng, 8, 12), b, 40 + i).waveform);
  }
  const auto ea = speaker_embedding(std::span(wa).first(3));
  const auto ea2 = speaker_embedding(std::span(wa).last(3));
  const auto eb = speaker_embedding(std::span(wb).first(3));
  CHECK(ea.vector.size() == 32);
  CHECK(ea.vector.norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((ea.vector - ea2.vector).norm() < (ea.vector - eb.vector).norm());
  CHECK((ea2.vector - ea.vector).norm() < (ea2.vector - eb.vector).norm());

  std::vector<Vector> doubled(wa.begin(), wa.begin() + 3);
  doubled.insert(doubled.end(), wa.begin(), wa.begin() + 3);
  CHECK((speaker_embedding(doubled).vector - ea.vector).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(code_of([] { speaker_embedding(std::span<const Vector>{}); }) == ErrorCode::EmptyInput);

  const auto dir = test::scratch_dir("speaker");
  save_embedding(dir / "a.emat", ea);
  CHECK(load_embedding(dir / "a.emat").vector == ea.vector);
  CHECK(load_external_embedding(dir / "a.emat").source == SpeakerEmbedding::Source::External);
  CHECK(code_of([&] { load_external_embedding(dir / "missing.emat"); }) == ErrorCode::IoError);
}

TEST_CASE("adaptation") {
  auto dec = load_decoder([] {
    const auto path = test::scratch_dir("toy_decoder") / "toy.ckpt";
    save_decoder(path, trained_toy());
    return path;
  }());
  CHECK(dec->store().flatten() == trained_toy().store().flatten());
  Matrix shifted(2, 2);
  shifted << -0.5, 1.5, 2.0, 0.0;
  const auto train_set = mixture(40, shifted, 0.2, 21);
  const auto dev = mixture(40, shifted, 0.2, 22);
  const Vector before = dec->store().flatten();
  adapt_fewshot(*dec, recipe(0), train_set, dev);
  CHECK(dec->store().flatten() == before);

  const double loss0 = evaluation_loss(*dec, dev, 5);
  const auto log = adapt_fewshot(*dec, recipe(20, 1e-3), train_set, dev);
  MESSAGE("dev loss " << loss0 << " -> " << log.dev_loss.back());
  CHECK(log.dev_loss.back() < loss0);
  const Vector spk = Vector::Constant(2, std::sqrt(0.5));
  Matrix units = Matrix::Zero(50, 2);
  units.col(1).setOnes();
  const auto distance = [&](const DiffusionDecoder& d) {
    return (sample(d, units, spk, 1.0, 3, 50).frames.colwise().mean() - shifted.row(1)).norm();
  };
  MESSAGE("distance " << distance(trained_toy()) << " -> " << distance(*dec));
  CHECK(distance(*dec) < distance(trained_toy()));
}

TEST_CASE("config json round trip") {
  auto c = tiny_config();
  c.guidance = 2.5;
  c.seed = 99;
  const auto back = diffusion_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
}
