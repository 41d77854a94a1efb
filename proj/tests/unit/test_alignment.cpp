#include <doctest.h>

#include <algorithm>

#include "elvc/alignment/alignment.hpp"
#include "elvc/core/error.hpp"
#include "elvc/nn/optim.hpp"
#include "elvc/units/units.hpp"
#include "support.hpp"

using namespace elvc;
using namespace elvc::alignment;

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

AlignmentConfig tiny_config(FeatureType out = FeatureType::Units) {
  AlignmentConfig c;
  c.input = FeatureType::Bnf;
  c.output = out;
  c.input_dim = 3;
  c.output_dim = 3;
  c.reduction = 2;
  c.dim = 4;
  c.heads = 1;
  c.ff_dim = 4;
  c.encoder_blocks = 1;
  c.decoder_blocks = 1;
  c.vocab = 4;
  c.prenet_dropout = 0.0;
  return c;
}

AlignmentConfig small_config() {
  AlignmentConfig c;
  c.input_dim = 8;
  c.output_dim = 6;
  c.dim = 16;
  c.heads = 2;
  c.ff_dim = 32;
  c.encoder_blocks = 1;
  c.decoder_blocks = 1;
  c.vocab = 6;
  c.prenet_dropout = 0.0;
  return c;
}

Matrix softmax_rows(const Matrix& z) {
  Matrix p = (z.colwise() - z.rowwise().maxCoeff()).array().exp().matrix();
  return p.array().colwise() / p.rowwise().sum().array();
}

/// Source frames drawn from a small alphabet of prototypes; the target is a fixed soft code of each
/// source frame, so a model that attends monotonically can predict it.
std::vector<SequencePair> synthetic_pairs(int n, std::uint64_t seed, const AlignmentConfig& cfg) {
  Rng proto_rng(1234);
  const Eigen::Index symbols = cfg.vocab - 1;
  const Matrix protos = randn(symbols, cfg.input_dim, proto_rng);
  const Matrix codes = 3.0 * randn(symbols, cfg.output_dim, proto_rng);
  Rng rng(seed);
  std::vector<SequencePair> out;
  for (int i = 0; i < n; ++i) {
    const int len = 4 + static_cast<int>(rng() % 5);
    SequencePair p;
    p.src.resize(len, cfg.input_dim);
    p.tgt.resize(len, cfg.output_dim);
    for (int t = 0; t < len; ++t) {
      const int s = static_cast<int>(rng() % static_cast<std::uint64_t>(symbols));
      p.text.push_back(s);
      p.src.row(t) = protos.row(s) + 0.1 * randn(1, cfg.input_dim, rng);
      p.tgt.row(t) = codes.row(s);
    }
    p.tgt = softmax_rows(p.tgt);
    out.push_back(std::move(p));
  }
  return out;
}

AlignmentRecipe recipe(Stage s, int epochs, double lr = 3e-3) {
  AlignmentRecipe r;
  r.stage = s;
  r.epochs = epochs;
  r.lr = lr;
  r.batch_size = 8;
  r.warmup_steps = 10;
  return r;
}

Vector decoder_params(const AlignmentModel& m) {
  std::vector<double> v;
  for (const auto* p : m.store().all()) {
    if (nn::in_scope(p->name, kDecoderScope)) v.insert(v.end(), p->value.data(), p->value.data() + p->value.size());
  }
  return Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

TEST_CASE("stop labels mark only the final step") {
  for (Eigen::Index n : {1, 2, 7}) {
    const Vector s = stop_labels(n);
    CHECK(s.size() == n);
    CHECK(s.sum() == 1.0);
    CHECK(s[n - 1] == 1.0);
  }
}

TEST_CASE("decoder is causal") {
  for (const auto out : {FeatureType::Units, FeatureType::Mel}) {
    AlignmentModel model(tiny_config(out));
    Rng rng(1);
    const ad::Var memory = model.encode(randn(5, 3, rng));
    const Matrix steps = randn(6, model.step_dim(), rng);
    const auto base = model.decode(memory, steps);
    for (Eigen::Index t = 0; t < steps.rows(); ++t) {
      Matrix perturbed = steps;
      perturbed.row(t) += randn(1, model.step_dim(), rng);
      const auto d = model.decode(memory, perturbed);
      CHECK(d.frames.value().topRows(t) == base.frames.value().topRows(t));
      CHECK(d.stop.value().topRows(t) == base.stop.value().topRows(t));
      CHECK(d.frames.value().row(t) != base.frames.value().row(t));
    }
  }
}

TEST_CASE("batch loss gradient matches finite differences") {
  for (const auto out : {FeatureType::Units, FeatureType::Mel}) {
    AlignmentModel model(tiny_config(out));
    REQUIRE(model.store().num_scalars() <= 1000);
    auto pairs = synthetic_pairs(3, 2, model.config());
    test::jitter(model.store(), 0.1, 3);
    model.fit_output_normalization(pairs);
    const std::vector<std::string> skip{kNormScope};
    const auto r = test::grad_check(model.store(), [&] { return batch_loss(model, pairs, false).total; }, 1e-5, skip);
    CHECK(r.rel_error < 1e-3);
    const auto rt = test::grad_check(model.store(), [&] { return batch_loss(model, pairs, true).total; }, 1e-5, skip);
    CHECK(rt.rel_error < 1e-3);
  }
}

TEST_CASE("batch loss is invariant to batch order") {
  AlignmentModel model(small_config());
  auto pairs = synthetic_pairs(6, 3, model.config());
  const double a = batch_loss(model, pairs, false).total.item();
  std::reverse(pairs.begin(), pairs.end());
  std::rotate(pairs.begin(), pairs.begin() + 2, pairs.end());
  CHECK(std::abs(batch_loss(model, pairs, false).total.item() - a) < 1e-6);

  auto bad = synthetic_pairs(1, 4, model.config());
  bad[0].tgt = Matrix::Zero(3, 5);
  CHECK(code_of([&] { batch_loss(model, bad, false); }) == ErrorCode::ShapeError);
}

TEST_CASE("single-pair overfit") {
  AlignmentModel model(small_config());
  const auto pair = synthetic_pairs(1, 5, model.config());
  nn::AdamOptions opts;
  opts.lr = 1e-2;
  nn::Adam adam(model.store(), opts, {kNormScope});
  Rng rng(1);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 600; ++i) {
    adam.set_lr(1e-2 * 0.5 * (1.0 + std::cos(3.141592653589793 * i / 600.0)));
    last = train_step(model, adam, pair, false, rng);
    if (i == 0) first = last;
  }
  const auto loss = batch_loss(model, pair, false);
  MESSAGE("first " << first << " final " << loss.total.item() << " (l1 " << loss.l1 << ", stop " << loss.stop << ")");
  CHECK(loss.total.item() < 1e-3);
}

TEST_CASE("parallel VC pretraining halves the dev loss") {
  AlignmentModel model(small_config());
  const auto train = synthetic_pairs(1000, 6, model.config());
  const auto dev = synthetic_pairs(100, 7, model.config());
  const double untrained = dataset_loss(model, dev, false);
  const auto log = pretrain(model, recipe(Stage::PretrainParallelVc, 3), train, dev);
  MESSAGE("dev loss " << untrained << " -> " << log.dev_loss.back());
  CHECK(log.dev_loss.back() <= 0.5 * untrained);
  CHECK(model.lineage.at("pretrain") == "parallel_vc");
}

TEST_CASE("zero-epoch stages are identity") {
  AlignmentModel model(small_config());
  const auto data = synthetic_pairs(8, 8, model.config());
  const Vector before = model.store().flatten();
  pretrain(model, recipe(Stage::PretrainParallelVc, 0), data, data);
  const AlignmentRecipe ft[] = {recipe(Stage::FtSyntheticEl, 0), recipe(Stage::FtTargetEl, 0)};
  const FinetuneData fd[] = {{data, data}, {data, data}};
  finetune_schedule(model, ft, fd);
  CHECK(model.store().flatten() == before);
}

TEST_CASE("TTS then AE freezes the decoder and records lineage") {
  AlignmentModel model(small_config());
  const auto data = synthetic_pairs(24, 9, model.config());
  CHECK(code_of([&] { pretrain(model, recipe(Stage::PretrainAe, 1), data, data); }) == ErrorCode::ConfigError);
  CHECK(code_of([&] { train_stage(model, recipe(Stage::FtSyntheticEl, 1), data, data); }) == ErrorCode::ConfigError);
  pretrain(model, recipe(Stage::PretrainTts, 2), data, data);
  const Vector dec = decoder_params(model);
  const Vector all = model.store().flatten();
  pretrain(model, recipe(Stage::PretrainAe, 2), data, data);
  CHECK(decoder_params(model) == dec);
  CHECK(model.store().flatten() != all);
  CHECK(model.lineage.at("pretrain") == "tts_ae");

  const auto dir = test::scratch_dir("align_ft");
  const AlignmentRecipe wrong[] = {recipe(Stage::FtTargetEl, 1), recipe(Stage::FtSyntheticEl, 1)};
  const FinetuneData fd[] = {{data, data}, {data, data}};
  CHECK(code_of([&] { finetune_schedule(model, wrong, fd); }) == ErrorCode::ConfigError);
  const AlignmentRecipe ft[] = {recipe(Stage::FtSyntheticEl, 1), recipe(Stage::FtTargetEl, 1)};
  finetune_schedule(model, ft, fd, dir);
  CHECK(std::filesystem::exists(dir / (to_string(Stage::FtSyntheticEl) + ".ckpt")));
  CHECK(std::filesystem::exists(dir / (to_string(Stage::FtTargetEl) + ".ckpt")));
  nlohmann::json meta;
  const auto loaded = load_alignment(dir / (to_string(Stage::FtTargetEl) + ".ckpt"), &meta);
  const std::vector<std::string> stages = loaded->lineage.at("stages");
  CHECK(stages == std::vector<std::string>{"pretrain_tts", "pretrain_ae", "ft_synthetic_el", "ft_target_el"});
  CHECK(loaded->lineage.at("pretrain") == "tts_ae");
  CHECK(loaded->lineage.at("input") == "bnf");
  CHECK(loaded->lineage.at("output") == "units");
  CHECK(loaded->store().flatten() == model.store().flatten());
  CHECK(code_of([&] { train_stage(model, recipe(Stage::FtSyntheticEl, 1), data, data); }) == ErrorCode::ConfigError);
}

TEST_CASE("convert contracts") {
  AlignmentModel model(small_config());
  const auto data = synthetic_pairs(4, 10, model.config());
  const auto a = convert(model, data[0].src);
  const auto b = convert(model, data[0].src);
  CHECK(a.frames == b.frames);
  CHECK(a.frames.rows() == a.steps);
  CHECK(a.frames.rows() <= 3 * data[0].src.rows());
  CHECK(((a.frames.rowwise().sum().array() - 1.0).abs() < 1e-9).all());
  const auto one = convert(model, data[0].src, 1);
  CHECK(one.frames.rows() == 1);
  CHECK(one.truncated);
  CHECK(code_of([&] { convert(model, Matrix(0, 8)); }) == ErrorCode::EmptyInput);
  CHECK(code_of([&] { convert(model, Matrix::Zero(4, 5)); }) == ErrorCode::ShapeError);
}

TEST_CASE("mel steps round trip") {
  auto cfg = small_config();
  cfg.output = FeatureType::Mel;
  cfg.output_dim = 5;
  cfg.reduction = 3;
  AlignmentModel model(cfg);
  Rng rng(11);
  const Matrix mel = randn(10, 5, rng);
  const Matrix steps = model.to_steps(mel);
  CHECK(steps.rows() == 4);
  CHECK(steps.cols() == 15);
  CHECK((model.from_steps(steps, 10) - mel).cwiseAbs().maxCoeff() < 1e-12);
}
