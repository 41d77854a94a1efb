#include "elvc/alignment/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "elvc/core/error.hpp"
#include "elvc/nn/checkpoint.hpp"
#include "elvc/units/units.hpp"

namespace elvc::alignment {

using ad::Var;

std::string to_string(FeatureType t) {
  switch (t) {
    case FeatureType::Mel: return "mel";
    case FeatureType::Bnf: return "bnf";
    case FeatureType::Units: return "units";
  }
  return "mel";
}

std::string to_string(PretrainMode m) { return m == PretrainMode::ParallelVc ? "parallel_vc" : "tts_ae"; }

std::string to_string(Stage s) {
  switch (s) {
    case Stage::PretrainParallelVc: return "pretrain_parallel_vc";
    case Stage::PretrainTts: return "pretrain_tts";
    case Stage::PretrainAe: return "pretrain_ae";
    case Stage::FtSyntheticEl: return "ft_synthetic_el";
    case Stage::FtTargetEl: return "ft_target_el";
  }
  return "pretrain_parallel_vc";
}

FeatureType feature_type_from_string(const std::string& s) {
  if (s == "mel") return FeatureType::Mel;
  if (s == "bnf") return FeatureType::Bnf;
  if (s == "units") return FeatureType::Units;
  fail(ErrorCode::ConfigError, "unknown feature type '" + s + "'");
}

PretrainMode pretrain_mode_from_string(const std::string& s) {
  if (s == "parallel_vc") return PretrainMode::ParallelVc;
  if (s == "tts_ae") return PretrainMode::TtsAe;
  fail(ErrorCode::ConfigError, "unknown pretrain mode '" + s + "'");
}

Stage stage_from_string(const std::string& s) {
  for (Stage st : {Stage::PretrainParallelVc, Stage::PretrainTts, Stage::PretrainAe, Stage::FtSyntheticEl,
                   Stage::FtTargetEl}) {
    if (to_string(st) == s) return st;
  }
  fail(ErrorCode::ConfigError, "unknown alignment stage '" + s + "'");
}

bool is_pretrain(Stage s) {
  return s == Stage::PretrainParallelVc || s == Stage::PretrainTts || s == Stage::PretrainAe;
}

nlohmann::json to_json(const AlignmentConfig& c) {
  return {{"input", to_string(c.input)},
          {"output", to_string(c.output)},
          {"input_dim", c.input_dim},
          {"output_dim", c.output_dim},
          {"reduction", c.reduction},
          {"dim", c.dim},
          {"heads", c.heads},
          {"ff_dim", c.ff_dim},
          {"encoder_blocks", c.encoder_blocks},
          {"decoder_blocks", c.decoder_blocks},
          {"vocab", c.vocab},
          {"prenet_dropout", c.prenet_dropout},
          {"max_frames_factor", c.max_frames_factor},
          {"seed", c.seed}};
}

AlignmentConfig alignment_config_from_json(const nlohmann::json& j) {
  AlignmentConfig c;
  if (j.contains("input")) c.input = feature_type_from_string(j.at("input").get<std::string>());
  if (j.contains("output")) c.output = feature_type_from_string(j.at("output").get<std::string>());
  c.input_dim = j.value("input_dim", c.input_dim);
  c.output_dim = j.value("output_dim", c.output_dim);
  c.reduction = j.value("reduction", c.reduction);
  c.dim = j.value("dim", c.dim);
  c.heads = j.value("heads", c.heads);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.encoder_blocks = j.value("encoder_blocks", c.encoder_blocks);
  c.decoder_blocks = j.value("decoder_blocks", c.decoder_blocks);
  c.vocab = j.value("vocab", c.vocab);
  c.prenet_dropout = j.value("prenet_dropout", c.prenet_dropout);
  c.max_frames_factor = j.value("max_frames_factor", c.max_frames_factor);
  c.seed = j.value("seed", c.seed);
  return c;
}

Vector stop_labels(Eigen::Index steps) {
  Vector v = Vector::Zero(steps);
  if (steps > 0) v(steps - 1) = 1.0;
  return v;
}

namespace {

Matrix cmvn(const Matrix& frames) {
  const RowVector mu = frames.colwise().mean();
  const Matrix c = frames.rowwise() - mu;
  const RowVector sd = (c.array().square().colwise().sum() / static_cast<double>(frames.rows())).sqrt().max(1e-3);
  return (c.array().rowwise() / sd.array()).matrix();
}

Matrix stack(const Matrix& x, int k) {
  const Eigen::Index rows = (x.rows() + k - 1) / k;
  Matrix out = Matrix::Zero(rows, x.cols() * k);
  for (Eigen::Index i = 0; i < x.rows(); ++i) out.block(i / k, (i % k) * x.cols(), 1, x.cols()) = x.row(i);
  return out;
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  std::bernoulli_distribution keep(1.0 - p);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  }
  return m;
}

}  // namespace

AlignmentModel::AlignmentModel(AlignmentConfig config) : config_(config) {
  require(config_.encoder_blocks >= 1 && config_.decoder_blocks >= 1, ErrorCode::ConfigError,
          "alignment: block counts must be >= 1");
  require(config_.input != FeatureType::Units, ErrorCode::ConfigError, "alignment: units are not an input type");
  require(config_.output != FeatureType::Bnf, ErrorCode::ConfigError, "alignment: BNF is not an output type");
  require(config_.reduction >= 1, ErrorCode::ConfigError, "alignment: reduction must be >= 1");
  require(config_.prenet_dropout >= 0.0 && config_.prenet_dropout < 1.0, ErrorCode::ConfigError,
          "alignment: prenet dropout must be in [0, 1)");
  Rng rng(derive_seed(config_.seed, 0x414c49474eULL));
  const Eigen::Index d = config_.dim;
  const Eigen::Index in_dim =
      config_.input == FeatureType::Mel ? config_.input_dim * config_.reduction : config_.input_dim;
  input_proj_ = nn::Linear(store_, "encoder.input", in_dim, d, rng);
  for (int b = 0; b < config_.encoder_blocks; ++b) {
    encoder_.emplace_back(store_, "encoder.block" + std::to_string(b), d, config_.heads, config_.ff_dim, rng);
  }
  encoder_norm_ = nn::LayerNorm(store_, "encoder.norm", d);
  text_embed_ = nn::Embedding(store_, "text_encoder.embed", config_.vocab, d, rng);
  for (int b = 0; b < config_.encoder_blocks; ++b) {
    text_encoder_.emplace_back(store_, "text_encoder.block" + std::to_string(b), d, config_.heads, config_.ff_dim,
                               rng);
  }
  text_norm_ = nn::LayerNorm(store_, "text_encoder.norm", d);
  prenet1_ = nn::Linear(store_, "decoder.prenet1", step_dim(), d, rng);
  prenet2_ = nn::Linear(store_, "decoder.prenet2", d, d, rng);
  for (int b = 0; b < config_.decoder_blocks; ++b) {
    decoder_.emplace_back(store_, "decoder.block" + std::to_string(b), d, config_.heads, config_.ff_dim, rng);
  }
  decoder_norm_ = nn::LayerNorm(store_, "decoder.norm", d);
  frame_out_ = nn::Linear(store_, "decoder.frame_out", d, step_dim(), rng);
  stop_out_ = nn::Linear(store_, "decoder.stop_out", d, 1, rng);
  out_mean_ = &store_.add("norm.out_mean", Matrix::Zero(1, config_.output_dim));
  out_scale_ = &store_.add("norm.out_scale", Matrix::Ones(1, config_.output_dim));
  lineage = {{"input", to_string(config_.input)},
             {"output", to_string(config_.output)},
             {"pretrain", nullptr},
             {"stages", nlohmann::json::array()}};
}

Eigen::Index AlignmentModel::step_dim() const {
  return config_.output == FeatureType::Mel ? config_.output_dim * config_.reduction : config_.output_dim;
}

Eigen::Index AlignmentModel::input_steps(Eigen::Index frames) const {
  return config_.input == FeatureType::Mel ? (frames + config_.reduction - 1) / config_.reduction : frames;
}

Var AlignmentModel::encode(const Matrix& src) const {
  require(src.rows() > 0, ErrorCode::EmptyInput, "alignment: empty source sequence");
  require(src.cols() == config_.input_dim, ErrorCode::ShapeError,
          "alignment: source dim " + std::to_string(src.cols()) + " != " + std::to_string(config_.input_dim));
  const Matrix x = config_.input == FeatureType::Mel ? stack(cmvn(src), config_.reduction) : src;
  Var h = input_proj_(Var(x));
  h = h + Var(nn::sinusoidal_positions(h.rows(), h.cols()));
  for (const auto& b : encoder_) h = b(h);
  return encoder_norm_(h);
}

Var AlignmentModel::encode_text(const SymbolSequence& text) const {
  require(!text.empty(), ErrorCode::EmptyInput, "alignment: empty text");
  std::vector<int> ids(text.size());
  std::transform(text.begin(), text.end(), ids.begin(), [](Symbol s) { return s + 1; });
  Var h = text_embed_(ids);
  h = h + Var(nn::sinusoidal_positions(h.rows(), h.cols()));
  for (const auto& b : text_encoder_) h = b(h);
  return text_norm_(h);
}

AlignmentModel::DecoderOutput AlignmentModel::decode(const Var& memory, const Matrix& step_inputs,
                                                     Rng* dropout_rng) const {
  require(step_inputs.cols() == step_dim(), ErrorCode::ShapeError, "alignment: decoder input dim mismatch");
  const double p = config_.prenet_dropout;
  Var h = ad::relu(prenet1_(Var(step_inputs)));
  if (dropout_rng && p > 0.0) h = ad::hadamard(h, Var(dropout_mask(h.rows(), h.cols(), p, *dropout_rng)));
  h = ad::relu(prenet2_(h));
  if (dropout_rng && p > 0.0) h = ad::hadamard(h, Var(dropout_mask(h.rows(), h.cols(), p, *dropout_rng)));
  h = h + Var(nn::sinusoidal_positions(h.rows(), h.cols()));
  const Matrix causal = nn::causal_mask(h.rows());
  for (const auto& b : decoder_) h = b(h, memory, causal);
  h = decoder_norm_(h);
  DecoderOutput out;
  out.logits = frame_out_(h);
  out.frames = config_.output == FeatureType::Units ? ad::softmax_rows(out.logits) : out.logits;
  out.stop = stop_out_(h);
  return out;
}

AlignmentModel::DecoderOutput AlignmentModel::teacher_forced(const Var& memory, const Matrix& target_steps,
                                                             Rng* dropout_rng) const {
  Matrix inputs = Matrix::Zero(target_steps.rows(), target_steps.cols());
  if (target_steps.rows() > 1) inputs.bottomRows(target_steps.rows() - 1) = target_steps.topRows(target_steps.rows() - 1);
  return decode(memory, inputs, dropout_rng);
}

Matrix AlignmentModel::to_steps(const Matrix& frames) const {
  require(frames.cols() == config_.output_dim, ErrorCode::ShapeError,
          "alignment: target dim " + std::to_string(frames.cols()) + " != " + std::to_string(config_.output_dim));
  if (config_.output == FeatureType::Units) return frames;
  const Matrix norm =
      ((frames.rowwise() - out_mean_->value.row(0)).array().rowwise() / out_scale_->value.row(0).array()).matrix();
  return stack(norm, config_.reduction);
}

Matrix AlignmentModel::from_steps(const Matrix& steps, Eigen::Index frames) const {
  if (config_.output == FeatureType::Units) {
    Matrix u = steps.cwiseMax(0.0);
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      const double s = u.row(i).sum();
      if (s > 0.0) u.row(i) /= s;
      else u.row(i).setConstant(1.0 / static_cast<double>(u.cols()));
    }
    return frames >= 0 ? Matrix(u.topRows(std::min(frames, u.rows()))) : u;
  }
  const Eigen::Index f = config_.output_dim;
  const int r = config_.reduction;
  Matrix out(steps.rows() * r, f);
  for (Eigen::Index i = 0; i < steps.rows(); ++i) {
    for (int k = 0; k < r; ++k) out.row(i * r + k) = steps.block(i, k * f, 1, f);
  }
  out = ((out.array().rowwise() * out_scale_->value.row(0).array()).rowwise() + out_mean_->value.row(0).array())
            .matrix();
  return frames >= 0 ? Matrix(out.topRows(std::min(frames, out.rows()))) : out;
}

void AlignmentModel::fit_output_normalization(std::span<const SequencePair> pairs) {
  if (config_.output != FeatureType::Mel || pairs.empty()) return;
  RowVector sum = RowVector::Zero(config_.output_dim);
  RowVector sq = RowVector::Zero(config_.output_dim);
  double n = 0.0;
  for (const auto& p : pairs) {
    sum += p.tgt.colwise().sum();
    sq += p.tgt.array().square().matrix().colwise().sum();
    n += static_cast<double>(p.tgt.rows());
  }
  const RowVector mean = sum / n;
  out_mean_->value = mean;
  out_scale_->value = (sq / n - mean.cwiseProduct(mean)).cwiseMax(1e-6).cwiseSqrt();
}

LossValue batch_loss(const AlignmentModel& model, std::span<const SequencePair> batch, bool text_input,
                     Rng* dropout_rng) {
  require(!batch.empty(), ErrorCode::EmptyBatch, "alignment: empty batch");
  Var total;
  LossValue out;
  const Eigen::Index u = model.step_dim();
  const Matrix centering = Matrix::Identity(u, u) - Matrix::Constant(u, u, 1.0 / static_cast<double>(u));
  for (const auto& pair : batch) {
    require(pair.tgt.rows() > 0, ErrorCode::ShapeError, "alignment: empty target");
    const Var memory = text_input ? model.encode_text(pair.text) : model.encode(pair.src);
    const Matrix target = model.to_steps(pair.tgt);
    const auto dec = model.teacher_forced(memory, target, dropout_rng);
    const Var l1 = model.config().output == FeatureType::Units
                       ? ad::l1_loss(ad::matmul(dec.logits, Var(centering)), units::centered_log(target))
                       : ad::l1_loss(dec.frames, target);
    const Var stop = ad::bce_with_logits(dec.stop, stop_labels(target.rows()));
    out.l1 += l1.item();
    out.stop += stop.item();
    const Var term = l1 + stop;
    total = total.valid() ? total + term : term;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.total = inv * total;
  out.l1 *= inv;
  out.stop *= inv;
  return out;
}

double train_step(AlignmentModel& model, nn::Adam& adam, std::span<const SequencePair> batch, bool text_input,
                  Rng& rng) {
  auto loss = batch_loss(model, batch, text_input, &rng);
  const double value = loss.total.item();
  ad::backward(loss.total);
  adam.step();
  return value;
}

double dataset_loss(const AlignmentModel& model, std::span<const SequencePair> data, bool text_input) {
  if (data.empty()) return std::nan("");
  ad::NoGradGuard guard;
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    total += batch_loss(model, data.subspan(i, 1), text_input).total.item();
  }
  return total / static_cast<double>(data.size());
}

namespace {

bool has_stage(const nlohmann::json& lineage, Stage s) {
  for (const auto& st : lineage.at("stages")) {
    if (st.get<std::string>() == to_string(s)) return true;
  }
  return false;
}

void check_order(const AlignmentModel& model, Stage stage) {
  const auto& lin = model.lineage;
  const std::string name = to_string(stage);
  switch (stage) {
    case Stage::PretrainParallelVc:
    case Stage::PretrainTts:
      require(!has_stage(lin, Stage::FtSyntheticEl) && !has_stage(lin, Stage::FtTargetEl), ErrorCode::ConfigError,
              name + " after fine-tuning");
      break;
    case Stage::PretrainAe:
      require(has_stage(lin, Stage::PretrainTts), ErrorCode::ConfigError,
              "pretrain_ae requires a pretrain_tts checkpoint");
      break;
    case Stage::FtSyntheticEl:
      require(has_stage(lin, Stage::PretrainParallelVc) || has_stage(lin, Stage::PretrainAe), ErrorCode::ConfigError,
              "ft_synthetic_el requires a parallel-VC or AE pretrained model");
      require(!has_stage(lin, Stage::FtTargetEl), ErrorCode::ConfigError, "ft_synthetic_el after ft_target_el");
      break;
    case Stage::FtTargetEl:
      require(has_stage(lin, Stage::FtSyntheticEl), ErrorCode::ConfigError,
              "ft_target_el requires ft_synthetic_el first");
      break;
  }
}

}  // namespace

TrainLog train_stage(AlignmentModel& model, const AlignmentRecipe& recipe, std::span<const SequencePair> train,
                     std::span<const SequencePair> dev, const std::optional<std::filesystem::path>& checkpoint_dir,
                     const EpochCallback& on_epoch) {
  check_order(model, recipe.stage);
  TrainLog log;
  if (recipe.epochs > 0) {
    require(!train.empty(), ErrorCode::ConfigError, to_string(recipe.stage) + ": no training data");
    require(recipe.batch_size >= 1, ErrorCode::ConfigError, "alignment: batch_size must be >= 1");
    const bool text_input = recipe.stage == Stage::PretrainTts;
    std::vector<std::string> frozen = recipe.frozen_scopes;
    frozen.emplace_back(kNormScope);
    if (recipe.stage == Stage::PretrainAe) frozen.emplace_back(kDecoderScope);
    nn::AdamOptions opts;
    opts.lr = recipe.lr;
    opts.warmup_steps = recipe.warmup_steps;
    nn::Adam adam(model.store(), opts, frozen);
    Rng rng(derive_seed(recipe.seed, std::hash<std::string>{}(to_string(recipe.stage))));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<SequencePair> batch;
    for (int epoch = 1; epoch <= recipe.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      double sum = 0.0;
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(recipe.batch_size)) {
        batch.clear();
        for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(recipe.batch_size));
             ++i) {
          batch.push_back(train[order[i]]);
        }
        sum += train_step(model, adam, batch, text_input, rng) * static_cast<double>(batch.size());
      }
      log.train_loss.push_back(sum / static_cast<double>(train.size()));
      log.dev_loss.push_back(dataset_loss(model, dev, text_input));
      if (on_epoch) on_epoch(epoch, log.train_loss.back(), log.dev_loss.back());
    }
  }
  model.lineage["stages"].push_back(to_string(recipe.stage));
  if (recipe.stage == Stage::PretrainParallelVc) model.lineage["pretrain"] = to_string(PretrainMode::ParallelVc);
  if (recipe.stage == Stage::PretrainAe) model.lineage["pretrain"] = to_string(PretrainMode::TtsAe);
  if (checkpoint_dir) {
    save_alignment(*checkpoint_dir / (to_string(recipe.stage) + ".ckpt"), model,
                   {{"train_loss", log.train_loss}, {"dev_loss", log.dev_loss}});
  }
  return log;
}

TrainLog pretrain(AlignmentModel& model, const AlignmentRecipe& recipe, std::span<const SequencePair> train,
                  std::span<const SequencePair> dev, const std::optional<std::filesystem::path>& checkpoint_dir,
                  const EpochCallback& on_epoch) {
  require(is_pretrain(recipe.stage), ErrorCode::ConfigError, to_string(recipe.stage) + " is not a pretrain stage");
  return train_stage(model, recipe, train, dev, checkpoint_dir, on_epoch);
}

std::vector<TrainLog> finetune_schedule(AlignmentModel& model, std::span<const AlignmentRecipe> recipes,
                                        std::span<const FinetuneData> data,
                                        const std::optional<std::filesystem::path>& checkpoint_dir,
                                        const EpochCallback& on_epoch) {
  require(recipes.size() == 2 && data.size() == 2, ErrorCode::ConfigError,
          "finetune_schedule: expected two stages with data");
  require(recipes[0].stage == Stage::FtSyntheticEl && recipes[1].stage == Stage::FtTargetEl, ErrorCode::ConfigError,
          "finetune_schedule: stages must be ft_synthetic_el then ft_target_el");
  std::vector<TrainLog> logs;
  for (std::size_t i = 0; i < 2; ++i) {
    logs.push_back(train_stage(model, recipes[i], data[i].train, data[i].dev, checkpoint_dir, on_epoch));
  }
  return logs;
}

ConvertResult convert(const AlignmentModel& model, const Matrix& src, int max_steps) {
  require(src.rows() > 0, ErrorCode::EmptyInput, "convert: empty source");
  ad::NoGradGuard guard;
  const Var memory = model.encode(src);
  const Eigen::Index limit =
      max_steps > 0 ? max_steps
                    : std::max<Eigen::Index>(
                          1, static_cast<Eigen::Index>(std::ceil(model.config().max_frames_factor *
                                                                 static_cast<double>(model.input_steps(src.rows())))));
  Matrix inputs = Matrix::Zero(1, model.step_dim());
  Matrix outputs(0, model.step_dim());
  ConvertResult result;
  for (Eigen::Index step = 0; step < limit; ++step) {
    const auto dec = model.decode(memory, inputs);
    const Eigen::Index last = dec.frames.rows() - 1;
    outputs.conservativeResize(outputs.rows() + 1, Eigen::NoChange);
    outputs.row(outputs.rows() - 1) = dec.frames.value().row(last);
    const double stop_prob = 1.0 / (1.0 + std::exp(-dec.stop.value()(last, 0)));
    if (stop_prob > 0.5) break;
    if (step + 1 == limit) {
      result.truncated = true;
      break;
    }
    inputs.conservativeResize(inputs.rows() + 1, Eigen::NoChange);
    inputs.row(inputs.rows() - 1) = outputs.row(outputs.rows() - 1);
  }
  result.steps = outputs.rows();
  result.frames = model.from_steps(outputs);
  return result;
}

void save_alignment(const std::filesystem::path& path, const AlignmentModel& model, nlohmann::json meta) {
  meta["kind"] = "alignment";
  meta["config"] = to_json(model.config());
  meta["lineage"] = model.lineage;
  nn::save_checkpoint(path, model.store(), meta);
}

std::unique_ptr<AlignmentModel> load_alignment(const std::filesystem::path& path, nlohmann::json* meta) {
  auto ckpt = nn::load_checkpoint(path);
  require(ckpt.meta.value("kind", std::string{}) == "alignment", ErrorCode::ConfigError,
          path.string() + " is not an alignment checkpoint");
  auto model = std::make_unique<AlignmentModel>(alignment_config_from_json(ckpt.meta.at("config")));
  model->store().load_values(ckpt.tensors);
  model->lineage = ckpt.meta.at("lineage");
  if (meta) *meta = std::move(ckpt.meta);
  return model;
}

}  // namespace elvc::alignment
