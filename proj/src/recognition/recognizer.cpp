#include "elvc/recognition/recognizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "elvc/core/error.hpp"
#include "elvc/eval/metrics.hpp"
#include "elvc/nn/checkpoint.hpp"
#include "elvc/nn/optim.hpp"
#include "elvc/recognition/ctc.hpp"

namespace elvc::recognition {

using ad::Var;

nlohmann::json to_json(const RecognizerConfig& c) {
  return {{"n_mels", c.n_mels},
          {"subsampling", c.subsampling},
          {"dim", c.dim},
          {"heads", c.heads},
          {"ff_dim", c.ff_dim},
          {"encoder_blocks", c.encoder_blocks},
          {"decoder_blocks", c.decoder_blocks},
          {"conv_kernel", c.conv_kernel},
          {"bnf_dim", c.bnf_dim},
          {"vocab", c.vocab},
          {"ctc_weight", c.ctc_weight},
          {"attn_weight", c.attn_weight},
          {"sid_weight", c.sid_weight},
          {"ctc_rescore_weight", c.ctc_rescore_weight},
          {"seed", c.seed}};
}

RecognizerConfig recognizer_config_from_json(const nlohmann::json& j) {
  RecognizerConfig c;
  c.n_mels = j.value("n_mels", c.n_mels);
  c.subsampling = j.value("subsampling", c.subsampling);
  c.dim = j.value("dim", c.dim);
  c.heads = j.value("heads", c.heads);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.encoder_blocks = j.value("encoder_blocks", c.encoder_blocks);
  c.decoder_blocks = j.value("decoder_blocks", c.decoder_blocks);
  c.conv_kernel = j.value("conv_kernel", c.conv_kernel);
  c.bnf_dim = j.value("bnf_dim", c.bnf_dim);
  c.vocab = j.value("vocab", c.vocab);
  c.ctc_weight = j.value("ctc_weight", c.ctc_weight);
  c.attn_weight = j.value("attn_weight", c.attn_weight);
  c.sid_weight = j.value("sid_weight", c.sid_weight);
  c.ctc_rescore_weight = j.value("ctc_rescore_weight", c.ctc_rescore_weight);
  c.seed = j.value("seed", c.seed);
  return c;
}

void RecognitionBatch::push_back(dsp::MelSpectrogram mel, SymbolSequence transcript, SpeechType type) {
  features.push_back(std::move(mel));
  transcripts.push_back(std::move(transcript));
  speech_types.push_back(type);
}

RecognitionBatch RecognitionBatch::subset(std::span<const std::size_t> indices) const {
  RecognitionBatch out;
  for (std::size_t i : indices) out.push_back(features.at(i), transcripts.at(i), speech_types.at(i));
  return out;
}

void RecognitionBatch::append(const RecognitionBatch& other) {
  for (std::size_t i = 0; i < other.size(); ++i) {
    push_back(other.features[i], other.transcripts[i], other.speech_types[i]);
  }
}

Matrix utterance_cmvn(const Matrix& frames) {
  const Eigen::RowVectorXd mu = frames.colwise().mean();
  const Matrix centered = frames.rowwise() - mu;
  const Eigen::RowVectorXd sd =
      (centered.array().square().colwise().sum() / static_cast<double>(std::max<Eigen::Index>(frames.rows(), 1)))
          .sqrt()
          .max(1e-3);
  return (centered.array().rowwise() / sd.array()).matrix();
}

RecognizerModel::RecognizerModel(RecognizerConfig config) : config_(config) {
  require(config_.subsampling >= 1 && config_.encoder_blocks >= 1 && config_.decoder_blocks >= 1,
          ErrorCode::ConfigError, "recognizer: invalid block counts");
  require(config_.vocab >= 2, ErrorCode::ConfigError, "recognizer: vocab must include blank and a symbol");
  Rng rng(derive_seed(config_.seed, 0x5245434fULL));
  const Eigen::Index d = config_.dim;
  input_proj_ = nn::Linear(store_, "encoder.input", config_.n_mels * config_.subsampling, d, rng);
  for (int b = 0; b < config_.encoder_blocks; ++b) {
    encoder_.emplace_back(store_, "encoder.block" + std::to_string(b), d, config_.heads, config_.ff_dim,
                          config_.conv_kernel, rng);
  }
  bnf_proj_ = nn::Linear(store_, "encoder.bnf", d, config_.bnf_dim, rng);
  ctc_out_ = nn::Linear(store_, "ctc.out", config_.bnf_dim, config_.vocab, rng);
  sid_out_ = nn::Linear(store_, "sid.out", d, 1, rng);
  token_embed_ = nn::Embedding(store_, "decoder.embed", config_.vocab, d, rng);
  decoder_memory_ = nn::Linear(store_, "decoder.memory", config_.bnf_dim, d, rng);
  for (int b = 0; b < config_.decoder_blocks; ++b) {
    decoder_.emplace_back(store_, "decoder.block" + std::to_string(b), d, config_.heads, config_.ff_dim, rng);
  }
  decoder_norm_ = nn::LayerNorm(store_, "decoder.norm", d);
  decoder_out_ = nn::Linear(store_, "decoder.out", d, config_.vocab, rng);
}

Eigen::Index RecognizerModel::encoded_length(Eigen::Index frames) const {
  return (frames + config_.subsampling - 1) / config_.subsampling;
}

RecognizerModel::Encoded RecognizerModel::encode(const Matrix& mel) const {
  require(mel.cols() == config_.n_mels, ErrorCode::ShapeError,
          "recognizer: expected " + std::to_string(config_.n_mels) + " mel bins, got " + std::to_string(mel.cols()));
  require(mel.rows() > 0, ErrorCode::EmptyInput, "recognizer: empty features");
  Var x = ad::stack_frames(Var(utterance_cmvn(mel)), config_.subsampling);
  x = input_proj_(x);
  x = x + Var(nn::sinusoidal_positions(x.rows(), x.cols()));
  for (const auto& block : encoder_) x = block(x);
  Encoded e;
  e.hidden = x;
  e.bnf = bnf_proj_(x);
  e.ctc_logits = ctc_out_(e.bnf);
  e.sid_logit = sid_out_(ad::mean_rows(x));
  return e;
}

Var RecognizerModel::decoder_logits(const Var& bnf, std::span<const int> prefix) const {
  std::vector<int> tokens;
  tokens.reserve(prefix.size() + 1);
  tokens.push_back(kBlank);
  tokens.insert(tokens.end(), prefix.begin(), prefix.end());
  Var h = token_embed_(tokens);
  h = h + Var(nn::sinusoidal_positions(h.rows(), h.cols()));
  const Var memory = decoder_memory_(bnf);
  const Matrix causal = nn::causal_mask(h.rows());
  for (const auto& block : decoder_) h = block(h, memory, causal);
  return decoder_out_(decoder_norm_(h));
}

namespace {

std::vector<int> to_classes(const SymbolSequence& s) {
  std::vector<int> out(s.size());
  std::transform(s.begin(), s.end(), out.begin(), to_class);
  return out;
}

SymbolSequence to_symbols(std::span<const int> classes) {
  SymbolSequence out;
  for (int c : classes) {
    if (c != kBlank) out.push_back(to_symbol(c));
  }
  return out;
}

void check_batch(const RecognitionBatch& batch) {
  require(!batch.empty(), ErrorCode::EmptyBatch, "recognition: empty batch");
  require(batch.transcripts.size() == batch.size() && batch.speech_types.size() == batch.size(),
          ErrorCode::ShapeError, "recognition: batch lists differ in length");
}

Matrix sid_labels(std::span<const SpeechType> types) {
  Matrix labels(static_cast<Eigen::Index>(types.size()), 1);
  for (std::size_t i = 0; i < types.size(); ++i) {
    labels(static_cast<Eigen::Index>(i), 0) = types[i] == SpeechType::El ? 1.0 : 0.0;
  }
  return labels;
}

}  // namespace

ForwardOutput forward(const RecognizerModel& model, const RecognitionBatch& batch) {
  check_batch(batch);
  ad::NoGradGuard guard;
  ForwardOutput out;
  out.sid_logits.resize(static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto e = model.encode(batch.features[i].frames);
    out.ctc_logits.push_back(e.ctc_logits.value());
    out.attn_logits.push_back(model.decoder_logits(e.bnf, to_classes(batch.transcripts[i])).value());
    out.sid_logits(static_cast<Eigen::Index>(i)) = e.sid_logit.item();
    out.bnf.push_back({e.bnf.value(), 10.0 * model.config().subsampling});
  }
  return out;
}

Var sid_loss(const Var& sid_logits, std::span<const SpeechType> types) {
  require(!types.empty(), ErrorCode::EmptyBatch, "sid_loss: empty input");
  require(sid_logits.value().size() == static_cast<Eigen::Index>(types.size()), ErrorCode::ShapeError,
          "sid_loss: logits and labels differ in length");
  Var column = sid_logits.cols() == 1 ? sid_logits : ad::transpose(sid_logits);
  return ad::bce_with_logits(column, sid_labels(types));
}

double sid_loss(const Vector& sid_logits, std::span<const SpeechType> types) {
  return sid_loss(Var(Matrix(sid_logits)), types).item();
}

std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::Standard: return "standard";
    case LossMode::Intermediate: return "intermediate";
    case LossMode::IntermediateNoMask: return "intermediate_no_mask";
  }
  return "standard";
}

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "standard") return LossMode::Standard;
  if (s == "intermediate") return LossMode::Intermediate;
  if (s == "intermediate_no_mask") return LossMode::IntermediateNoMask;
  fail(ErrorCode::ConfigError, "unknown loss mode '" + s + "'");
}

LossResult compute_loss(const RecognizerModel& model, const RecognitionBatch& batch, LossMode mode) {
  check_batch(batch);
  const auto& cfg = model.config();
  const bool use_sid = mode != LossMode::Standard;
  const bool mask_typical = mode == LossMode::Intermediate;

  std::vector<Var> sid_logits;
  Var ctc_sum, attn_sum;
  std::size_t recognized = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const bool recognize = !mask_typical || batch.speech_types[i] == SpeechType::El;
    if (!recognize && !use_sid) continue;
    const auto e = model.encode(batch.features[i].frames);
    if (use_sid) sid_logits.push_back(e.sid_logit);
    if (!recognize) continue;
    const std::vector<int> labels = to_classes(batch.transcripts[i]);
    require(!labels.empty(), ErrorCode::EmptyInput, "recognition: empty transcript");
    const Var ctc = (1.0 / static_cast<double>(labels.size())) * ctc_loss(e.ctc_logits, labels);
    std::vector<int> targets = labels;
    targets.push_back(kBlank);
    const Var attn = ad::cross_entropy(model.decoder_logits(e.bnf, labels), targets);
    ctc_sum = ctc_sum.valid() ? ctc_sum + ctc : ctc;
    attn_sum = attn_sum.valid() ? attn_sum + attn : attn;
    ++recognized;
  }

  LossResult result;
  result.breakdown.recognized = recognized;
  std::vector<Var> terms;
  if (use_sid) {
    const Var sid = sid_loss(ad::concat_rows(sid_logits), batch.speech_types);
    result.breakdown.sid = sid.item();
    terms.push_back(cfg.sid_weight * sid);
  }
  if (recognized > 0) {
    const double inv = 1.0 / static_cast<double>(recognized);
    const Var ctc = inv * ctc_sum;
    const Var attn = inv * attn_sum;
    result.breakdown.ctc = ctc.item();
    result.breakdown.attn = attn.item();
    terms.push_back(cfg.ctc_weight * ctc);
    terms.push_back(cfg.attn_weight * attn);
  }
  Var total = terms.empty() ? Var::scalar(0.0) : terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
  result.total = total;
  result.breakdown.total = total.item();
  return result;
}

LossResult loss_intermediate(const RecognizerModel& model, const RecognitionBatch& batch) {
  return compute_loss(model, batch, LossMode::Intermediate);
}

namespace {

double dataset_loss(const RecognizerModel& model, const RecognitionBatch& data, LossMode mode, int batch_size) {
  if (data.empty()) return std::numeric_limits<double>::quiet_NaN();
  ad::NoGradGuard guard;
  double total = 0.0;
  std::size_t n = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      idx.push_back(i);
    }
    const auto sub = data.subset(idx);
    total += compute_loss(model, sub, mode).breakdown.total * static_cast<double>(idx.size());
    n += idx.size();
  }
  return total / static_cast<double>(n);
}

}  // namespace

TrainLog train_stage(RecognizerModel& model, const RecognitionRecipe& recipe, const RecognitionBatch& train,
                     const RecognitionBatch& dev, const std::optional<std::filesystem::path>& checkpoint_dir,
                     const EpochCallback& on_epoch) {
  TrainLog log;
  if (recipe.epochs <= 0) return log;
  require(!train.empty(), ErrorCode::ConfigError, "train_stage '" + recipe.name + "': no training data");
  require(recipe.batch_size >= 1, ErrorCode::ConfigError, "train_stage: batch_size must be >= 1");
  nn::AdamOptions opts;
  opts.lr = recipe.lr;
  opts.warmup_steps = recipe.warmup_steps;
  nn::Adam adam(model.store(), opts);
  Rng rng(derive_seed(recipe.seed, 0x545241494eULL));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= recipe.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(recipe.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(recipe.batch_size));
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      const auto batch = train.subset(idx);
      auto loss = compute_loss(model, batch, recipe.mode);
      ad::backward(loss.total);
      adam.step();
      epoch_loss += loss.breakdown.total * static_cast<double>(idx.size());
      seen += idx.size();
    }
    log.train_loss.push_back(epoch_loss / static_cast<double>(seen));
    log.dev_loss.push_back(dataset_loss(model, dev, recipe.mode, recipe.batch_size));
    if (checkpoint_dir) {
      char name[64];
      std::snprintf(name, sizeof(name), "%s_epoch%03d.ckpt", recipe.name.c_str(), epoch);
      save_recognizer(*checkpoint_dir / name, model,
                      {{"stage", recipe.name}, {"epoch", epoch}, {"mode", to_string(recipe.mode)}});
    }
    if (on_epoch) on_epoch(epoch, log.train_loss.back(), log.dev_loss.back());
  }
  return log;
}

namespace {

Matrix log_softmax_last(const Matrix& logits) {
  const Eigen::RowVectorXd row = logits.row(logits.rows() - 1);
  const double m = row.maxCoeff();
  const double lse = m + std::log((row.array() - m).exp().sum());
  return (row.array() - lse).matrix();
}

int default_max_length(const RecognizerModel& model, Eigen::Index frames, int requested) {
  return requested > 0 ? requested : static_cast<int>(2 * model.encoded_length(frames) + 4);
}

}  // namespace

SymbolSequence decode_attention_greedy(const RecognizerModel& model, const dsp::MelSpectrogram& mel, int max_length) {
  ad::NoGradGuard guard;
  const auto e = model.encode(mel.frames);
  const int limit = default_max_length(model, mel.frames.rows(), max_length);
  std::vector<int> prefix;
  while (static_cast<int>(prefix.size()) < limit) {
    const Matrix lp = log_softmax_last(model.decoder_logits(e.bnf, prefix).value());
    Eigen::Index best;
    lp.row(0).maxCoeff(&best);
    if (best == kBlank) break;
    prefix.push_back(static_cast<int>(best));
  }
  return to_symbols(prefix);
}

SymbolSequence decode(const RecognizerModel& model, const dsp::MelSpectrogram& mel, const DecodeOptions& options) {
  ad::NoGradGuard guard;
  if (options.mode == DecodeMode::Greedy) {
    return to_symbols(ctc_greedy(model.encode(mel.frames).ctc_logits.value()));
  }
  require(options.beam_width >= 1, ErrorCode::ConfigError, "decode: beam width must be >= 1");
  const auto e = model.encode(mel.frames);
  const int limit = default_max_length(model, mel.frames.rows(), options.max_length);
  struct Hyp {
    std::vector<int> tokens;
    double score;
  };
  std::vector<Hyp> live{{{}, 0.0}};
  std::vector<Hyp> finished;
  const auto width = static_cast<std::size_t>(options.beam_width);
  for (int step = 0; step < limit && !live.empty(); ++step) {
    std::vector<std::pair<Hyp, bool>> candidates;
    for (const auto& h : live) {
      const Matrix lp = log_softmax_last(model.decoder_logits(e.bnf, h.tokens).value());
      for (Eigen::Index c = 0; c < lp.cols(); ++c) {
        Hyp next{h.tokens, h.score + lp(0, c)};
        const bool ended = c == kBlank;
        if (!ended) next.tokens.push_back(static_cast<int>(c));
        candidates.emplace_back(std::move(next), ended);
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const auto& a, const auto& b) { return a.first.score > b.first.score; });
    live.clear();
    for (std::size_t k = 0; k < std::min(width, candidates.size()); ++k) {
      auto& [h, ended] = candidates[k];
      (ended ? finished : live).push_back(std::move(h));
    }
  }
  for (auto& h : live) finished.push_back(h);
  if (finished.size() > width) {
    std::stable_sort(finished.begin(), finished.end(), [](const Hyp& a, const Hyp& b) { return a.score > b.score; });
    finished.resize(width);
  }
  const double lambda = model.config().ctc_rescore_weight;
  Matrix ctc_lp = e.ctc_logits.value();
  for (Eigen::Index t = 0; t < ctc_lp.rows(); ++t) {
    const double m = ctc_lp.row(t).maxCoeff();
    const double lse = m + std::log((ctc_lp.row(t).array() - m).exp().sum());
    ctc_lp.row(t).array() -= lse;
  }
  const Hyp* best = nullptr;
  double best_score = -std::numeric_limits<double>::infinity();
  for (const auto& h : finished) {
    const double ctc = h.tokens.empty() && ctc_lp.rows() == 0 ? 0.0 : -ctc_neg_log_likelihood(ctc_lp, h.tokens);
    double s = (1.0 - lambda) * h.score + lambda * ctc;
    if (!std::isfinite(s)) s = -std::numeric_limits<double>::max() + h.score;
    if (!best || s > best_score) {
      best = &h;
      best_score = s;
    }
  }
  return best ? to_symbols(best->tokens) : SymbolSequence{};
}

BnfSequence extract_bnf(const RecognizerModel& model, const dsp::MelSpectrogram& mel) {
  ad::NoGradGuard guard;
  return {model.encode(mel.frames).bnf.value(), mel.frame_shift_ms * model.config().subsampling};
}

double sid_accuracy(const RecognizerModel& model, const RecognitionBatch& data) {
  check_batch(data);
  ad::NoGradGuard guard;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const bool el = model.encode(data.features[i].frames).sid_logit.item() > 0.0;
    if (el == (data.speech_types[i] == SpeechType::El)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double corpus_cer(const RecognizerModel& model, const RecognitionBatch& data) {
  check_batch(data);
  std::size_t edits = 0, symbols = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const SymbolSequence hyp = decode(model, data.features[i]);
    edits += eval::edit_distance<Symbol>(data.transcripts[i], hyp);
    symbols += data.transcripts[i].size();
  }
  require(symbols > 0, ErrorCode::EmptyReference, "corpus_cer: empty references");
  return 100.0 * static_cast<double>(edits) / static_cast<double>(symbols);
}

void save_recognizer(const std::filesystem::path& path, const RecognizerModel& model, nlohmann::json meta) {
  meta["kind"] = "recognizer";
  meta["config"] = to_json(model.config());
  nn::save_checkpoint(path, model.store(), meta);
}

std::unique_ptr<RecognizerModel> load_recognizer(const std::filesystem::path& path, nlohmann::json* meta) {
  auto ckpt = nn::load_checkpoint(path);
  require(ckpt.meta.value("kind", std::string{}) == "recognizer", ErrorCode::ConfigError,
          path.string() + " is not a recognizer checkpoint");
  auto model = std::make_unique<RecognizerModel>(recognizer_config_from_json(ckpt.meta.at("config")));
  model->store().load_values(ckpt.tensors);
  if (meta) *meta = std::move(ckpt.meta);
  return model;
}

}  // namespace elvc::recognition
