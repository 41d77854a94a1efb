#include "elvc/synthesis/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>

#include "elvc/core/error.hpp"
#include "elvc/core/matrix_io.hpp"
#include "elvc/core/wav.hpp"
#include "elvc/nn/checkpoint.hpp"

namespace elvc::synthesis {

using ad::Var;

NoiseSchedule::NoiseSchedule(int steps, double beta_start, double beta_end) {
  require(steps >= 1, ErrorCode::ConfigError, "schedule: steps must be >= 1");
  require(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end, ErrorCode::ConfigError,
          "schedule: need 0 < beta_start <= beta_end < 1");
  beta_.resize(static_cast<std::size_t>(steps));
  alpha_bar_.resize(beta_.size());
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    beta_[static_cast<std::size_t>(i)] = beta_start + frac * (beta_end - beta_start);
    prod *= 1.0 - beta_[static_cast<std::size_t>(i)];
    alpha_bar_[static_cast<std::size_t>(i)] = prod;
  }
}

std::size_t NoiseSchedule::index(int n) const {
  require(n >= 1 && n <= steps(), ErrorCode::RangeError,
          "timestep " + std::to_string(n) + " outside [1, " + std::to_string(steps()) + "]");
  return static_cast<std::size_t>(n - 1);
}

double NoiseSchedule::posterior_variance(int n) const {
  const double prev = n > 1 ? alpha_bar(n - 1) : 1.0;
  return (1.0 - prev) / (1.0 - alpha_bar(n)) * beta(n);
}

Matrix q_sample(const NoiseSchedule& schedule, const Matrix& x0, int n, const Matrix& eps) {
  require(x0.rows() == eps.rows() && x0.cols() == eps.cols(), ErrorCode::ShapeError, "q_sample: eps shape mismatch");
  const double ab = schedule.alpha_bar(n);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

Matrix guided_noise(const Matrix& eps_cond, const Matrix& eps_uncond, double w) {
  require(eps_cond.rows() == eps_uncond.rows() && eps_cond.cols() == eps_uncond.cols(), ErrorCode::ShapeError,
          "guided_noise: shape mismatch");
  return (1.0 + w) * eps_cond - w * eps_uncond;
}

nlohmann::json to_json(const DiffusionConfig& c) {
  return {{"n_mels", c.n_mels},         {"unit_dim", c.unit_dim},
          {"speaker_dim", c.speaker_dim}, {"channels", c.channels},
          {"residual_blocks", c.residual_blocks}, {"kernel", c.kernel},
          {"dilation_cycle", c.dilation_cycle}, {"steps", c.steps},
          {"beta_start", c.beta_start}, {"beta_end", c.beta_end},
          {"p_uncond", c.p_uncond},     {"guidance", c.guidance},
          {"seed", c.seed}};
}

DiffusionConfig diffusion_config_from_json(const nlohmann::json& j) {
  DiffusionConfig c;
  c.n_mels = j.value("n_mels", c.n_mels);
  c.unit_dim = j.value("unit_dim", c.unit_dim);
  c.speaker_dim = j.value("speaker_dim", c.speaker_dim);
  c.channels = j.value("channels", c.channels);
  c.residual_blocks = j.value("residual_blocks", c.residual_blocks);
  c.kernel = j.value("kernel", c.kernel);
  c.dilation_cycle = j.value("dilation_cycle", c.dilation_cycle);
  c.steps = j.value("steps", c.steps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  c.p_uncond = j.value("p_uncond", c.p_uncond);
  c.guidance = j.value("guidance", c.guidance);
  c.seed = j.value("seed", c.seed);
  return c;
}

SpeakerEmbedding speaker_embedding(std::span<const Vector> waveforms, int dim, const dsp::McepConfig& mcep) {
  require(!waveforms.empty(), ErrorCode::EmptyInput, "speaker_embedding: no utterances");
  require(dim >= 1, ErrorCode::ConfigError, "speaker_embedding: dim must be >= 1");
  std::vector<Matrix> blocks;
  Eigen::Index rows = 0;
  for (const auto& w : waveforms) {
    const auto seq = dsp::mel_cepstrum(w, mcep);
    blocks.push_back(seq.frames.rightCols(seq.frames.cols() - 1));
    rows += blocks.back().rows();
  }
  const Eigen::Index d = blocks.front().cols();
  RowVector sum = RowVector::Zero(d), sq = RowVector::Zero(d);
  for (const auto& b : blocks) {
    sum += b.colwise().sum();
    sq += b.array().square().matrix().colwise().sum();
  }
  const RowVector mean = sum / static_cast<double>(rows);
  const RowVector sd = (sq / static_cast<double>(rows) - mean.cwiseProduct(mean)).cwiseMax(0.0).cwiseSqrt();
  RowVector stats(2 * d);
  stats << mean, sd;
  Rng rng(0x53504b52ULL);
  const Matrix proj = randn(2 * d, dim, rng, 1.0);
  const RowVector v = stats * proj;
  const double norm = v.norm();
  require(norm > 0.0, ErrorCode::InvalidInput, "speaker_embedding: degenerate statistics");
  return {(v / norm).transpose(), SpeakerEmbedding::Source::ToyStats};
}

SpeakerEmbedding load_external_embedding(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorCode::IoError, "speaker embedding not found: " + path.string());
  const Matrix m = read_matrix(path);
  Vector v = Eigen::Map<const Vector>(m.data(), m.size());
  const double norm = v.norm();
  require(norm > 0.0 && v.allFinite(), ErrorCode::InvalidInput, "speaker embedding must be finite and nonzero");
  return {v / norm, SpeakerEmbedding::Source::External};
}

void save_embedding(const std::filesystem::path& path, const SpeakerEmbedding& e) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_matrix(path, e.vector.transpose(), DType::Float64);
}

SpeakerEmbedding load_embedding(const std::filesystem::path& path) {
  auto e = load_external_embedding(path);
  e.source = SpeakerEmbedding::Source::ToyStats;
  return e;
}

Matrix interpolate_units(const Matrix& units, Eigen::Index frames) {
  require(units.rows() > 0 && frames > 0, ErrorCode::ShapeError, "interpolate_units: empty sequence");
  Matrix out(frames, units.cols());
  const double ratio = static_cast<double>(units.rows()) / static_cast<double>(frames);
  for (Eigen::Index j = 0; j < frames; ++j) {
    const double pos = std::clamp((static_cast<double>(j) + 0.5) * ratio - 0.5, 0.0,
                                  static_cast<double>(units.rows() - 1));
    const auto lo = static_cast<Eigen::Index>(std::floor(pos));
    const Eigen::Index hi = std::min(lo + 1, units.rows() - 1);
    const double f = pos - static_cast<double>(lo);
    out.row(j) = (1.0 - f) * units.row(lo) + f * units.row(hi);
  }
  return out;
}

Matrix unit_logits(const Matrix& units) {
  const double u = static_cast<double>(units.cols());
  return (units.array() * u - 1.0).matrix();
}

DiffusionDecoder::DiffusionDecoder(DiffusionConfig config)
    : config_(config), schedule_(config.steps, config.beta_start, config.beta_end) {
  require(config_.residual_blocks >= 1 && config_.channels >= 1, ErrorCode::ConfigError,
          "diffusion: need at least one residual block");
  require(config_.p_uncond >= 0.0 && config_.p_uncond <= 1.0, ErrorCode::ConfigError,
          "diffusion: p_uncond must be in [0, 1]");
  Rng rng(derive_seed(config_.seed, 0x444946465553ULL));
  const Eigen::Index c = config_.channels;
  in_proj_ = nn::Linear(store_, "net.input", config_.n_mels, c, rng);
  time1_ = nn::Linear(store_, "net.time1", c, c, rng);
  time2_ = nn::Linear(store_, "net.time2", c, c, rng);
  null_units_ = &store_.add("net.null_units", Matrix::Zero(1, config_.unit_dim));
  for (int b = 0; b < config_.residual_blocks; ++b) {
    const std::string name = "net.block" + std::to_string(b);
    Block blk;
    blk.norm = nn::ConditionalLayerNorm(store_, name + ".cln", c, config_.speaker_dim, rng);
    blk.time = nn::Linear(store_, name + ".time", c, c, rng);
    blk.conv = nn::Linear(store_, name + ".conv", c * config_.kernel, 2 * c, rng);
    blk.cond = nn::Linear(store_, name + ".cond", config_.unit_dim, 2 * c, rng);
    blk.out = nn::Linear(store_, name + ".out", c, 2 * c, rng);
    blk.dilation = 1 << (b % std::max(1, config_.dilation_cycle));
    blocks_.push_back(std::move(blk));
  }
  skip_proj_ = nn::Linear(store_, "net.skip", c, c, rng);
  out_proj_ = nn::Linear(store_, "net.output", c, config_.n_mels, rng);
  direct_ = nn::Linear(store_, "net.direct", config_.n_mels, config_.n_mels, rng);
  mel_mean_ = &store_.add("norm.mel_mean", Matrix::Zero(1, config_.n_mels));
  mel_scale_ = &store_.add("norm.mel_scale", Matrix::Ones(1, config_.n_mels));
}

Var DiffusionDecoder::predict_noise(const Matrix& x, int n, const Matrix* units, const Vector& speaker) const {
  require(x.cols() == config_.n_mels, ErrorCode::ShapeError, "diffusion: mel dim mismatch");
  require(speaker.size() == config_.speaker_dim, ErrorCode::ShapeError, "diffusion: speaker dim mismatch");
  require(n >= 1 && n <= config_.steps, ErrorCode::RangeError, "diffusion: timestep out of range");
  const Eigen::Index t = x.rows();
  const Eigen::Index c = config_.channels;
  Var cond;
  if (units) {
    require(units->rows() == t && units->cols() == config_.unit_dim, ErrorCode::ShapeError,
            "diffusion: units must be frame-aligned with the mel");
    cond = Var(unit_logits(*units));
  } else {
    cond = ad::add_row(Var(Matrix::Zero(t, config_.unit_dim)), Var::param(*null_units_));
  }
  const Var spk(Matrix(speaker.transpose()));
  const Var temb = time2_(ad::silu(time1_(Var(nn::sinusoidal_embedding(static_cast<double>(n), c)))));
  const Var xv(x);
  Var h = in_proj_(xv);
  Var skip;
  const double res_scale = 1.0 / std::sqrt(2.0);
  for (const auto& blk : blocks_) {
    const Var y = ad::add_row(blk.norm(h, spk), blk.time(temb));
    const Var z = blk.conv(ad::time_unfold(y, config_.kernel, blk.dilation)) + blk.cond(cond);
    const Var gated = ad::hadamard(ad::tanh(ad::slice_cols(z, 0, c)), ad::sigmoid(ad::slice_cols(z, c, c)));
    const Var o = blk.out(gated);
    h = res_scale * (h + ad::slice_cols(o, 0, c));
    const Var s = ad::slice_cols(o, c, c);
    skip = skip.valid() ? skip + s : s;
  }
  skip = (1.0 / std::sqrt(static_cast<double>(blocks_.size()))) * skip;
  return out_proj_(ad::silu(skip_proj_(skip + h))) + direct_(xv);
}

Matrix DiffusionDecoder::normalize(const Matrix& mel) const {
  return ((mel.rowwise() - mel_mean_->value.row(0)).array().rowwise() / mel_scale_->value.row(0).array()).matrix();
}

Matrix DiffusionDecoder::denormalize(const Matrix& x) const {
  return ((x.array().rowwise() * mel_scale_->value.row(0).array()).rowwise() + mel_mean_->value.row(0).array())
      .matrix();
}

void DiffusionDecoder::fit_normalization(std::span<const Matrix> mels) {
  require(!mels.empty(), ErrorCode::EmptyInput, "diffusion: no mels for normalization");
  RowVector sum = RowVector::Zero(config_.n_mels), sq = RowVector::Zero(config_.n_mels);
  double n = 0.0;
  for (const auto& m : mels) {
    sum += m.colwise().sum();
    sq += m.array().square().matrix().colwise().sum();
    n += static_cast<double>(m.rows());
  }
  const RowVector mean = sum / n;
  mel_mean_->value = mean;
  mel_scale_->value = (sq / n - mean.cwiseProduct(mean)).cwiseMax(1e-6).cwiseSqrt();
}

void DiffusionDecoder::set_identity_normalization() {
  mel_mean_->value.setZero();
  mel_scale_->value.setOnes();
}

Var train_loss(const DiffusionDecoder& decoder, const SynthesisExample& example, Rng& rng, TrainStepStats* stats) {
  const auto& cfg = decoder.config();
  require(example.mel.rows() > 0, ErrorCode::EmptyInput, "diffusion: empty mel");
  const Matrix x0 = decoder.normalize(example.mel);
  const Matrix units = interpolate_units(example.units, x0.rows());
  require(units.rows() == x0.rows(), ErrorCode::ShapeError, "diffusion: unit/mel length mismatch");
  std::uniform_int_distribution<int> step(1, cfg.steps);
  const int n = step(rng);
  const Matrix eps = randn(x0.rows(), x0.cols(), rng);
  std::bernoulli_distribution drop(cfg.p_uncond);
  const bool dropped = cfg.p_uncond > 0.0 && drop(rng);
  if (stats) {
    stats->timestep = n;
    stats->dropped_condition = dropped;
  }
  const Matrix xn = q_sample(decoder.schedule(), x0, n, eps);
  const Var pred = decoder.predict_noise(xn, n, dropped ? nullptr : &units, example.speaker);
  return ad::mse_loss(pred, eps);
}

double evaluation_loss(const DiffusionDecoder& decoder, std::span<const SynthesisExample> data, std::uint64_t seed) {
  if (data.empty()) return std::nan("");
  ad::NoGradGuard guard;
  Rng rng(seed);
  double total = 0.0;
  for (const auto& ex : data) total += train_loss(decoder, ex, rng).item();
  return total / static_cast<double>(data.size());
}

TrainLog train(DiffusionDecoder& decoder, const SynthesisRecipe& recipe, std::span<const SynthesisExample> data,
               std::span<const SynthesisExample> dev, const EpochCallback& on_epoch) {
  TrainLog log;
  if (recipe.epochs <= 0) return log;
  require(!data.empty(), ErrorCode::ConfigError, "synthesis " + recipe.phase + ": no training data");
  require(recipe.batch_size >= 1, ErrorCode::ConfigError, "synthesis: batch_size must be >= 1");
  std::vector<std::string> frozen = recipe.frozen_scopes;
  frozen.emplace_back(kDiffusionNormScope);
  nn::AdamOptions opts;
  opts.lr = recipe.lr;
  opts.warmup_steps = recipe.warmup_steps;
  nn::Adam adam(decoder.store(), opts, frozen);
  Rng rng(derive_seed(recipe.seed, std::hash<std::string>{}(recipe.phase)));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= recipe.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(recipe.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(recipe.batch_size));
      Var total;
      for (std::size_t i = start; i < stop; ++i) {
        TrainStepStats st;
        const Var l = train_loss(decoder, data[order[i]], rng, &st);
        if (st.dropped_condition) ++log.null_condition_uses;
        total = total.valid() ? total + l : l;
      }
      total = (1.0 / static_cast<double>(stop - start)) * total;
      sum += total.item() * static_cast<double>(stop - start);
      ad::backward(total);
      adam.step();
    }
    log.train_loss.push_back(sum / static_cast<double>(data.size()));
    log.dev_loss.push_back(evaluation_loss(decoder, dev, derive_seed(recipe.seed, 0xDE5ULL)));
    if (on_epoch) on_epoch(epoch, log.train_loss.back(), log.dev_loss.back());
  }
  return log;
}

TrainLog pretrain_multispeaker(DiffusionDecoder& decoder, const SynthesisRecipe& recipe,
                               std::span<const SynthesisExample> data, std::span<const SynthesisExample> dev,
                               const EpochCallback& on_epoch) {
  require(!data.empty(), ErrorCode::ConfigError, "synthesis pretrain: no training data");
  std::vector<Matrix> mels;
  for (const auto& ex : data) mels.push_back(ex.mel);
  decoder.fit_normalization(mels);
  return train(decoder, recipe, data, dev, on_epoch);
}

TrainLog adapt_fewshot(DiffusionDecoder& decoder, const SynthesisRecipe& recipe,
                       std::span<const SynthesisExample> data, std::span<const SynthesisExample> dev,
                       const EpochCallback& on_epoch) {
  return train(decoder, recipe, data, dev, on_epoch);
}

dsp::MelSpectrogram sample(const DiffusionDecoder& decoder, const Matrix& units, const Vector& speaker, double w,
                           std::uint64_t seed, Eigen::Index frames) {
  require(units.rows() > 0, ErrorCode::EmptyInput, "sample: empty units");
  ad::NoGradGuard guard;
  const auto& cfg = decoder.config();
  const auto& sched = decoder.schedule();
  const Eigen::Index t = frames > 0 ? frames : units.rows() * 4;
  const Matrix cond = interpolate_units(units, t);
  Rng rng(seed);
  Matrix x = randn(t, cfg.n_mels, rng);
  for (int n = cfg.steps; n >= 1; --n) {
    Matrix eps = decoder.predict_noise(x, n, &cond, speaker).value();
    if (w != 0.0) eps = guided_noise(eps, decoder.predict_noise(x, n, nullptr, speaker).value(), w);
    const double coef = sched.beta(n) / std::sqrt(1.0 - sched.alpha_bar(n));
    Matrix mean = (x - coef * eps) / std::sqrt(sched.alpha(n));
    if (n > 1) {
      x = mean + std::sqrt(sched.posterior_variance(n)) * randn(t, cfg.n_mels, rng);
    } else {
      x = std::move(mean);
    }
  }
  dsp::MelSpectrogram mel;
  mel.frames = decoder.denormalize(x);
  mel.n_mels = cfg.n_mels;
  return mel;
}

void save_decoder(const std::filesystem::path& path, const DiffusionDecoder& decoder, nlohmann::json meta) {
  meta["kind"] = "diffusion_decoder";
  meta["config"] = to_json(decoder.config());
  nn::save_checkpoint(path, decoder.store(), meta);
}

std::unique_ptr<DiffusionDecoder> load_decoder(const std::filesystem::path& path, nlohmann::json* meta) {
  auto ckpt = nn::load_checkpoint(path);
  require(ckpt.meta.value("kind", std::string{}) == "diffusion_decoder", ErrorCode::ConfigError,
          path.string() + " is not a diffusion decoder checkpoint");
  auto dec = std::make_unique<DiffusionDecoder>(diffusion_config_from_json(ckpt.meta.at("config")));
  dec->store().load_values(ckpt.tensors);
  if (meta) *meta = std::move(ckpt.meta);
  return dec;
}

Vector GriffinLimVocoder::synthesize(const dsp::MelSpectrogram& mel) const {
  return dsp::griffin_lim(mel, iterations_);
}

ExternalVocoder::ExternalVocoder(std::string command, std::filesystem::path work_dir)
    : command_(std::move(command)), work_dir_(std::move(work_dir)) {
  require(command_.find("{mel}") != std::string::npos && command_.find("{wav}") != std::string::npos,
          ErrorCode::ConfigError, "external vocoder command needs {mel} and {wav} placeholders");
}

Vector ExternalVocoder::synthesize(const dsp::MelSpectrogram& mel) const {
  std::filesystem::create_directories(work_dir_);
  const auto mel_path = work_dir_ / "vocoder_input.emat";
  const auto wav_path = work_dir_ / "vocoder_output.wav";
  write_matrix(mel_path, mel.frames, DType::Float32);
  std::string cmd = command_;
  cmd.replace(cmd.find("{mel}"), 5, mel_path.string());
  cmd.replace(cmd.find("{wav}"), 5, wav_path.string());
  const int rc = std::system(cmd.c_str());
  require(rc == 0, ErrorCode::StageFailure, "external vocoder exited with status " + std::to_string(rc));
  auto wav = read_wav(wav_path);
  require(wav.sample_rate == kSampleRate, ErrorCode::IoError, "external vocoder must produce 16 kHz audio");
  return wav.samples;
}

}  // namespace elvc::synthesis
