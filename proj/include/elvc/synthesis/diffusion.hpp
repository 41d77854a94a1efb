#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "elvc/core/rng.hpp"
#include "elvc/dsp/features.hpp"
#include "elvc/nn/optim.hpp"
#include "elvc/nn/transformer.hpp"

namespace elvc::synthesis {

/// Linear beta schedule with closed-form marginals. Timesteps are 1-based.
class NoiseSchedule {
 public:
  NoiseSchedule(int steps = 100, double beta_start = 1e-4, double beta_end = 0.2);

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta(int n) const { return beta_.at(index(n)); }
  double alpha(int n) const { return 1.0 - beta(n); }
  double alpha_bar(int n) const { return alpha_bar_.at(index(n)); }
  /// Posterior variance of q(x_{n-1} | x_n, x_0).
  double posterior_variance(int n) const;

 private:
  std::size_t index(int n) const;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

/// x_n = sqrt(alpha_bar_n) x0 + sqrt(1 - alpha_bar_n) eps.
Matrix q_sample(const NoiseSchedule& schedule, const Matrix& x0, int n, const Matrix& eps);

/// (1 + w) eps_cond - w eps_uncond.
Matrix guided_noise(const Matrix& eps_cond, const Matrix& eps_uncond, double w);

struct DiffusionConfig {
  int n_mels = 80;
  int unit_dim = 64;
  int speaker_dim = 32;
  int channels = 64;
  int residual_blocks = 6;
  int kernel = 3;
  int dilation_cycle = 3;  ///< dilation = 2^(block % cycle)
  int steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.2;
  double p_uncond = 0.1;
  double guidance = 1.0;
  std::uint64_t seed = 1;
};

nlohmann::json to_json(const DiffusionConfig& c);
DiffusionConfig diffusion_config_from_json(const nlohmann::json& j);

/// Unit-normalized speaker vector.
struct SpeakerEmbedding {
  enum class Source { ToyStats, External };
  Vector vector;
  Source source = Source::ToyStats;
};

/// TOY_STATS: L2-normalized fixed random projection of the per-coefficient mean and std of c1..cD.
SpeakerEmbedding speaker_embedding(std::span<const Vector> waveforms, int dim = 32, const dsp::McepConfig& mcep = {});
/// EXTERNAL: reads a 1 x D or D x 1 matrix dump and normalizes it.
SpeakerEmbedding load_external_embedding(const std::filesystem::path& path);
void save_embedding(const std::filesystem::path& path, const SpeakerEmbedding& e);
SpeakerEmbedding load_embedding(const std::filesystem::path& path);

/// Linear interpolation of unit rows along time to `frames` rows. Rows stay convex combinations.
Matrix interpolate_units(const Matrix& units, Eigen::Index frames);

/// Soft units rescaled to unit mean deviation: U * p - 1; the form in which units condition the noise network.
Matrix unit_logits(const Matrix& units);

class DiffusionDecoder {
 public:
  explicit DiffusionDecoder(DiffusionConfig config);
  DiffusionDecoder(const DiffusionDecoder&) = delete;
  DiffusionDecoder& operator=(const DiffusionDecoder&) = delete;

  /// Predicted noise for normalized noisy mel `x` (T x n_mels) at timestep n.
  /// `units` is T x unit_dim, or empty to use the learned null condition.
  ad::Var predict_noise(const Matrix& x, int n, const Matrix* units, const Vector& speaker) const;

  Matrix normalize(const Matrix& mel) const;
  Matrix denormalize(const Matrix& x) const;
  /// Per-bin mel statistics used to map log-mel into the diffusion space.
  void fit_normalization(std::span<const Matrix> mels);
  void set_identity_normalization();

  const DiffusionConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }

 private:
  struct Block {
    nn::ConditionalLayerNorm norm;
    nn::Linear time, conv, cond, out;
    int dilation;
  };
  DiffusionConfig config_;
  NoiseSchedule schedule_;
  nn::ParameterStore store_;
  nn::Linear in_proj_, time1_, time2_;
  nn::Parameter* null_units_ = nullptr;
  std::vector<Block> blocks_;
  nn::Linear skip_proj_, out_proj_, direct_;
  nn::Parameter* mel_mean_ = nullptr;
  nn::Parameter* mel_scale_ = nullptr;
};

inline const char* kDiffusionNormScope = "norm";

/// Single-utterance training example in raw log-mel space with frame-aligned units.
struct SynthesisExample {
  Matrix mel;    ///< T x n_mels
  Matrix units;  ///< T_u x unit_dim (interpolated to T)
  Vector speaker;
};

struct TrainStepStats {
  int timestep = 0;
  bool dropped_condition = false;
};

/// Denoising loss for one example: n ~ U[1, N], eps ~ N(0, I), the unit condition replaced by the
/// null token with probability p_uncond.
ad::Var train_loss(const DiffusionDecoder& decoder, const SynthesisExample& example, Rng& rng,
                   TrainStepStats* stats = nullptr);

struct SynthesisRecipe {
  std::string phase = "pretrain";
  int epochs = 20;
  int batch_size = 8;
  double lr = 1e-3;
  int warmup_steps = 100;
  std::uint64_t seed = 1;
  std::vector<std::string> frozen_scopes;
};

struct TrainLog {
  std::vector<double> train_loss;
  std::vector<double> dev_loss;
  long null_condition_uses = 0;
};

using EpochCallback = std::function<void(int epoch, double train_loss, double dev_loss)>;

TrainLog train(DiffusionDecoder& decoder, const SynthesisRecipe& recipe, std::span<const SynthesisExample> train,
               std::span<const SynthesisExample> dev, const EpochCallback& on_epoch = {});
/// Multi-speaker pretraining; fits the mel normalization from the training set first.
TrainLog pretrain_multispeaker(DiffusionDecoder& decoder, const SynthesisRecipe& recipe,
                               std::span<const SynthesisExample> train, std::span<const SynthesisExample> dev,
                               const EpochCallback& on_epoch = {});
/// Few-shot adaptation (all parameters updated unless frozen in the recipe).
TrainLog adapt_fewshot(DiffusionDecoder& decoder, const SynthesisRecipe& recipe,
                       std::span<const SynthesisExample> train, std::span<const SynthesisExample> dev,
                       const EpochCallback& on_epoch = {});

/// Mean denoising loss with a fixed evaluation seed.
double evaluation_loss(const DiffusionDecoder& decoder, std::span<const SynthesisExample> data, std::uint64_t seed);

/// Ancestral sampling with classifier-free guidance. Output frame count: `frames` when positive,
/// else units.rows() * 4.
dsp::MelSpectrogram sample(const DiffusionDecoder& decoder, const Matrix& units, const Vector& speaker, double w,
                           std::uint64_t seed, Eigen::Index frames = 0);

void save_decoder(const std::filesystem::path& path, const DiffusionDecoder& decoder, nlohmann::json meta = {});
std::unique_ptr<DiffusionDecoder> load_decoder(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

/// Waveform generator from mel-spectrograms.
class Vocoder {
 public:
  virtual ~Vocoder() = default;
  virtual Vector synthesize(const dsp::MelSpectrogram& mel) const = 0;
};

class GriffinLimVocoder : public Vocoder {
 public:
  explicit GriffinLimVocoder(int iterations = 60) : iterations_(iterations) {}
  Vector synthesize(const dsp::MelSpectrogram& mel) const override;

 private:
  int iterations_;
};

/// Runs an external command with "{mel}" and "{wav}" placeholders replaced by file paths;
/// the command reads the mel dump and writes a 16 kHz WAV.
class ExternalVocoder : public Vocoder {
 public:
  ExternalVocoder(std::string command, std::filesystem::path work_dir);
  Vector synthesize(const dsp::MelSpectrogram& mel) const override;

 private:
  std::string command_;
  std::filesystem::path work_dir_;
};

}  // namespace elvc::synthesis
