#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "elvc/core/rng.hpp"
#include "elvc/core/types.hpp"
#include "elvc/nn/optim.hpp"
#include "elvc/nn/transformer.hpp"

namespace elvc::alignment {

enum class FeatureType { Mel, Bnf, Units };
enum class PretrainMode { ParallelVc, TtsAe };
enum class Stage { PretrainParallelVc, PretrainTts, PretrainAe, FtSyntheticEl, FtTargetEl };

std::string to_string(FeatureType t);
std::string to_string(PretrainMode m);
std::string to_string(Stage s);
FeatureType feature_type_from_string(const std::string& s);
PretrainMode pretrain_mode_from_string(const std::string& s);
Stage stage_from_string(const std::string& s);
bool is_pretrain(Stage s);

struct AlignmentConfig {
  FeatureType input = FeatureType::Bnf;
  FeatureType output = FeatureType::Units;
  int input_dim = 64;   ///< per input frame (BNF width or mel bins)
  int output_dim = 64;  ///< per output frame (unit count or mel bins)
  int reduction = 4;    ///< mel frames grouped per encoder / decoder step
  int dim = 64;
  int heads = 4;
  int ff_dim = 128;
  int encoder_blocks = 6;
  int decoder_blocks = 6;
  int vocab = 21;
  double prenet_dropout = 0.5;
  double max_frames_factor = 3.0;
  std::uint64_t seed = 1;
};

nlohmann::json to_json(const AlignmentConfig& c);
AlignmentConfig alignment_config_from_json(const nlohmann::json& j);

/// One training pair. `src` is BNF (40 ms) or mel (10 ms) frames; `tgt` is units (40 ms) or mel (10 ms).
/// `text` feeds the symbol encoder during TTS pretraining.
struct SequencePair {
  Matrix src;
  Matrix tgt;
  SymbolSequence text;
};

/// Stop labels for `steps` decoder steps: a single 1 at the final step.
Vector stop_labels(Eigen::Index steps);

class AlignmentModel {
 public:
  explicit AlignmentModel(AlignmentConfig config);
  AlignmentModel(const AlignmentModel&) = delete;
  AlignmentModel& operator=(const AlignmentModel&) = delete;

  /// Feature encoder memory, steps x dim.
  ad::Var encode(const Matrix& src) const;
  /// Symbol encoder memory, len x dim.
  ad::Var encode_text(const SymbolSequence& text) const;

  struct DecoderOutput {
    ad::Var frames;  ///< steps x step_dim (after the output activation)
    ad::Var logits;  ///< steps x step_dim before the output activation
    ad::Var stop;    ///< steps x 1 logits
  };
  /// Decoder over explicit step inputs (row 0 is the go frame). `dropout_rng` enables prenet dropout.
  DecoderOutput decode(const ad::Var& memory, const Matrix& step_inputs, Rng* dropout_rng = nullptr) const;
  /// Teacher forcing: inputs are the go frame followed by targets shifted by one step.
  DecoderOutput teacher_forced(const ad::Var& memory, const Matrix& target_steps, Rng* dropout_rng = nullptr) const;

  /// Target frames -> decoder step rows (mel: normalized and grouped by `reduction`).
  Matrix to_steps(const Matrix& frames) const;
  /// Inverse of to_steps; `frames` trims the padded tail when non-negative.
  Matrix from_steps(const Matrix& steps, Eigen::Index frames = -1) const;
  Eigen::Index step_dim() const;
  Eigen::Index input_steps(Eigen::Index frames) const;

  /// Sets the mel output normalization from training targets (no-op for unit outputs).
  void fit_output_normalization(std::span<const SequencePair> pairs);

  const AlignmentConfig& config() const { return config_; }
  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }

  /// Training history: pretrain mode, completed stages, feature types.
  nlohmann::json lineage;

 private:
  AlignmentConfig config_;
  nn::ParameterStore store_;
  nn::Linear input_proj_;
  std::vector<nn::EncoderBlock> encoder_;
  nn::LayerNorm encoder_norm_;
  nn::Embedding text_embed_;
  std::vector<nn::EncoderBlock> text_encoder_;
  nn::LayerNorm text_norm_;
  nn::Linear prenet1_, prenet2_;
  std::vector<nn::DecoderBlock> decoder_;
  nn::LayerNorm decoder_norm_;
  nn::Linear frame_out_, stop_out_;
  nn::Parameter* out_mean_ = nullptr;
  nn::Parameter* out_scale_ = nullptr;
};

/// Scopes holding non-trainable statistics; always frozen.
inline const char* kNormScope = "norm";
/// Decoder-side scope frozen during AE pretraining.
inline const char* kDecoderScope = "decoder";

struct LossValue {
  ad::Var total;
  double l1 = 0.0;
  double stop = 0.0;
};

/// Mean over pairs of (L1 on step frames + BCE on stop flags).
LossValue batch_loss(const AlignmentModel& model, std::span<const SequencePair> batch, bool text_input,
                     Rng* dropout_rng = nullptr);

/// One optimizer update; returns the batch loss before the update.
double train_step(AlignmentModel& model, nn::Adam& adam, std::span<const SequencePair> batch, bool text_input,
                  Rng& rng);

struct AlignmentRecipe {
  Stage stage = Stage::PretrainParallelVc;
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
};

using EpochCallback = std::function<void(int epoch, double train_loss, double dev_loss)>;

/// Runs one stage in place, validating stage order against the model lineage.
/// PretrainAe freezes the decoder scope in addition to recipe.frozen_scopes.
TrainLog train_stage(AlignmentModel& model, const AlignmentRecipe& recipe, std::span<const SequencePair> train,
                     std::span<const SequencePair> dev, const std::optional<std::filesystem::path>& checkpoint_dir = {},
                     const EpochCallback& on_epoch = {});

TrainLog pretrain(AlignmentModel& model, const AlignmentRecipe& recipe, std::span<const SequencePair> train,
                  std::span<const SequencePair> dev, const std::optional<std::filesystem::path>& checkpoint_dir = {},
                  const EpochCallback& on_epoch = {});

struct FinetuneData {
  std::span<const SequencePair> train;
  std::span<const SequencePair> dev;
};

/// FtSyntheticEl then FtTargetEl; each stage checkpointed as <dir>/<stage>.ckpt.
std::vector<TrainLog> finetune_schedule(AlignmentModel& model, std::span<const AlignmentRecipe> recipes,
                                        std::span<const FinetuneData> data,
                                        const std::optional<std::filesystem::path>& checkpoint_dir = {},
                                        const EpochCallback& on_epoch = {});

double dataset_loss(const AlignmentModel& model, std::span<const SequencePair> data, bool text_input);

struct ConvertResult {
  Matrix frames;  ///< units (rows sum to 1) or mel frames
  Eigen::Index steps = 0;
  bool truncated = false;
};

/// Greedy autoregressive decoding; stops when sigmoid(stop) > 0.5 or after `max_steps`
/// (0: max_frames_factor x input steps).
ConvertResult convert(const AlignmentModel& model, const Matrix& src, int max_steps = 0);

void save_alignment(const std::filesystem::path& path, const AlignmentModel& model, nlohmann::json meta = {});
std::unique_ptr<AlignmentModel> load_alignment(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

}  // namespace elvc::alignment
