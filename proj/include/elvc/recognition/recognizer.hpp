#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "elvc/core/types.hpp"
#include "elvc/dsp/features.hpp"
#include "elvc/nn/transformer.hpp"

namespace elvc::recognition {

struct RecognizerConfig {
  int n_mels = 80;
  int subsampling = 4;
  int dim = 64;
  int heads = 4;
  int ff_dim = 128;
  int encoder_blocks = 4;
  int decoder_blocks = 2;
  int conv_kernel = 7;
  int bnf_dim = 64;
  int vocab = 21;  ///< blank / <eos> plus the symbol inventory
  double ctc_weight = 1.0;
  double attn_weight = 1.0;
  double sid_weight = 1.0;
  double ctc_rescore_weight = 0.3;
  std::uint64_t seed = 1;
};

nlohmann::json to_json(const RecognizerConfig& c);
RecognizerConfig recognizer_config_from_json(const nlohmann::json& j);

/// Encoder output projection, one row per subsampled frame.
struct BnfSequence {
  Matrix frames;
  double frame_shift_ms = 40.0;
};

/// Parallel lists of utterance features, reference transcripts and speech types.
struct RecognitionBatch {
  std::vector<dsp::MelSpectrogram> features;
  std::vector<SymbolSequence> transcripts;
  std::vector<SpeechType> speech_types;

  std::size_t size() const { return features.size(); }
  bool empty() const { return features.empty(); }
  void push_back(dsp::MelSpectrogram mel, SymbolSequence transcript, SpeechType type);
  RecognitionBatch subset(std::span<const std::size_t> indices) const;
  void append(const RecognitionBatch& other);
};

/// Symbol <-> output class mapping (class 0 is blank / <eos>).
inline int to_class(Symbol s) { return s + 1; }
inline Symbol to_symbol(int c) { return c - 1; }

/// Per-bin mean/variance normalization over the utterance.
Matrix utterance_cmvn(const Matrix& frames);

class RecognizerModel {
 public:
  explicit RecognizerModel(RecognizerConfig config);
  RecognizerModel(const RecognizerModel&) = delete;
  RecognizerModel& operator=(const RecognizerModel&) = delete;

  struct Encoded {
    ad::Var hidden;      ///< encoder output, T' x dim
    ad::Var bnf;         ///< T' x bnf_dim
    ad::Var ctc_logits;  ///< T' x vocab
    ad::Var sid_logit;   ///< 1 x 1
  };

  Encoded encode(const Matrix& mel) const;
  /// Teacher-forced decoder logits for <eos> + prefix, (len(prefix)+1) x vocab.
  ad::Var decoder_logits(const ad::Var& memory, std::span<const int> prefix) const;

  Eigen::Index encoded_length(Eigen::Index frames) const;
  const RecognizerConfig& config() const { return config_; }
  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }

 private:
  RecognizerConfig config_;
  nn::ParameterStore store_;
  nn::Linear input_proj_;
  std::vector<nn::ConformerBlock> encoder_;
  nn::Linear bnf_proj_, ctc_out_, sid_out_;
  nn::Embedding token_embed_;
  nn::Linear decoder_memory_;
  std::vector<nn::DecoderBlock> decoder_;
  nn::LayerNorm decoder_norm_;
  nn::Linear decoder_out_;
};

struct ForwardOutput {
  std::vector<Matrix> ctc_logits;
  std::vector<Matrix> attn_logits;
  Vector sid_logits;
  std::vector<BnfSequence> bnf;
};

/// Inference-mode forward over a batch (teacher-forced attention logits).
ForwardOutput forward(const RecognizerModel& model, const RecognitionBatch& batch);

/// Mean BCE, label 1 for EL and 0 for typical.
ad::Var sid_loss(const ad::Var& sid_logits, std::span<const SpeechType> types);
double sid_loss(const Vector& sid_logits, std::span<const SpeechType> types);

enum class LossMode { Standard, Intermediate, IntermediateNoMask };
std::string to_string(LossMode m);
LossMode loss_mode_from_string(const std::string& s);

struct LossBreakdown {
  double sid = 0.0;
  double ctc = 0.0;
  double attn = 0.0;
  double total = 0.0;
  std::size_t recognized = 0;  ///< utterances contributing to the CTC/attention terms
};

struct LossResult {
  ad::Var total;
  LossBreakdown breakdown;
};

/// Standard: ctc + attn over all utterances.
/// Intermediate: sid over all + ctc, attn over EL utterances only.
/// IntermediateNoMask: sid + ctc + attn, all over every utterance.
/// Each term is averaged over its own utterance subset; CTC is per label symbol.
LossResult compute_loss(const RecognizerModel& model, const RecognitionBatch& batch, LossMode mode);
LossResult loss_intermediate(const RecognizerModel& model, const RecognitionBatch& batch);

struct RecognitionRecipe {
  std::string name = "stage";
  LossMode mode = LossMode::Standard;
  int epochs = 10;
  int batch_size = 8;
  double lr = 1e-3;
  int warmup_steps = 50;
  std::uint64_t seed = 1;
};

struct TrainLog {
  std::vector<double> train_loss;
  std::vector<double> dev_loss;
};

using EpochCallback = std::function<void(int epoch, double train_loss, double dev_loss)>;

/// Trains in place. Writes <checkpoint_dir>/<name>_epochNNN.ckpt after every epoch when a directory is given.
TrainLog train_stage(RecognizerModel& model, const RecognitionRecipe& recipe, const RecognitionBatch& train,
                     const RecognitionBatch& dev, const std::optional<std::filesystem::path>& checkpoint_dir = {},
                     const EpochCallback& on_epoch = {});

enum class DecodeMode { Greedy, Beam };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::Greedy;
  int beam_width = 4;
  int max_length = 0;  ///< 0: twice the encoded length plus 4
};

/// Greedy: CTC best path. Beam: attention beam search, n-best rescored with the CTC weight.
SymbolSequence decode(const RecognizerModel& model, const dsp::MelSpectrogram& mel, const DecodeOptions& options = {});
/// Greedy attention decoding (argmax per step until <eos>).
SymbolSequence decode_attention_greedy(const RecognizerModel& model, const dsp::MelSpectrogram& mel,
                                       int max_length = 0);

BnfSequence extract_bnf(const RecognizerModel& model, const dsp::MelSpectrogram& mel);

/// Fraction of utterances whose SID logit sign matches the label.
double sid_accuracy(const RecognizerModel& model, const RecognitionBatch& data);
/// Corpus-level CER in percent (total edits / total reference symbols) using greedy decoding.
double corpus_cer(const RecognizerModel& model, const RecognitionBatch& data);

void save_recognizer(const std::filesystem::path& path, const RecognizerModel& model, nlohmann::json meta = {});
std::unique_ptr<RecognizerModel> load_recognizer(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

}  // namespace elvc::recognition
