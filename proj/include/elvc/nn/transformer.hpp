#pragma once

#include <string>
#include <vector>

#include "elvc/nn/layers.hpp"

namespace elvc::nn {

/// Pre-norm self-attention block.
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(ParameterStore& store, const std::string& name, Eigen::Index dim, int heads, Eigen::Index ff, Rng& rng);
  Var operator()(const Var& x, const Matrix* mask = nullptr) const;

 private:
  LayerNorm ln1_, ln2_;
  MultiHeadAttention attn_;
  FeedForward ff_;
};

/// Pre-norm decoder block: causal self-attention, cross-attention, feed-forward.
class DecoderBlock {
 public:
  DecoderBlock() = default;
  DecoderBlock(ParameterStore& store, const std::string& name, Eigen::Index dim, int heads, Eigen::Index ff, Rng& rng);
  Var operator()(const Var& x, const Var& memory, const Matrix& causal) const;

 private:
  LayerNorm ln1_, ln2_, ln3_;
  MultiHeadAttention self_attn_, cross_attn_;
  FeedForward ff_;
};

/// Conformer block: half FFN, self-attention, depthwise convolution module, half FFN, output norm.
class ConformerBlock {
 public:
  ConformerBlock() = default;
  ConformerBlock(ParameterStore& store, const std::string& name, Eigen::Index dim, int heads, Eigen::Index ff,
                 int kernel, Rng& rng);
  Var operator()(const Var& x) const;

 private:
  LayerNorm ln_ff1_, ln_attn_, ln_conv_, ln_conv_mid_, ln_ff2_, ln_out_;
  FeedForward ff1_, ff2_;
  MultiHeadAttention attn_;
  Linear pw1_, pw2_;
  Parameter* dw_ = nullptr;
};

/// Gated linear unit over the column halves: a * sigmoid(b).
Var glu(const Var& x);

}  // namespace elvc::nn
