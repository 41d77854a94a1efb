#pragma once

#include <optional>
#include <string>

#include "elvc/nn/parameters.hpp"

namespace elvc::nn {

using ad::Var;

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng,
         bool bias = true);
  Var operator()(const Var& x) const;
  Eigen::Index in_features() const { return weight_->value.rows(); }
  Eigen::Index out_features() const { return weight_->value.cols(); }

 private:
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, Eigen::Index dim);
  Var operator()(const Var& x) const;

 private:
  Parameter* gamma_ = nullptr;
  Parameter* beta_ = nullptr;
};

/// Layer normalization whose scale and shift are linear functions of a conditioning row vector.
class ConditionalLayerNorm {
 public:
  ConditionalLayerNorm() = default;
  ConditionalLayerNorm(ParameterStore& store, const std::string& name, Eigen::Index dim, Eigen::Index cond_dim,
                       Rng& rng);
  Var operator()(const Var& x, const Var& cond) const;

 private:
  Linear scale_;
  Linear shift_;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterStore& store, const std::string& name, Eigen::Index dim, Eigen::Index hidden, Rng& rng);
  Var operator()(const Var& x) const;

 private:
  Linear up_;
  Linear down_;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& store, const std::string& name, Eigen::Index dim, int heads, Rng& rng);
  /// `mask` is additive (Tq x Tk), typically 0 or a large negative number.
  Var operator()(const Var& query, const Var& memory, const Matrix* mask = nullptr) const;

 private:
  Linear q_, k_, v_, o_;
  int heads_ = 1;
};

class Embedding {
 public:
  Embedding() = default;
  Embedding(ParameterStore& store, const std::string& name, Eigen::Index vocab, Eigen::Index dim, Rng& rng);
  Var operator()(std::span<const int> ids) const;

 private:
  Parameter* table_ = nullptr;
};

/// Sinusoidal positional table, T x dim.
Matrix sinusoidal_positions(Eigen::Index length, Eigen::Index dim, Eigen::Index offset = 0);
/// Sinusoidal embedding of a scalar (e.g. a diffusion timestep), 1 x dim.
Matrix sinusoidal_embedding(double position, Eigen::Index dim);
/// Additive mask forbidding attention to future positions.
Matrix causal_mask(Eigen::Index length);

}  // namespace elvc::nn
