#include "elvc/nn/layers.hpp"

#include <cmath>
#include <vector>

#include "elvc/core/error.hpp"

namespace elvc::nn {

Linear::Linear(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng,
               bool bias)
    : weight_(&store.add(name + ".weight", glorot(in, out, rng))),
      bias_(bias ? &store.add(name + ".bias", Matrix::Zero(1, out)) : nullptr) {}

Var Linear::operator()(const Var& x) const {
  Var y = ad::matmul(x, Var::param(*weight_));
  return bias_ ? ad::add_row(y, Var::param(*bias_)) : y;
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, Eigen::Index dim)
    : gamma_(&store.add(name + ".gamma", Matrix::Ones(1, dim))),
      beta_(&store.add(name + ".beta", Matrix::Zero(1, dim))) {}

Var LayerNorm::operator()(const Var& x) const {
  return ad::add_row(ad::mul_row(ad::layer_norm(x), Var::param(*gamma_)), Var::param(*beta_));
}

ConditionalLayerNorm::ConditionalLayerNorm(ParameterStore& store, const std::string& name, Eigen::Index dim,
                                           Eigen::Index cond_dim, Rng& rng)
    : scale_(store, name + ".scale", cond_dim, dim, rng), shift_(store, name + ".shift", cond_dim, dim, rng) {
  // Start as a plain layer norm: scale = 1, shift = 0 for any condition.
  store.get(name + ".scale.weight").value.setZero();
  store.get(name + ".scale.bias").value.setOnes();
  store.get(name + ".shift.weight").value.setZero();
}

Var ConditionalLayerNorm::operator()(const Var& x, const Var& cond) const {
  return ad::add_row(ad::mul_row(ad::layer_norm(x), scale_(cond)), shift_(cond));
}

FeedForward::FeedForward(ParameterStore& store, const std::string& name, Eigen::Index dim, Eigen::Index hidden,
                         Rng& rng)
    : up_(store, name + ".up", dim, hidden, rng), down_(store, name + ".down", hidden, dim, rng) {}

Var FeedForward::operator()(const Var& x) const { return down_(ad::silu(up_(x))); }

MultiHeadAttention::MultiHeadAttention(ParameterStore& store, const std::string& name, Eigen::Index dim, int heads,
                                       Rng& rng)
    : q_(store, name + ".q", dim, dim, rng),
      k_(store, name + ".k", dim, dim, rng),
      v_(store, name + ".v", dim, dim, rng),
      o_(store, name + ".o", dim, dim, rng),
      heads_(heads) {
  require(heads >= 1 && dim % heads == 0, ErrorCode::ConfigError, "attention dim must divide into heads");
}

Var MultiHeadAttention::operator()(const Var& query, const Var& memory, const Matrix* mask) const {
  const Var q = q_(query);
  const Var k = k_(memory);
  const Var v = v_(memory);
  const Eigen::Index head_dim = q.cols() / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Var> outputs;
  outputs.reserve(static_cast<std::size_t>(heads_));
  for (int h = 0; h < heads_; ++h) {
    const Var qh = ad::slice_cols(q, h * head_dim, head_dim);
    const Var kh = ad::slice_cols(k, h * head_dim, head_dim);
    const Var vh = ad::slice_cols(v, h * head_dim, head_dim);
    Var scores = scale * ad::matmul_nt(qh, kh);
    if (mask) scores = scores + Var(*mask);
    outputs.push_back(ad::matmul(ad::softmax_rows(scores), vh));
  }
  return o_(heads_ == 1 ? outputs.front() : ad::concat_cols(outputs));
}

Embedding::Embedding(ParameterStore& store, const std::string& name, Eigen::Index vocab, Eigen::Index dim, Rng& rng)
    : table_(&store.add(name + ".table", randn(vocab, dim, rng, 1.0 / std::sqrt(static_cast<double>(dim))))) {}

Var Embedding::operator()(std::span<const int> ids) const { return ad::gather_rows(Var::param(*table_), ids); }

Matrix sinusoidal_positions(Eigen::Index length, Eigen::Index dim, Eigen::Index offset) {
  Matrix pe(length, dim);
  for (Eigen::Index t = 0; t < length; ++t) pe.row(t) = sinusoidal_embedding(static_cast<double>(t + offset), dim);
  return pe;
}

Matrix sinusoidal_embedding(double position, Eigen::Index dim) {
  Matrix e(1, dim);
  const Eigen::Index half = dim / 2;
  for (Eigen::Index i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(std::max<Eigen::Index>(half, 1)));
    e(0, 2 * i) = std::sin(position * freq);
    e(0, 2 * i + 1) = std::cos(position * freq);
  }
  if (dim % 2 == 1) e(0, dim - 1) = 0.0;
  return e;
}

Matrix causal_mask(Eigen::Index length) {
  Matrix m = Matrix::Zero(length, length);
  for (Eigen::Index i = 0; i < length; ++i) {
    for (Eigen::Index j = i + 1; j < length; ++j) m(i, j) = -1e9;
  }
  return m;
}

}  // namespace elvc::nn
