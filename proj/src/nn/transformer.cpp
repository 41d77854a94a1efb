#include "elvc/nn/transformer.hpp"

#include <cmath>

namespace elvc::nn {

EncoderBlock::EncoderBlock(ParameterStore& store, const std::string& name, Eigen::Index dim, int heads,
                           Eigen::Index ff, Rng& rng)
    : ln1_(store, name + ".ln1", dim),
      ln2_(store, name + ".ln2", dim),
      attn_(store, name + ".attn", dim, heads, rng),
      ff_(store, name + ".ff", dim, ff, rng) {}

Var EncoderBlock::operator()(const Var& x, const Matrix* mask) const {
  const Var n1 = ln1_(x);
  const Var h = x + attn_(n1, n1, mask);
  return h + ff_(ln2_(h));
}

DecoderBlock::DecoderBlock(ParameterStore& store, const std::string& name, Eigen::Index dim, int heads,
                           Eigen::Index ff, Rng& rng)
    : ln1_(store, name + ".ln1", dim),
      ln2_(store, name + ".ln2", dim),
      ln3_(store, name + ".ln3", dim),
      self_attn_(store, name + ".self_attn", dim, heads, rng),
      cross_attn_(store, name + ".cross_attn", dim, heads, rng),
      ff_(store, name + ".ff", dim, ff, rng) {}

Var DecoderBlock::operator()(const Var& x, const Var& memory, const Matrix& causal) const {
  const Var n1 = ln1_(x);
  Var h = x + self_attn_(n1, n1, &causal);
  h = h + cross_attn_(ln2_(h), memory);
  return h + ff_(ln3_(h));
}

ConformerBlock::ConformerBlock(ParameterStore& store, const std::string& name, Eigen::Index dim, int heads,
                               Eigen::Index ff, int kernel, Rng& rng)
    : ln_ff1_(store, name + ".ln_ff1", dim),
      ln_attn_(store, name + ".ln_attn", dim),
      ln_conv_(store, name + ".ln_conv", dim),
      ln_conv_mid_(store, name + ".ln_conv_mid", dim),
      ln_ff2_(store, name + ".ln_ff2", dim),
      ln_out_(store, name + ".ln_out", dim),
      ff1_(store, name + ".ff1", dim, ff, rng),
      ff2_(store, name + ".ff2", dim, ff, rng),
      attn_(store, name + ".attn", dim, heads, rng),
      pw1_(store, name + ".pw1", dim, 2 * dim, rng),
      pw2_(store, name + ".pw2", dim, dim, rng),
      dw_(&store.add(name + ".dw", randn(kernel, dim, rng, 1.0 / std::sqrt(static_cast<double>(kernel))))) {}

Var ConformerBlock::operator()(const Var& x) const {
  Var h = x + 0.5 * ff1_(ln_ff1_(x));
  const Var na = ln_attn_(h);
  h = h + attn_(na, na);
  Var c = glu(pw1_(ln_conv_(h)));
  c = ad::silu(ln_conv_mid_(ad::depthwise_conv(c, Var::param(*dw_))));
  h = h + pw2_(c);
  h = h + 0.5 * ff2_(ln_ff2_(h));
  return ln_out_(h);
}

Var glu(const Var& x) {
  const Eigen::Index half = x.cols() / 2;
  return ad::hadamard(ad::slice_cols(x, 0, half), ad::sigmoid(ad::slice_cols(x, half, half)));
}

}  // namespace elvc::nn
