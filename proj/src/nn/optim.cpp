#include "elvc/nn/optim.hpp"

#include <algorithm>
#include <cmath>

namespace elvc::nn {

Adam::Adam(ParameterStore& store, AdamOptions options, std::vector<std::string> frozen_scopes)
    : store_(store), options_(options) {
  for (Parameter* p : store_.all()) {
    const bool frozen = std::any_of(frozen_scopes.begin(), frozen_scopes.end(),
                                    [&](const std::string& scope) { return in_scope(p->name, scope); });
    if (frozen) continue;
    slots_.push_back({p, Matrix::Zero(p->value.rows(), p->value.cols()), Matrix::Zero(p->value.rows(), p->value.cols())});
  }
}

double Adam::step() {
  double sq = 0.0;
  for (const auto& s : slots_) sq += s.param->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  const double clip = (options_.clip_norm > 0.0 && norm > options_.clip_norm) ? options_.clip_norm / norm : 1.0;

  ++t_;
  double lr = options_.lr;
  if (options_.warmup_steps > 0 && t_ < options_.warmup_steps) {
    lr *= static_cast<double>(t_) / static_cast<double>(options_.warmup_steps);
  }
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (auto& s : slots_) {
    const Matrix g = s.param->grad * clip;
    s.m = options_.beta1 * s.m + (1.0 - options_.beta1) * g;
    s.v = options_.beta2 * s.v + (1.0 - options_.beta2) * g.cwiseProduct(g);
    s.param->value.array() -=
        lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + options_.eps);
  }
  store_.zero_grad();
  return norm;
}

}  // namespace elvc::nn
