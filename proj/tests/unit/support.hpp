#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "elvc/ad/autodiff.hpp"
#include "elvc/core/rng.hpp"
#include "elvc/nn/parameters.hpp"

namespace elvc::test {

struct GradCheck {
  double rel_error = 0.0;
  double analytic_norm = 0.0;
  std::size_t scalars = 0;
};

/// Central finite differences over every scalar of `store` against reverse-mode gradients.
/// Relative error is ||g - g_fd|| / max(||g||, ||g_fd||, 1e-12). Scalars under `skip_scopes` are left out.
inline GradCheck grad_check(nn::ParameterStore& store, const std::function<ad::Var()>& loss, double h = 1e-5,
                            const std::vector<std::string>& skip_scopes = {}) {
  store.zero_grad();
  ad::backward(loss());
  Vector analytic = store.flatten_grad();
  store.zero_grad();
  const Vector base = store.flatten();
  Vector numeric = Vector::Zero(base.size());
  std::vector<bool> skip;
  for (const auto* p : store.all()) {
    const bool s = std::any_of(skip_scopes.begin(), skip_scopes.end(),
                               [&](const std::string& sc) { return nn::in_scope(p->name, sc); });
    skip.insert(skip.end(), static_cast<std::size_t>(p->value.size()), s);
  }
  for (Eigen::Index i = 0; i < base.size(); ++i) {
    if (skip[static_cast<std::size_t>(i)]) {
      analytic[i] = 0.0;
      continue;
    }
    Vector p = base;
    p[i] = base[i] + h;
    store.unflatten(p);
    double up = 0.0, down = 0.0;
    {
      ad::NoGradGuard guard;
      up = loss().item();
    }
    p[i] = base[i] - h;
    store.unflatten(p);
    {
      ad::NoGradGuard guard;
      down = loss().item();
    }
    numeric[i] = (up - down) / (2.0 * h);
  }
  store.unflatten(base);
  GradCheck r;
  r.scalars = static_cast<std::size_t>(base.size());
  r.analytic_norm = analytic.norm();
  r.rel_error = (analytic - numeric).norm() / std::max({analytic.norm(), numeric.norm(), 1e-12});
  return r;
}

/// Adds N(0, sigma^2) to every scalar of `store`, moving it off exact kinks of the initialization.
inline void jitter(nn::ParameterStore& store, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  store.unflatten(store.flatten() + sigma * randn(store.flatten().size(), 1, rng));
}

/// Fresh per-test scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("elvc_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Vector sine(double hz, double seconds, double amplitude = 0.5, int rate = 16000) {
  const auto n = static_cast<Eigen::Index>(seconds * rate);
  Vector w(n);
  for (Eigen::Index i = 0; i < n; ++i) w[i] = amplitude * std::sin(2.0 * M_PI * hz * static_cast<double>(i) / rate);
  return w;
}

}  // namespace elvc::test
