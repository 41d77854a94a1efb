#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "elvc/core/error.hpp"
#include "elvc/core/types.hpp"
#include "elvc/dsp/features.hpp"

namespace elvc::eval {

/// Levenshtein distance with unit substitution, insertion and deletion costs.
template <typename T>
std::size_t edit_distance(std::span<const T> ref, std::span<const T> hyp) {
  std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  for (std::size_t j = 0; j <= hyp.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

/// Character error rate as a fraction (may exceed 1).
inline double cer(std::span<const Symbol> ref, std::span<const Symbol> hyp) {
  require(!ref.empty(), ErrorCode::EmptyReference, "cer: empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

using AlignmentPath = std::vector<std::pair<Eigen::Index, Eigen::Index>>;

struct DtwResult {
  AlignmentPath path;
  double cost = 0.0;
};

/// Minimum-cost monotonic alignment of the rows of `a` and `b` under Euclidean
/// frame distance with steps (1,0), (0,1), (1,1). The path starts at (0,0) and ends
/// at (Ta-1, Tb-1).
template <typename DerivedA, typename DerivedB>
DtwResult dtw_align(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  require(a.rows() > 0 && b.rows() > 0, ErrorCode::EmptyInput, "dtw_align: empty sequence");
  require(a.cols() == b.cols(), ErrorCode::ShapeError, "dtw_align: feature dimension mismatch");
  const Eigen::Index n = a.rows(), m = b.rows();
  MatrixX<Scalar> dist(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) dist(i, j) = (a.row(i) - b.row(j)).norm();
  }
  const Scalar inf = std::numeric_limits<Scalar>::infinity();
  MatrixX<Scalar> acc = MatrixX<Scalar>::Constant(n, m, inf);
  acc(0, 0) = dist(0, 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      if (i == 0 && j == 0) continue;
      Scalar best = inf;
      if (i > 0 && j > 0) best = acc(i - 1, j - 1);
      if (i > 0) best = std::min(best, acc(i - 1, j));
      if (j > 0) best = std::min(best, acc(i, j - 1));
      acc(i, j) = best + dist(i, j);
    }
  }
  DtwResult result;
  result.cost = static_cast<double>(acc(n - 1, m - 1));
  Eigen::Index i = n - 1, j = m - 1;
  result.path.emplace_back(i, j);
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && acc(i - 1, j - 1) <= acc(i - 1, j) && acc(i - 1, j - 1) <= acc(i, j - 1)) {
      --i;
      --j;
    } else if (j == 0 || (i > 0 && acc(i - 1, j) < acc(i, j - 1))) {
      --i;
    } else if (i == 0 || acc(i, j - 1) < acc(i - 1, j)) {
      --j;
    } else {
      // Equal horizontal/vertical predecessors: step along the longer remaining axis.
      if (i >= j) --i; else --j;
    }
    result.path.emplace_back(i, j);
  }
  std::reverse(result.path.begin(), result.path.end());
  return result;
}

/// DTW over mel-cepstra using c1..cD (energy term excluded).
inline DtwResult dtw_align(const dsp::McepSequence& a, const dsp::McepSequence& b) {
  require(a.frames.cols() == b.frames.cols(), ErrorCode::ShapeError, "dtw_align: cepstral order mismatch");
  require(a.frames.cols() >= 2, ErrorCode::ShapeError, "dtw_align: need at least c1");
  return dtw_align(a.frames.rightCols(a.frames.cols() - 1), b.frames.rightCols(b.frames.cols() - 1));
}

/// (10 / ln 10) * sqrt(2 * sum_d diff_d^2) for one frame pair of c1..cD.
template <typename Derived>
typename Derived::Scalar mcd_frame(const Eigen::MatrixBase<Derived>& diff) {
  using Scalar = typename Derived::Scalar;
  return Scalar(10.0 / std::numbers::ln10) * std::sqrt(Scalar(2) * diff.squaredNorm());
}

/// Mean frame MCD over the given alignment path (c0 excluded).
inline double mcd_along(const dsp::McepSequence& a, const dsp::McepSequence& b, const AlignmentPath& path) {
  require(!path.empty(), ErrorCode::EmptyInput, "mcd: empty path");
  const Eigen::Index d = a.frames.cols() - 1;
  double total = 0.0;
  for (const auto& [i, j] : path) total += mcd_frame(a.frames.row(i).tail(d) - b.frames.row(j).tail(d));
  return total / static_cast<double>(path.size());
}

/// Mel-cepstral distortion in dB between DTW-aligned sequences.
inline double mcd(const dsp::McepSequence& a, const dsp::McepSequence& b) {
  return mcd_along(a, b, dtw_align(a, b).path);
}

/// Pearson correlation. Constant inputs give 1 when the sequences are identical, else 0.
template <typename DerivedA, typename DerivedB>
double pearson(const Eigen::MatrixBase<DerivedA>& x, const Eigen::MatrixBase<DerivedB>& y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorCode::ShapeError, "pearson: need two equal-length series");
  const auto xc = (x.array() - x.mean()).eval();
  const auto yc = (y.array() - y.mean()).eval();
  const double sxx = (xc * xc).sum();
  const double syy = (yc * yc).sum();
  if (sxx <= 0.0 || syy <= 0.0) return (x.derived() == y.derived()) ? 1.0 : 0.0;
  return std::clamp((xc * yc).sum() / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct F0Metrics {
  double rmse_cents = 0.0;
  double corr = 0.0;
  std::size_t pairs = 0;
};

/// Log-F0 RMSE (cents) and log-F0 Pearson correlation over aligned frame pairs voiced in both tracks.
inline F0Metrics f0_metrics(const dsp::F0Track& a, const dsp::F0Track& b, const AlignmentPath& path) {
  std::vector<double> la, lb;
  for (const auto& [i, j] : path) {
    require(i < a.size() && j < b.size(), ErrorCode::ShapeError, "f0_metrics: path exceeds track length");
    if (a.voiced[static_cast<std::size_t>(i)] && b.voiced[static_cast<std::size_t>(j)]) {
      la.push_back(std::log2(a.f0_hz[i]));
      lb.push_back(std::log2(b.f0_hz[j]));
    }
  }
  if (la.size() < 2) {
    fail(ErrorCode::InsufficientVoicing, "f0_metrics: " + std::to_string(la.size()) + " co-voiced pairs");
  }
  const Eigen::Map<const Vector> va(la.data(), static_cast<Eigen::Index>(la.size()));
  const Eigen::Map<const Vector> vb(lb.data(), static_cast<Eigen::Index>(lb.size()));
  F0Metrics m;
  m.pairs = la.size();
  m.rmse_cents = 1200.0 * std::sqrt((va - vb).squaredNorm() / static_cast<double>(la.size()));
  m.corr = pearson(va, vb);
  return m;
}

/// Identity path for two equal-length sequences.
inline AlignmentPath diagonal_path(Eigen::Index length) {
  AlignmentPath p;
  for (Eigen::Index i = 0; i < length; ++i) p.emplace_back(i, i);
  return p;
}

}  // namespace elvc::eval
