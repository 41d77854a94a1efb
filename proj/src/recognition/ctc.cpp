#include "elvc/recognition/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "elvc/core/error.hpp"

namespace elvc::recognition {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

std::vector<int> extend(std::span<const int> labels) {
  std::vector<int> ext(2 * labels.size() + 1, kBlank);
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
  return ext;
}

Matrix log_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const double m = logits.row(t).maxCoeff();
    const double lse = m + std::log((logits.row(t).array() - m).exp().sum());
    out.row(t) = logits.row(t).array() - lse;
  }
  return out;
}

// Log-space forward variables, T x S.
Matrix forward_vars(const Matrix& lp, const std::vector<int>& ext) {
  const Eigen::Index t_len = lp.rows();
  const auto s_len = static_cast<Eigen::Index>(ext.size());
  Matrix alpha = Matrix::Constant(t_len, s_len, kNegInf);
  alpha(0, 0) = lp(0, ext[0]);
  if (s_len > 1) alpha(0, 1) = lp(0, ext[1]);
  for (Eigen::Index t = 1; t < t_len; ++t) {
    for (Eigen::Index s = 0; s < s_len; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
      if (s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2]) a = log_add(a, alpha(t - 1, s - 2));
      alpha(t, s) = a == kNegInf ? kNegInf : a + lp(t, ext[s]);
    }
  }
  return alpha;
}

// Log-space backward variables including the emission at t, T x S.
Matrix backward_vars(const Matrix& lp, const std::vector<int>& ext) {
  const Eigen::Index t_len = lp.rows();
  const auto s_len = static_cast<Eigen::Index>(ext.size());
  Matrix beta = Matrix::Constant(t_len, s_len, kNegInf);
  beta(t_len - 1, s_len - 1) = lp(t_len - 1, ext[s_len - 1]);
  if (s_len > 1) beta(t_len - 1, s_len - 2) = lp(t_len - 1, ext[s_len - 2]);
  for (Eigen::Index t = t_len - 2; t >= 0; --t) {
    for (Eigen::Index s = 0; s < s_len; ++s) {
      double b = beta(t + 1, s);
      if (s + 1 < s_len) b = log_add(b, beta(t + 1, s + 1));
      if (s + 2 < s_len && ext[s] != kBlank && ext[s] != ext[s + 2]) b = log_add(b, beta(t + 1, s + 2));
      beta(t, s) = b == kNegInf ? kNegInf : b + lp(t, ext[s]);
    }
  }
  return beta;
}

double total_log_prob(const Matrix& alpha) {
  const Eigen::Index last = alpha.rows() - 1;
  const Eigen::Index s_len = alpha.cols();
  double lp = alpha(last, s_len - 1);
  if (s_len > 1) lp = log_add(lp, alpha(last, s_len - 2));
  return lp;
}

void check_labels(const Matrix& m, std::span<const int> labels) {
  require(m.rows() > 0, ErrorCode::EmptyInput, "ctc: no frames");
  for (int l : labels) {
    require(l > kBlank && l < m.cols(), ErrorCode::InvalidSymbol, "ctc: label out of range");
  }
}

}  // namespace

bool ctc_feasible(Eigen::Index frames, std::span<const int> labels) {
  Eigen::Index needed = static_cast<Eigen::Index>(labels.size());
  for (std::size_t i = 1; i < labels.size(); ++i) {
    if (labels[i] == labels[i - 1]) ++needed;
  }
  return frames >= needed;
}

double ctc_neg_log_likelihood(const Matrix& log_probs, std::span<const int> labels) {
  check_labels(log_probs, labels);
  if (!ctc_feasible(log_probs.rows(), labels)) return std::numeric_limits<double>::infinity();
  return -total_log_prob(forward_vars(log_probs, extend(labels)));
}

ad::Var ctc_loss(const ad::Var& logits, std::span<const int> labels) {
  check_labels(logits.value(), labels);
  require(ctc_feasible(logits.rows(), labels), ErrorCode::InputTooShort, "ctc: label longer than input");
  const Matrix lp = log_softmax(logits.value());
  const std::vector<int> ext = extend(labels);
  const Matrix alpha = forward_vars(lp, ext);
  const double log_p = total_log_prob(alpha);
  if (!ad::grad_enabled() || !logits.requires_grad()) {
    return ad::Var(Matrix::Constant(1, 1, -log_p));
  }
  const Matrix beta = backward_vars(lp, ext);
  // d(-log p)/d logits = softmax - expected label occupancy.
  Matrix grad = lp.array().exp().matrix();
  for (Eigen::Index t = 0; t < lp.rows(); ++t) {
    for (std::size_t s = 0; s < ext.size(); ++s) {
      const auto si = static_cast<Eigen::Index>(s);
      const double a = alpha(t, si), b = beta(t, si);
      if (a == kNegInf || b == kNegInf) continue;
      grad(t, ext[s]) -= std::exp(a + b - lp(t, ext[s]) - log_p);
    }
  }
  return ad::make_result(Matrix::Constant(1, 1, -log_p), {logits}, [grad](ad::Node& self) {
    self.parents[0]->accumulate(grad * self.grad(0, 0));
  });
}

std::vector<int> ctc_collapse(std::span<const int> frame_labels) {
  std::vector<int> out;
  int prev = -1;
  for (int l : frame_labels) {
    if (l != prev && l != kBlank) out.push_back(l);
    prev = l;
  }
  return out;
}

std::vector<int> ctc_greedy(const Matrix& logits) {
  std::vector<int> frames(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    Eigen::Index k;
    logits.row(t).maxCoeff(&k);
    frames[static_cast<std::size_t>(t)] = static_cast<int>(k);
  }
  return ctc_collapse(frames);
}

}  // namespace elvc::recognition
