#pragma once

#include <span>

#include "elvc/ad/autodiff.hpp"

namespace elvc::recognition {

/// Index of the CTC blank. Output classes 1..V-1 are inventory symbols shifted by one.
constexpr int kBlank = 0;

/// Negative log-likelihood of `labels` (class indices, no blanks) under per-frame
/// distributions softmax(logits). Returns +inf when the label cannot fit in T frames.
double ctc_neg_log_likelihood(const Matrix& log_probs, std::span<const int> labels);

/// Differentiable CTC loss on raw logits (T x V); returns 1x1 -log p(labels | x).
ad::Var ctc_loss(const ad::Var& logits, std::span<const int> labels);

/// True when a length-T input admits at least one alignment of `labels`.
bool ctc_feasible(Eigen::Index frames, std::span<const int> labels);

/// Collapses repeats, then removes blanks.
std::vector<int> ctc_collapse(std::span<const int> frame_labels);

/// Per-frame argmax followed by ctc_collapse.
std::vector<int> ctc_greedy(const Matrix& logits);

}  // namespace elvc::recognition
