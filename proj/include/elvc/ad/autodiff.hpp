#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "elvc/core/types.hpp"

/// Minimal reverse-mode automatic differentiation over dense row-major-in-spirit
/// matrices: rows index time (frames, tokens), columns index channels.
namespace elvc::ad {

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}
  void zero_grad() { grad.setZero(); }
};

struct Node {
  Matrix value;
  Matrix grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  Parameter* param = nullptr;
  bool requires_grad = false;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value);
  static Var param(Parameter& p);
  static Var scalar(double v);

  const Matrix& value() const { return node_->value; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Builds a result node. `backward` reads the result's grad and pushes into parents.
Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// Runs reverse accumulation from a 1x1 root and adds leaf gradients into their Parameters.
void backward(const Var& root);

// Elementwise and linear-algebra primitives.
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(double s, const Var& a);
Var operator-(const Var& a);
Var hadamard(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
/// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add_scalar(const Var& a, double s);

/// Broadcasts a 1xC row over every row of a.
Var add_row(const Var& a, const Var& row);
Var mul_row(const Var& a, const Var& row);

Var relu(const Var& a);
Var silu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
/// Per-row standardization without affine parameters.
Var layer_norm(const Var& a, double eps = 1e-5);

Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var& table, std::span<const int> indices);

Var sum(const Var& a);
Var mean(const Var& a);
/// Column means: T x C -> 1 x C.
Var mean_rows(const Var& a);

/// T x F -> ceil(T/k) x (k*F), zero-padding the final group.
Var stack_frames(const Var& a, int k);
/// Depthwise 1-D convolution along rows with "same" zero padding. weight is K x C.
Var depthwise_conv(const Var& a, const Var& weight);
/// T x C -> T x (K*C); block j holds rows shifted by (j - K/2) * dilation, zero padded.
Var time_unfold(const Var& a, int kernel, int dilation);

// Fused losses; all return 1x1.
Var l1_loss(const Var& pred, const Matrix& target);
Var mse_loss(const Var& pred, const Matrix& target);
/// Mean binary cross-entropy over the entries of `logits` against 0/1 labels.
Var bce_with_logits(const Var& logits, const Matrix& labels);
/// Mean over rows of -log softmax(logits)[row, target[row]].
Var cross_entropy(const Var& logits, std::span<const int> targets);

}  // namespace elvc::ad
