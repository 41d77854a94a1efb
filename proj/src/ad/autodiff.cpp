#include "elvc/ad/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "elvc/core/error.hpp"

namespace elvc::ad {
namespace {

thread_local bool g_grad_enabled = true;

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorCode::ShapeError, std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()));
  }
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

}  // namespace

Var::Var(Matrix value) : node_(std::make_shared<Node>()) { node_->value = std::move(value); }

Var Var::param(Parameter& p) {
  auto n = std::make_shared<Node>();
  n->value = p.value;
  if (g_grad_enabled) {
    n->param = &p;
    n->requires_grad = true;
  }
  return Var(std::move(n));
}

Var Var::scalar(double v) { return Var(Matrix::Constant(1, 1, v)); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(inputs.size());
      for (auto& v : inputs) n->parents.push_back(v.node());
      n->backward = std::move(backward_fn);
    }
  }
  return Var(std::move(n));
}

void backward(const Var& root) {
  require(root.rows() == 1 && root.cols() == 1, ErrorCode::ShapeError, "backward: root must be 1x1");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad = Matrix::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.size() == 0) continue;
    if (n->backward) n->backward(*n);
    if (n->param) n->param->grad += n->grad;
  }
  for (Node* n : order) n->grad.resize(0, 0);
}

Var operator+(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {a, b}, [](Node& self) {
    if (parent(self, 0).requires_grad) parent(self, 0).accumulate(self.grad);
    if (parent(self, 1).requires_grad) parent(self, 1).accumulate(self.grad);
  });
}

Var operator-(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {a, b}, [](Node& self) {
    if (parent(self, 0).requires_grad) parent(self, 0).accumulate(self.grad);
    if (parent(self, 1).requires_grad) parent(self, 1).accumulate(-self.grad);
  });
}

Var operator*(double s, const Var& a) {
  return make_result(s * a.value(), {a}, [s](Node& self) { parent(self, 0).accumulate(s * self.grad); });
}

Var operator-(const Var& a) { return -1.0 * a; }

Var add_scalar(const Var& a, double s) {
  return make_result(a.value().array() + s, {a}, [](Node& self) { parent(self, 0).accumulate(self.grad); });
}

Var hadamard(const Var& a, const Var& b) {
  check_same_shape(a, b, "hadamard");
  return make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) pa.accumulate(self.grad.cwiseProduct(pb.value));
    if (pb.requires_grad) pb.accumulate(self.grad.cwiseProduct(pa.value));
  });
}

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), ErrorCode::ShapeError,
          "matmul: inner dims " + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()));
  return make_result(a.value() * b.value(), {a, b}, [](Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) pa.accumulate(self.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * self.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require(a.cols() == b.cols(), ErrorCode::ShapeError, "matmul_nt: column mismatch");
  return make_result(a.value() * b.value().transpose(), {a, b}, [](Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) pa.accumulate(self.grad * pb.value);
    if (pb.requires_grad) pb.accumulate(self.grad.transpose() * pa.value);
  });
}

Var transpose(const Var& a) {
  return make_result(a.value().transpose(), {a},
                     [](Node& self) { parent(self, 0).accumulate(self.grad.transpose()); });
}

Var add_row(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), ErrorCode::ShapeError, "add_row: bad row shape");
  Matrix v = a.value().rowwise() + row.value().row(0);
  return make_result(std::move(v), {a, row}, [](Node& self) {
    if (parent(self, 0).requires_grad) parent(self, 0).accumulate(self.grad);
    if (parent(self, 1).requires_grad) parent(self, 1).accumulate(self.grad.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), ErrorCode::ShapeError, "mul_row: bad row shape");
  Matrix v = a.value().array().rowwise() * row.value().row(0).array();
  return make_result(std::move(v), {a, row}, [](Node& self) {
    auto& pa = parent(self, 0);
    auto& pr = parent(self, 1);
    if (pa.requires_grad) pa.accumulate((self.grad.array().rowwise() * pr.value.row(0).array()).matrix());
    if (pr.requires_grad) pr.accumulate(self.grad.cwiseProduct(pa.value).colwise().sum());
  });
}

Var relu(const Var& a) {
  return make_result(a.value().cwiseMax(0.0), {a}, [](Node& self) {
    auto& p = parent(self, 0);
    p.accumulate((p.value.array() > 0.0).select(self.grad.array(), 0.0).matrix());
  });
}

Var sigmoid(const Var& a) {
  Matrix y = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  return make_result(y, {a}, [](Node& self) {
    const auto& y = self.value;
    parent(self, 0).accumulate((self.grad.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

Var silu(const Var& a) {
  Matrix s = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  Matrix y = a.value().cwiseProduct(s);
  return make_result(std::move(y), {a}, [s = std::move(s)](Node& self) {
    const auto& x = parent(self, 0).value;
    parent(self, 0).accumulate(
        (self.grad.array() * (s.array() + x.array() * s.array() * (1.0 - s.array()))).matrix());
  });
}

Var tanh(const Var& a) {
  Matrix y = a.value().array().tanh().matrix();
  return make_result(std::move(y), {a}, [](Node& self) {
    parent(self, 0).accumulate((self.grad.array() * (1.0 - self.value.array().square())).matrix());
  });
}

namespace {

Matrix softmax_value(const Matrix& x) {
  Matrix y = x.colwise() - x.rowwise().maxCoeff();
  y = y.array().exp().matrix();
  y = y.array().colwise() / y.rowwise().sum().array();
  return y;
}

}  // namespace

Var softmax_rows(const Var& a) {
  return make_result(softmax_value(a.value()), {a}, [](Node& self) {
    const auto& y = self.value;
    const Vector dot = self.grad.cwiseProduct(y).rowwise().sum();
    parent(self, 0).accumulate((y.array() * (self.grad.colwise() - dot).array()).matrix());
  });
}

Var log_softmax_rows(const Var& a) {
  const Matrix& x = a.value();
  Matrix shifted = x.colwise() - x.rowwise().maxCoeff();
  const Vector lse = shifted.array().exp().rowwise().sum().log();
  Matrix y = shifted.colwise() - lse;
  return make_result(std::move(y), {a}, [](Node& self) {
    const Matrix sm = self.value.array().exp().matrix();
    const Vector gsum = self.grad.rowwise().sum();
    parent(self, 0).accumulate(self.grad - (sm.array().colwise() * gsum.array()).matrix());
  });
}

Var layer_norm(const Var& a, double eps) {
  const Matrix& x = a.value();
  const Vector mu = x.rowwise().mean();
  Matrix centered = x.colwise() - mu;
  const Vector inv_std = ((centered.array().square().rowwise().mean()) + eps).rsqrt().matrix();
  Matrix y = centered.array().colwise() * inv_std.array();
  return make_result(std::move(y), {a}, [inv_std](Node& self) {
    const auto& y = self.value;
    const auto& g = self.grad;
    const Vector gmean = g.rowwise().mean();
    const Vector gymean = g.cwiseProduct(y).rowwise().mean();
    Matrix dx = g.colwise() - gmean;
    dx -= (y.array().colwise() * gymean.array()).matrix();
    dx = dx.array().colwise() * inv_std.array();
    parent(self, 0).accumulate(dx);
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), ErrorCode::EmptyInput, "concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, ErrorCode::ShapeError, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
  }
  return make_result(std::move(v), std::vector<Var>(parts.begin(), parts.end()), [offsets](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      auto& p = *self.parents[i];
      if (p.requires_grad) p.accumulate(self.grad.middleCols(offsets[i], p.value.cols()));
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), ErrorCode::EmptyInput, "concat_rows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, ErrorCode::ShapeError, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix v(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    offsets.push_back(off);
    off += p.rows();
  }
  return make_result(std::move(v), std::vector<Var>(parts.begin(), parts.end()), [offsets](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      auto& p = *self.parents[i];
      if (p.requires_grad) p.accumulate(self.grad.middleRows(offsets[i], p.value.rows()));
    }
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), ErrorCode::ShapeError, "slice_rows: out of range");
  return make_result(a.value().middleRows(start, count), {a}, [start, count](Node& self) {
    auto& p = parent(self, 0);
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.middleRows(start, count) = self.grad;
    p.accumulate(g);
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), ErrorCode::ShapeError, "slice_cols: out of range");
  return make_result(a.value().middleCols(start, count), {a}, [start, count](Node& self) {
    auto& p = parent(self, 0);
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.middleCols(start, count) = self.grad;
    p.accumulate(g);
  });
}

Var gather_rows(const Var& table, std::span<const int> indices) {
  Matrix v(static_cast<Eigen::Index>(indices.size()), table.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && indices[i] < table.rows(), ErrorCode::RangeError, "gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(i)) = table.value().row(indices[i]);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  return make_result(std::move(v), {table}, [idx = std::move(idx)](Node& self) {
    auto& p = parent(self, 0);
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    p.accumulate(g);
  });
}

Var sum(const Var& a) {
  return make_result(Matrix::Constant(1, 1, a.value().sum()), {a}, [](Node& self) {
    auto& p = parent(self, 0);
    p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return make_result(Matrix::Constant(1, 1, a.value().mean()), {a}, [n](Node& self) {
    auto& p = parent(self, 0);
    p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), self.grad(0, 0) / n));
  });
}

Var mean_rows(const Var& a) {
  const double n = static_cast<double>(a.rows());
  return make_result(a.value().colwise().mean(), {a}, [n](Node& self) {
    auto& p = parent(self, 0);
    p.accumulate(self.grad.replicate(p.value.rows(), 1) / n);
  });
}

Var stack_frames(const Var& a, int k) {
  require(k >= 1, ErrorCode::InvalidInput, "stack_frames: k must be >= 1");
  const Eigen::Index t = a.rows();
  const Eigen::Index f = a.cols();
  const Eigen::Index out_rows = (t + k - 1) / k;
  Matrix v = Matrix::Zero(out_rows, f * k);
  for (Eigen::Index i = 0; i < out_rows; ++i) {
    for (int j = 0; j < k; ++j) {
      const Eigen::Index src = i * k + j;
      if (src < t) v.block(i, j * f, 1, f) = a.value().row(src);
    }
  }
  return make_result(std::move(v), {a}, [k, t, f, out_rows](Node& self) {
    Matrix g(t, f);
    for (Eigen::Index i = 0; i < out_rows; ++i) {
      for (int j = 0; j < k; ++j) {
        const Eigen::Index src = i * k + j;
        if (src < t) g.row(src) = self.grad.block(i, j * f, 1, f);
      }
    }
    parent(self, 0).accumulate(g);
  });
}

Var depthwise_conv(const Var& a, const Var& weight) {
  require(weight.cols() == a.cols(), ErrorCode::ShapeError, "depthwise_conv: channel mismatch");
  const Eigen::Index t = a.rows();
  const Eigen::Index kernel = weight.rows();
  const Eigen::Index half = kernel / 2;
  const Matrix& x = a.value();
  const Matrix& w = weight.value();
  Matrix y = Matrix::Zero(t, a.cols());
  for (Eigen::Index k = 0; k < kernel; ++k) {
    const Eigen::Index shift = k - half;
    const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
    const Eigen::Index hi = std::min<Eigen::Index>(t, t - shift);
    if (hi <= lo) continue;
    y.middleRows(lo, hi - lo) +=
        (x.middleRows(lo + shift, hi - lo).array().rowwise() * w.row(k).array()).matrix();
  }
  return make_result(std::move(y), {a, weight}, [t, kernel, half](Node& self) {
    auto& px = parent(self, 0);
    auto& pw = parent(self, 1);
    Matrix gx = Matrix::Zero(px.value.rows(), px.value.cols());
    Matrix gw = Matrix::Zero(pw.value.rows(), pw.value.cols());
    for (Eigen::Index k = 0; k < kernel; ++k) {
      const Eigen::Index shift = k - half;
      const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
      const Eigen::Index hi = std::min<Eigen::Index>(t, t - shift);
      if (hi <= lo) continue;
      const auto g = self.grad.middleRows(lo, hi - lo);
      gx.middleRows(lo + shift, hi - lo) += (g.array().rowwise() * pw.value.row(k).array()).matrix();
      gw.row(k) += g.cwiseProduct(px.value.middleRows(lo + shift, hi - lo)).colwise().sum();
    }
    if (px.requires_grad) px.accumulate(gx);
    if (pw.requires_grad) pw.accumulate(gw);
  });
}

Var time_unfold(const Var& a, int kernel, int dilation) {
  require(kernel >= 1 && dilation >= 1, ErrorCode::InvalidInput, "time_unfold: bad kernel/dilation");
  const Eigen::Index t = a.rows();
  const Eigen::Index c = a.cols();
  const int half = kernel / 2;
  Matrix y = Matrix::Zero(t, c * kernel);
  for (int k = 0; k < kernel; ++k) {
    const Eigen::Index shift = static_cast<Eigen::Index>(k - half) * dilation;
    const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
    const Eigen::Index hi = std::min<Eigen::Index>(t, t - shift);
    if (hi <= lo) continue;
    y.block(lo, k * c, hi - lo, c) = a.value().middleRows(lo + shift, hi - lo);
  }
  return make_result(std::move(y), {a}, [t, c, kernel, half, dilation](Node& self) {
    Matrix g = Matrix::Zero(t, c);
    for (int k = 0; k < kernel; ++k) {
      const Eigen::Index shift = static_cast<Eigen::Index>(k - half) * dilation;
      const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
      const Eigen::Index hi = std::min<Eigen::Index>(t, t - shift);
      if (hi <= lo) continue;
      g.middleRows(lo + shift, hi - lo) += self.grad.block(lo, k * c, hi - lo, c);
    }
    parent(self, 0).accumulate(g);
  });
}

Var l1_loss(const Var& pred, const Matrix& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), ErrorCode::ShapeError, "l1_loss: shape");
  const Matrix diff = pred.value() - target;
  const double n = static_cast<double>(diff.size());
  return make_result(Matrix::Constant(1, 1, diff.cwiseAbs().sum() / n), {pred}, [diff, n](Node& self) {
    parent(self, 0).accumulate((diff.array().sign() * (self.grad(0, 0) / n)).matrix());
  });
}

Var mse_loss(const Var& pred, const Matrix& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), ErrorCode::ShapeError, "mse_loss: shape");
  const Matrix diff = pred.value() - target;
  const double n = static_cast<double>(diff.size());
  return make_result(Matrix::Constant(1, 1, diff.squaredNorm() / n), {pred}, [diff, n](Node& self) {
    parent(self, 0).accumulate(diff * (2.0 * self.grad(0, 0) / n));
  });
}

Var bce_with_logits(const Var& logits, const Matrix& labels) {
  require(logits.rows() == labels.rows() && logits.cols() == labels.cols(), ErrorCode::ShapeError,
          "bce_with_logits: shape");
  const auto& x = logits.value().array();
  const auto y = labels.array();
  const double n = static_cast<double>(labels.size());
  const double loss = (x.max(0.0) - x * y + (1.0 + (-x.abs()).exp()).log()).sum() / n;
  return make_result(Matrix::Constant(1, 1, loss), {logits}, [labels, n](Node& self) {
    const auto& x = parent(self, 0).value;
    const Matrix s = (1.0 + (-x.array()).exp()).inverse().matrix();
    parent(self, 0).accumulate((s - labels) * (self.grad(0, 0) / n));
  });
}

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  require(static_cast<Eigen::Index>(targets.size()) == logits.rows(), ErrorCode::ShapeError,
          "cross_entropy: target count mismatch");
  const Matrix sm = softmax_value(logits.value());
  const double n = static_cast<double>(targets.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    loss -= std::log(std::max(sm(static_cast<Eigen::Index>(i), targets[i]), 1e-300));
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result(Matrix::Constant(1, 1, loss / n), {logits}, [sm, tgt = std::move(tgt), n](Node& self) {
    Matrix g = sm;
    for (std::size_t i = 0; i < tgt.size(); ++i) g(static_cast<Eigen::Index>(i), tgt[i]) -= 1.0;
    parent(self, 0).accumulate(g * (self.grad(0, 0) / n));
  });
}

}  // namespace elvc::ad
