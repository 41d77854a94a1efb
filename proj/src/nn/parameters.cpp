#include "elvc/nn/parameters.hpp"

#include <cmath>

#include "elvc/core/error.hpp"

namespace elvc::nn {

bool in_scope(const std::string& name, const std::string& scope) {
  if (scope.empty()) return true;
  if (name.size() < scope.size() || name.compare(0, scope.size(), scope) != 0) return false;
  return name.size() == scope.size() || name[scope.size()] == '.';
}

Parameter& ParameterStore::add(const std::string& name, Matrix init) {
  require(!contains(name), ErrorCode::ConfigError, "duplicate parameter " + name);
  index_[name] = params_.size();
  params_.push_back(std::make_unique<Parameter>(name, std::move(init)));
  return *params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  require(it != index_.end(), ErrorCode::ConfigError, "no parameter " + name);
  return *params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  require(it != index_.end(), ErrorCode::ConfigError, "no parameter " + name);
  return *params_[it->second];
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterStore::in_scope(const std::string& scope) {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    if (nn::in_scope(p->name, scope)) out.push_back(p.get());
  }
  return out;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

std::size_t ParameterStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

std::map<std::string, Matrix> ParameterStore::values() const {
  std::map<std::string, Matrix> out;
  for (const auto& p : params_) out.emplace(p->name, p->value);
  return out;
}

void ParameterStore::load_values(const std::map<std::string, Matrix>& values) {
  for (auto& p : params_) {
    auto it = values.find(p->name);
    require(it != values.end(), ErrorCode::ConfigError, "checkpoint lacks parameter " + p->name);
    require(it->second.rows() == p->value.rows() && it->second.cols() == p->value.cols(), ErrorCode::ShapeError,
            "shape mismatch for parameter " + p->name);
    p->value = it->second;
  }
}

std::size_t ParameterStore::load_matching(const std::map<std::string, Matrix>& values) {
  std::size_t copied = 0;
  for (auto& p : params_) {
    auto it = values.find(p->name);
    if (it == values.end()) continue;
    require(it->second.rows() == p->value.rows() && it->second.cols() == p->value.cols(), ErrorCode::ShapeError,
            "shape mismatch for parameter " + p->name);
    p->value = it->second;
    ++copied;
  }
  return copied;
}

Vector ParameterStore::flatten() const {
  Vector out(static_cast<Eigen::Index>(num_scalars()));
  Eigen::Index off = 0;
  for (const auto& p : params_) {
    out.segment(off, p->value.size()) = p->value.reshaped();
    off += p->value.size();
  }
  return out;
}

void ParameterStore::unflatten(const Vector& flat) {
  require(flat.size() == static_cast<Eigen::Index>(num_scalars()), ErrorCode::ShapeError, "unflatten: size mismatch");
  Eigen::Index off = 0;
  for (auto& p : params_) {
    p->value.reshaped() = flat.segment(off, p->value.size());
    off += p->value.size();
  }
}

Vector ParameterStore::flatten_grad() const {
  Vector out(static_cast<Eigen::Index>(num_scalars()));
  Eigen::Index off = 0;
  for (const auto& p : params_) {
    out.segment(off, p->grad.size()) = p->grad.reshaped();
    off += p->grad.size();
  }
  return out;
}

Matrix glorot(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace elvc::nn
