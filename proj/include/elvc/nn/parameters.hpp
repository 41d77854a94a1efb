#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "elvc/ad/autodiff.hpp"
#include "elvc/core/rng.hpp"

namespace elvc::nn {

using ad::Parameter;

/// Owns every trainable tensor of a model under dot-separated scope names.
/// Parameter addresses are stable for the lifetime of the store.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter& add(const std::string& name, Matrix init);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  /// Parameters whose names start with `scope` followed by '.' or end of string.
  std::vector<Parameter*> in_scope(const std::string& scope);

  void zero_grad();
  std::size_t size() const { return params_.size(); }
  std::size_t num_scalars() const;

  std::map<std::string, Matrix> values() const;
  /// Copies values by name; every parameter in the store must be present with a matching shape.
  void load_values(const std::map<std::string, Matrix>& values);
  /// Copies whichever names exist in both; returns the number copied.
  std::size_t load_matching(const std::map<std::string, Matrix>& values);

  /// Flattened parameter vector in insertion order, and its inverse.
  Vector flatten() const;
  void unflatten(const Vector& flat);
  Vector flatten_grad() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

bool in_scope(const std::string& name, const std::string& scope);

/// Glorot-uniform initialized fan_in x fan_out matrix.
Matrix glorot(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng);

}  // namespace elvc::nn
