#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "pglode/autodiff.hpp"
#include "pglode/error.hpp"
#include "pglode/random.hpp"

namespace pglode {

/// Ordered, named groups of learnable parameters.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    ad::Tensor value;
    friend bool operator==(const Entry&, const Entry&) = default;
  };

  void add(std::string name, ad::Tensor init) {
    if (find(name) != npos) throw ConfigError("duplicate parameter group '" + name + "'");
    entries_.push_back({std::move(name), std::move(init)});
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t find(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name == name) return i;
    }
    return npos;
  }
  std::size_t index(std::string_view name) const {
    const auto i = find(name);
    if (i == npos) throw ConfigError("unknown parameter group '" + std::string(name) + "'");
    return i;
  }
  ad::Tensor& operator[](std::string_view name) { return entries_[index(name)].value; }
  const ad::Tensor& operator[](std::string_view name) const { return entries_[index(name)].value; }

  /// Total number of scalar parameters.
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  std::vector<Entry> entries_;
};

/// Parameters placed on one tape, addressable by name.
class Bindings {
 public:
  Bindings(const ParameterSet& params, std::vector<ad::Var> vars)
      : params_(&params), vars_(std::move(vars)) {}

  const ad::Var& operator[](std::string_view name) const { return vars_[params_->index(name)]; }
  const std::vector<ad::Var>& vars() const { return vars_; }

 private:
  const ParameterSet* params_;
  std::vector<ad::Var> vars_;
};

/// Every group becomes a leaf unless `trainable` is false or it is listed in `frozen`.
inline Bindings bind(ad::Tape& tape, const ParameterSet& params, bool trainable = true,
                     const std::vector<std::string>& frozen = {}) {
  std::vector<ad::Var> vars;
  vars.reserve(params.size());
  for (const auto& e : params.entries()) {
    const bool is_frozen = std::find(frozen.begin(), frozen.end(), e.name) != frozen.end();
    vars.push_back(trainable && !is_frozen ? tape.leaf(e.value) : tape.constant(e.value));
  }
  return Bindings(params, std::move(vars));
}

/// Gradient per group after backward; zeros for constant bindings.
inline std::vector<ad::Tensor> collect_grads(const Bindings& bindings) {
  std::vector<ad::Tensor> grads;
  for (const auto& v : bindings.vars()) {
    grads.push_back(v.requires_grad() ? v.grad() : ad::Tensor(v.shape(), 0.0));
  }
  return grads;
}

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline ad::Tensor uniform_init(ad::Shape shape, std::size_t fan_in, SplitMix64& rng) {
  ad::Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.vec()) v = rng.uniform(-bound, bound);
  return t;
}

inline ad::Tensor uniform_range(ad::Shape shape, double bound, SplitMix64& rng) {
  ad::Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace pglode
