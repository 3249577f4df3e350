#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cmdret/errors.hpp"
#include "cmdret/numerics/tape.hpp"
#include "cmdret/numerics/tensor.hpp"

namespace cmdret {

enum class ParamGroup { encoder, layer_logits, fusion, temperature };

inline std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::layer_logits: return "layer_logits";
    case ParamGroup::fusion: return "fusion";
    case ParamGroup::temperature: return "temperature";
  }
  return "?";
}

struct Parameter {
  std::string name;
  Tensor value;
  ParamGroup group;
  bool decay;  // subject to weight decay
};

/// Named trainable tensors in registration order. Iteration order is stable,
/// which the checkpoint format and the optimizer rely on.
class ParamStore {
 public:
  void add(std::string name, Tensor value, ParamGroup group, bool decay) {
    if (index_.contains(name)) throw ContractError("parameter registered twice: " + name);
    index_.emplace(name, params_.size());
    params_.push_back(Parameter{std::move(name), std::move(value), group, decay});
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Parameter& at(const std::string& name) { return params_[lookup(name)]; }
  const Parameter& at(const std::string& name) const { return params_[lookup(name)]; }

  Tensor& value(const std::string& name) { return at(name).value; }
  const Tensor& value(const std::string& name) const { return at(name).value; }

  std::size_t size() const noexcept { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i) {
      if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value))
        return false;
    }
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }

  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

using GradMap = std::map<std::string, Tensor>;

/// Parameters placed on a tape, as gradient-carrying leaves or, for
/// inference, as constants.
class Binding {
 public:
  Binding(Tape& tape, const ParamStore& store, bool trainable = true) : tape_(&tape) {
    for (const auto& p : store) {
      Var v = trainable ? tape.leaf(p.value) : tape.constant(p.value);
      leaves_.emplace(p.name, v);
      vars_.emplace(p.name, v);
    }
  }

  /// Routes every later use of `name` through `v` (which must derive from the
  /// leaf). Gradients are still reported for the leaf.
  void reroute(const std::string& name, Var v) {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ContractError("parameter not bound: " + name);
    it->second = v;
  }

  Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ContractError("parameter not bound: " + name);
    return it->second;
  }

  Tape& tape() const { return *tape_; }

  /// Gradients of every bound parameter the last backward pass reached.
  GradMap grads() const {
    GradMap out;
    for (const auto& [name, v] : leaves_)
      if (tape_->has_grad(v)) out.emplace(name, tape_->grad(v));
    return out;
  }

 private:
  Tape* tape_;
  std::map<std::string, Var> leaves_;
  std::map<std::string, Var> vars_;
};

}  // namespace cmdret
