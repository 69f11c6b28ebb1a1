#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/autograd.hpp"

namespace nowcast {

using Rng = std::mt19937_64;

/// Owner of named parameters, buffers and child modules. Names are dotted paths
/// ("encoder.down1.conv.pointwise.weight") and form the checkpoint contract.
template <std::floating_point T>
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  void train(bool on = true) {
    training_ = on;
    for (auto& [name, child] : children_) child->train(on);
  }
  void eval() { train(false); }
  bool is_training() const { return training_; }

  std::vector<std::pair<std::string, Var<T>*>> named_parameters(const std::string& prefix = "") {
    std::vector<std::pair<std::string, Var<T>*>> out;
    for (auto& [name, p] : params_) out.emplace_back(prefix + name, p.get());
    for (auto& [name, child] : children_) {
      auto sub = child->named_parameters(prefix + name + ".");
      out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_buffers(const std::string& prefix = "") {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto& [name, b] : buffers_) out.emplace_back(prefix + name, b.get());
    for (auto& [name, child] : children_) {
      auto sub = child->named_buffers(prefix + name + ".");
      out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
  }

  std::vector<Var<T>*> parameters() {
    std::vector<Var<T>*> out;
    for (auto& [name, p] : named_parameters()) out.push_back(p);
    return out;
  }

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    for (auto& [name, p] : named_parameters()) n += p->numel();
    return n;
  }

  const std::vector<std::pair<std::string, std::unique_ptr<Module>>>& children() const { return children_; }

  Module* child(const std::string& name) const {
    for (const auto& [n, c] : children_) {
      if (n == name) return c.get();
    }
    return nullptr;
  }

  void set_requires_grad(bool on) {
    for (auto& [name, p] : named_parameters()) p->set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& [name, p] : named_parameters()) p->zero_grad();
  }

 protected:
  Var<T>& register_parameter(std::string name, Tensor<T> init) {
    params_.emplace_back(std::move(name), std::make_unique<Var<T>>(std::move(init), true));
    return *params_.back().second;
  }

  Tensor<T>& register_buffer(std::string name, Tensor<T> init) {
    buffers_.emplace_back(std::move(name), std::make_unique<Tensor<T>>(std::move(init)));
    return *buffers_.back().second;
  }

  template <class M>
  M& register_module(std::string name, std::unique_ptr<M> module) {
    M& ref = *module;
    module->train(training_);
    children_.emplace_back(std::move(name), std::move(module));
    return ref;
  }

 private:
  bool training_ = true;
  std::vector<std::pair<std::string, std::unique_ptr<Var<T>>>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor<T>>>> buffers_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
};

/// PyTorch-style default init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <std::floating_point T>
Tensor<T> uniform_fan_in(Shape shape, std::int64_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace nowcast
