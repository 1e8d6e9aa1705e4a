// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "heronet/tensor.hpp"

namespace heronet {

template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

/// Named parameter tensors, ordered by name. Addresses are stable.
template <class T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, Tensor<T> value);
  bool contains(std::string_view name) const;
  Param<T>& at(std::string_view name);
  const Param<T>& at(std::string_view name) const;

  std::vector<std::string> names() const;
  std::size_t size() const { return params_.size(); }
  std::size_t count_values() const;

  void zero_grads();
  bool all_finite() const;

  /// FNV-1a over the raw bytes of every tensor whose name starts with `prefix`.
  std::uint64_t checksum(std::string_view prefix = {}) const;

  template <class F>
  void for_each(F&& f) {
    for (auto& [name, p] : params_) f(p);
  }
  template <class F>
  void for_each(F&& f) const {
    for (const auto& [name, p] : params_) f(p);
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, p] : params_) out.add(name, p.value.template cast<U>());
    return out;
  }

 private:
  std::map<std::string, Param<T>, std::less<>> params_;
};

bool has_prefix(std::string_view name, std::string_view prefix);
bool matches_any_prefix(std::string_view name, const std::vector<std::string>& prefixes);

/// Adam with bias correction. State is keyed by parameter name.
template <class T>
class Adam {
 public:
  explicit Adam(T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8)) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Updates every parameter whose name matches one of `prefixes`, then
  /// clears all gradients in the store.
  void step(ParamStore<T>& store, T lr, const std::vector<std::string>& prefixes);

  long steps_taken() const { return t_; }

 private:
  struct Moments {
    std::vector<T> m, v;
  };
  T beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, Moments, std::less<>> state_;
};

}  // namespace heronet
