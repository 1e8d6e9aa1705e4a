// SPDX-License-Identifier: Apache-2.0
#include "heronet/params.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace heronet {

bool has_prefix(std::string_view name, std::string_view prefix) { return name.substr(0, prefix.size()) == prefix; }

bool matches_any_prefix(std::string_view name, const std::vector<std::string>& prefixes) {
  for (const auto& p : prefixes)
    if (has_prefix(name, p)) return true;
  return false;
}

template <class T>
Param<T>& ParamStore<T>::add(const std::string& name, Tensor<T> value) {
  if (params_.contains(name)) throw std::invalid_argument("duplicate parameter: " + name);
  Param<T> p{name, std::move(value), {}};
  p.grad = Tensor<T>(p.value.rows, p.value.cols);
  return params_.emplace(name, std::move(p)).first->second;
}

template <class T>
bool ParamStore<T>::contains(std::string_view name) const {
  return params_.find(name) != params_.end();
}

template <class T>
Param<T>& ParamStore<T>::at(std::string_view name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
  return it->second;
}

template <class T>
const Param<T>& ParamStore<T>::at(std::string_view name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
  return it->second;
}

template <class T>
std::vector<std::string> ParamStore<T>::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, p] : params_) out.push_back(name);
  return out;
}

template <class T>
std::size_t ParamStore<T>::count_values() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p.value.size();
  return n;
}

template <class T>
void ParamStore<T>::zero_grads() {
  for (auto& [name, p] : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), T(0));
}

template <class T>
bool ParamStore<T>::all_finite() const {
  for (const auto& [name, p] : params_)
    for (T v : p.value.data)
      if (!std::isfinite(v)) return false;
  return true;
}

template <class T>
std::uint64_t ParamStore<T>::checksum(std::string_view prefix) const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, p] : params_) {
    if (!has_prefix(name, prefix)) continue;
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data.data());
    for (std::size_t i = 0; i < p.value.data.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

template <class T>
void Adam<T>::step(ParamStore<T>& store, T lr, const std::vector<std::string>& prefixes) {
  ++t_;
  const T c1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1_), static_cast<double>(t_)));
  const T c2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2_), static_cast<double>(t_)));
  store.for_each([&](Param<T>& p) {
    if (!matches_any_prefix(p.name, prefixes)) return;
    auto& st = state_[p.name];
    if (st.m.empty()) {
      st.m.assign(p.value.size(), T(0));
      st.v.assign(p.value.size(), T(0));
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = p.grad.data[i];
      st.m[i] = beta1_ * st.m[i] + (T(1) - beta1_) * g;
      st.v[i] = beta2_ * st.v[i] + (T(1) - beta2_) * g * g;
      const T mhat = st.m[i] / c1;
      const T vhat = st.v[i] / c2;
      p.value.data[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  });
  store.zero_grads();
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Adam<float>;
template class Adam<double>;

}  // namespace heronet
