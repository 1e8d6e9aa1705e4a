// SPDX-License-Identifier: Apache-2.0
#include "heronet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "heronet/kernels.hpp"

namespace heronet {

using kernels::Trans;

template <class T>
Tape<T>::Tape(bool grad_enabled, std::vector<std::string> trainable_prefixes)
    : grad_enabled_(grad_enabled), trainable_(std::move(trainable_prefixes)) {}

template <class T>
bool Tape<T>::any_requires(std::initializer_list<Var> parents) const {
  if (!grad_enabled_) return false;
  for (Var p : parents)
    if (nodes_[p.id].requires_grad) return true;
  return false;
}

template <class T>
Var Tape<T>::push(Tensor<T> value, bool requires_grad, std::function<void()> bw) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(bw);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <class T>
Tensor<T>& Tape<T>::grad_of(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0 && n.value().size() != 0) n.grad = Tensor<T>(n.value().rows, n.value().cols);
  return n.grad;
}

template <class T>
Var Tape<T>::param(const Param<T>& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var{it->second};
  Node n;
  n.borrowed = &p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_ && matches_any_prefix(p.name, trainable_);
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  bound_.emplace(&p, id);
  return Var{id};
}

template <class T>
Var Tape<T>::constant(Tensor<T> value) {
  return push(std::move(value), false, {});
}

template <class T>
Var Tape<T>::constant_ref(const Tensor<T>& value) {
  Node n;
  n.borrowed = &value;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <class T>
const Tensor<T>& Tape<T>::value(Var v) const {
  return nodes_.at(v.id).value();
}

template <class T>
T Tape<T>::scalar(Var v) const {
  const auto& t = value(v);
  if (t.size() != 1) throw std::invalid_argument("scalar(): tensor is not 1x1");
  return t.data[0];
}

template <class T>
void Tape<T>::backward(Var loss) {
  if (value(loss).size() != 1) throw std::invalid_argument("backward(): loss must be 1x1");
  for (auto& n : nodes_) n.grad = Tensor<T>();
  if (!nodes_[loss.id].requires_grad) return;
  grad_of(loss.id).data[0] = T(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.backward && n.grad.size() != 0) n.backward();
  }
}

template <class T>
void Tape<T>::accumulate_param_grads(ParamStore<T>& store) const {
  for (const auto& [p, id] : bound_) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    auto& dst = store.at(p->name).grad;
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += n.grad.data[i];
  }
}

// ---------------------------------------------------------------------------

template <class T>
Var Tape<T>::gather_rows(Var table, std::span<const int> ids) {
  const auto& tab = val(table.id);
  Tensor<T> out(static_cast<int>(ids.size()), tab.cols);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= tab.rows) throw std::out_of_range("gather_rows: id out of range");
    std::copy(tab.row(ids[r]).begin(), tab.row(ids[r]).end(), out.row(static_cast<int>(r)).begin());
  }
  const bool rg = any_requires({table});
  std::vector<int> idv(ids.begin(), ids.end());
  Var out_v = push(std::move(out), rg, {});
  if (rg) {
    nodes_[out_v.id].backward = [this, table, out_v, idv = std::move(idv)] {
      auto& g = grad_of(table.id);
      const auto& go = nodes_[out_v.id].grad;
      for (std::size_t r = 0; r < idv.size(); ++r)
        for (int c = 0; c < go.cols; ++c) g(idv[r], c) += go(static_cast<int>(r), c);
    };
  }
  return out_v;
}

template <class T>
Var Tape<T>::slice_rows(Var a, int start, int count) {
  const auto& av = val(a.id);
  if (start < 0 || count < 0 || start + count > av.rows) throw std::out_of_range("slice_rows: range exceeds rows");
  Tensor<T> out(count, av.cols);
  std::copy(av.data.begin() + static_cast<std::ptrdiff_t>(start) * av.cols,
            av.data.begin() + static_cast<std::ptrdiff_t>(start + count) * av.cols, out.data.begin());
  const bool rg = any_requires({a});
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, o, start] {
      auto& g = grad_of(a.id);
      const auto& go = nodes_[o.id].grad;
      for (std::size_t i = 0; i < go.size(); ++i) g.data[static_cast<std::size_t>(start) * g.cols + i] += go.data[i];
    };
  }
  return o;
}

template <class T>
Var Tape<T>::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int rows = val(parts[0].id).rows;
  int cols = 0;
  bool rg = false;
  for (Var p : parts) {
    if (val(p.id).rows != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += val(p.id).cols;
    rg = rg || (grad_enabled_ && needs(p));
  }
  Tensor<T> out(rows, cols);
  int off = 0;
  for (Var p : parts) {
    const auto& pv = val(p.id);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < pv.cols; ++c) out(r, off + c) = pv(r, c);
    off += pv.cols;
  }
  std::vector<Var> pv(parts.begin(), parts.end());
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, o, pv = std::move(pv)] {
      const auto& go = nodes_[o.id].grad;
      int off2 = 0;
      for (Var p : pv) {
        const int pc = val(p.id).cols;
        if (needs(p)) {
          auto& g = grad_of(p.id);
          for (int r = 0; r < go.rows; ++r)
            for (int c = 0; c < pc; ++c) g(r, c) += go(r, off2 + c);
        }
        off2 += pc;
      }
    };
  }
  return o;
}

template <class T>
Var Tape<T>::add(Var a, Var b) {
  const auto& av = val(a.id);
  const auto& bv = val(b.id);
  if (!av.same_shape(bv)) throw std::invalid_argument("add: shape mismatch");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
  const bool rg = any_requires({a, b});
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, b, o] {
      const auto& go = nodes_[o.id].grad;
      for (Var p : {a, b}) {
        if (!needs(p)) continue;
        auto& g = grad_of(p.id);
        for (std::size_t i = 0; i < go.size(); ++i) g.data[i] += go.data[i];
      }
    };
  }
  return o;
}

template <class T>
Var Tape<T>::sub(Var a, Var b) {
  const auto& av = val(a.id);
  const auto& bv = val(b.id);
  if (!av.same_shape(bv)) throw std::invalid_argument("sub: shape mismatch");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv.data[i];
  const bool rg = any_requires({a, b});
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, b, o] {
      const auto& go = nodes_[o.id].grad;
      if (needs(a)) {
        auto& g = grad_of(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) g.data[i] += go.data[i];
      }
      if (needs(b)) {
        auto& g = grad_of(b.id);
        for (std::size_t i = 0; i < go.size(); ++i) g.data[i] -= go.data[i];
      }
    };
  }
  return o;
}

template <class T>
Var Tape<T>::add_row(Var a, Var row) {
  const auto& av = val(a.id);
  const auto& rv = val(row.id);
  if (rv.rows != 1 || rv.cols != av.cols) throw std::invalid_argument("add_row: broadcast shape mismatch");
  Tensor<T> out = av;
  for (int r = 0; r < out.rows; ++r)
    for (int c = 0; c < out.cols; ++c) out(r, c) += rv.data[c];
  const bool rg = any_requires({a, row});
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, row, o] {
      const auto& go = nodes_[o.id].grad;
      if (needs(a)) {
        auto& g = grad_of(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) g.data[i] += go.data[i];
      }
      if (needs(row)) {
        auto& g = grad_of(row.id);
        for (int r = 0; r < go.rows; ++r)
          for (int c = 0; c < go.cols; ++c) g.data[c] += go(r, c);
      }
    };
  }
  return o;
}

template <class T>
Var Tape<T>::add_n(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("add_n: no inputs");
  Tensor<T> out = val(parts[0].id);
  bool rg = grad_enabled_ && needs(parts[0]);
  for (std::size_t k = 1; k < parts.size(); ++k) {
    const auto& pv = val(parts[k].id);
    if (!pv.same_shape(out)) throw std::invalid_argument("add_n: shape mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += pv.data[i];
    rg = rg || (grad_enabled_ && needs(parts[k]));
  }
  std::vector<Var> pv(parts.begin(), parts.end());
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, o, pv = std::move(pv)] {
      const auto& go = nodes_[o.id].grad;
      for (Var p : pv) {
        if (!needs(p)) continue;
        auto& g = grad_of(p.id);
        for (std::size_t i = 0; i < go.size(); ++i) g.data[i] += go.data[i];
      }
    };
  }
  return o;
}

template <class T>
Var Tape<T>::scale(Var a, T s) {
  Tensor<T> out = val(a.id);
  for (auto& x : out.data) x *= s;
  const bool rg = any_requires({a});
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, o, s] {
      const auto& go = nodes_[o.id].grad;
      auto& g = grad_of(a.id);
      for (std::size_t i = 0; i < go.size(); ++i) g.data[i] += s * go.data[i];
    };
  }
  return o;
}

template <class T>
Var Tape<T>::add_scalar(Var a, T c) {
  Tensor<T> out = val(a.id);
  for (auto& x : out.data) x += c;
  const bool rg = any_requires({a});
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, o] {
      const auto& go = nodes_[o.id].grad;
      auto& g = grad_of(a.id);
      for (std::size_t i = 0; i < go.size(); ++i) g.data[i] += go.data[i];
    };
  }
  return o;
}

template <class T>
Var Tape<T>::abs(Var a) {
  Tensor<T> out = val(a.id);
  for (auto& x : out.data) x = std::abs(x);
  const bool rg = any_requires({a});
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, o] {
      const auto& go = nodes_[o.id].grad;
      const auto& av = val(a.id);
      auto& g = grad_of(a.id);
      for (std::size_t i = 0; i < go.size(); ++i) {
        const T x = av.data[i];
        g.data[i] += x > T(0) ? go.data[i] : (x < T(0) ? -go.data[i] : T(0));
      }
    };
  }
  return o;
}

template <class T>
Var Tape<T>::relu(Var a) {
  Tensor<T> out = val(a.id);
  for (auto& x : out.data) x = x > T(0) ? x : T(0);
  const bool rg = any_requires({a});
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, o] {
      const auto& go = nodes_[o.id].grad;
      const auto& av = val(a.id);
      auto& g = grad_of(a.id);
      for (std::size_t i = 0; i < go.size(); ++i)
        if (av.data[i] > T(0)) g.data[i] += go.data[i];
    };
  }
  return o;
}

template <class T>
Var Tape<T>::gelu(Var a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double c3 = 0.044715;
  Tensor<T> out = val(a.id);
  for (auto& x : out.data) {
    const T u = static_cast<T>(k) * (x + static_cast<T>(c3) * x * x * x);
    x = T(0.5) * x * (T(1) + std::tanh(u));
  }
  const bool rg = any_requires({a});
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, o] {
      const auto& go = nodes_[o.id].grad;
      const auto& av = val(a.id);
      auto& g = grad_of(a.id);
      for (std::size_t i = 0; i < go.size(); ++i) {
        const T x = av.data[i];
        const T u = static_cast<T>(k) * (x + static_cast<T>(c3) * x * x * x);
        const T th = std::tanh(u);
        const T du = static_cast<T>(k) * (T(1) + T(3) * static_cast<T>(c3) * x * x);
        g.data[i] += go.data[i] * (T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du);
      }
    };
  }
  return o;
}

template <class T>
Var Tape<T>::sigmoid(Var a) {
  Tensor<T> out = val(a.id);
  for (auto& x : out.data) x = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  const bool rg = any_requires({a});
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, o] {
      const auto& go = nodes_[o.id].grad;
      const auto& y = val(o.id);
      auto& g = grad_of(a.id);
      for (std::size_t i = 0; i < go.size(); ++i) g.data[i] += go.data[i] * y.data[i] * (T(1) - y.data[i]);
    };
  }
  return o;
}

template <class T>
Var Tape<T>::matmul(Var a, Var b) {
  Tensor<T> out;
  kernels::gemm(val(a.id), Trans::no, val(b.id), Trans::no, out, false);
  const bool rg = any_requires({a, b});
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, b, o] {
      const auto& go = nodes_[o.id].grad;
      if (needs(a)) kernels::gemm(go, Trans::no, val(b.id), Trans::yes, grad_of(a.id), true);
      if (needs(b)) kernels::gemm(val(a.id), Trans::yes, go, Trans::no, grad_of(b.id), true);
    };
  }
  return o;
}

template <class T>
Var Tape<T>::layer_norm(Var x, Var gain, Var bias, T eps) {
  const auto& xv = val(x.id);
  const auto& gv = val(gain.id);
  const auto& bv = val(bias.id);
  if (gv.size() != static_cast<std::size_t>(xv.cols) || bv.size() != static_cast<std::size_t>(xv.cols))
    throw std::invalid_argument("layer_norm: gain/bias width mismatch");
  const int n = xv.rows, m = xv.cols;
  Tensor<T> xhat(n, m);
  std::vector<T> rstd(n);
  Tensor<T> out(n, m);
  for (int r = 0; r < n; ++r) {
    T mu = T(0);
    for (int c = 0; c < m; ++c) mu += xv(r, c);
    mu /= static_cast<T>(m);
    T var = T(0);
    for (int c = 0; c < m; ++c) var += (xv(r, c) - mu) * (xv(r, c) - mu);
    var /= static_cast<T>(m);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (int c = 0; c < m; ++c) {
      xhat(r, c) = (xv(r, c) - mu) * rstd[r];
      out(r, c) = xhat(r, c) * gv.data[c] + bv.data[c];
    }
  }
  const bool rg = any_requires({x, gain, bias});
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, x, gain, bias, o, xhat = std::move(xhat), rstd = std::move(rstd)] {
      const auto& go = nodes_[o.id].grad;
      const auto& g_gain = val(gain.id);
      const int rows = go.rows, cols = go.cols;
      if (needs(gain)) {
        auto& gg = grad_of(gain.id);
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) gg.data[c] += go(r, c) * xhat(r, c);
      }
      if (needs(bias)) {
        auto& gb = grad_of(bias.id);
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) gb.data[c] += go(r, c);
      }
      if (needs(x)) {
        auto& gx = grad_of(x.id);
        for (int r = 0; r < rows; ++r) {
          T mean_d = T(0), mean_dx = T(0);
          for (int c = 0; c < cols; ++c) {
            const T d = go(r, c) * g_gain.data[c];
            mean_d += d;
            mean_dx += d * xhat(r, c);
          }
          mean_d /= static_cast<T>(cols);
          mean_dx /= static_cast<T>(cols);
          for (int c = 0; c < cols; ++c) {
            const T d = go(r, c) * g_gain.data[c];
            gx(r, c) += rstd[r] * (d - mean_d - xhat(r, c) * mean_dx);
          }
        }
      }
    };
  }
  return o;
}

template <class T>
Var Tape<T>::attention(Var q, Var k, Var v, int heads, bool causal, std::span<const unsigned char> key_mask) {
  const auto& qv = val(q.id);
  const auto& kv = val(k.id);
  const auto& vv = val(v.id);
  if (qv.cols != kv.cols || kv.cols != vv.cols || kv.rows != vv.rows)
    throw std::invalid_argument("attention: q/k/v shape mismatch");
  if (heads <= 0 || qv.cols % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
  if (!key_mask.empty() && key_mask.size() != static_cast<std::size_t>(kv.rows))
    throw std::invalid_argument("attention: key mask length mismatch");
  const int tq = qv.rows, tk = kv.rows, dh = qv.cols / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  // probs[h] is tq x tk
  std::vector<Tensor<T>> probs(heads, Tensor<T>(tq, tk));
  Tensor<T> out(tq, qv.cols);
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    auto& p = probs[h];
    for (int i = 0; i < tq; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j < tk; ++j) {
        const bool hidden = (causal && j > i) || (!key_mask.empty() && key_mask[j] == 0);
        if (hidden) {
          p(i, j) = -std::numeric_limits<T>::infinity();
          continue;
        }
        T s = T(0);
        for (int c = 0; c < dh; ++c) s += qv(i, off + c) * kv(j, off + c);
        p(i, j) = s * inv_sqrt;
        mx = std::max(mx, p(i, j));
      }
      T z = T(0);
      for (int j = 0; j < tk; ++j) {
        p(i, j) = std::isinf(p(i, j)) ? T(0) : std::exp(p(i, j) - mx);
        z += p(i, j);
      }
      if (z <= T(0)) throw std::invalid_argument("attention: a query row sees no keys");
      for (int j = 0; j < tk; ++j) p(i, j) /= z;
      for (int j = 0; j < tk; ++j) {
        const T w = p(i, j);
        if (w == T(0)) continue;
        for (int c = 0; c < dh; ++c) out(i, off + c) += w * vv(j, off + c);
      }
    }
  }
  const bool rg = any_requires({q, k, v});
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, q, k, v, o, heads, dh, inv_sqrt, probs = std::move(probs)] {
      const auto& go = nodes_[o.id].grad;
      const auto& qv2 = val(q.id);
      const auto& kv2 = val(k.id);
      const auto& vv2 = val(v.id);
      Tensor<T>* gq = needs(q) ? &grad_of(q.id) : nullptr;
      Tensor<T>* gk = needs(k) ? &grad_of(k.id) : nullptr;
      Tensor<T>* gv = needs(v) ? &grad_of(v.id) : nullptr;
      const int tq2 = qv2.rows, tk2 = kv2.rows;
      std::vector<T> dp(tk2);
      for (int h = 0; h < heads; ++h) {
        const int off = h * dh;
        const auto& p = probs[h];
        for (int i = 0; i < tq2; ++i) {
          T dot = T(0);
          for (int j = 0; j < tk2; ++j) {
            T s = T(0);
            for (int c = 0; c < dh; ++c) s += go(i, off + c) * vv2(j, off + c);
            dp[j] = s;
            dot += s * p(i, j);
            if (gv && p(i, j) != T(0))
              for (int c = 0; c < dh; ++c) (*gv)(j, off + c) += p(i, j) * go(i, off + c);
          }
          for (int j = 0; j < tk2; ++j) {
            const T ds = p(i, j) * (dp[j] - dot) * inv_sqrt;
            if (ds == T(0)) continue;
            if (gq)
              for (int c = 0; c < dh; ++c) (*gq)(i, off + c) += ds * kv2(j, off + c);
            if (gk)
              for (int c = 0; c < dh; ++c) (*gk)(j, off + c) += ds * qv2(i, off + c);
          }
        }
      }
    };
  }
  return o;
}

template <class T>
Var Tape<T>::mean_rows(Var a, std::span<const unsigned char> row_mask) {
  const auto& av = val(a.id);
  if (!row_mask.empty() && row_mask.size() != static_cast<std::size_t>(av.rows))
    throw std::invalid_argument("mean_rows: mask length mismatch");
  int count = 0;
  for (int r = 0; r < av.rows; ++r) count += row_mask.empty() || row_mask[r] != 0;
  if (count == 0) throw std::invalid_argument("mean_rows: no unmasked rows");
  Tensor<T> out(1, av.cols);
  for (int r = 0; r < av.rows; ++r) {
    if (!row_mask.empty() && row_mask[r] == 0) continue;
    for (int c = 0; c < av.cols; ++c) out.data[c] += av(r, c);
  }
  for (auto& x : out.data) x /= static_cast<T>(count);
  const bool rg = any_requires({a});
  std::vector<unsigned char> mask(row_mask.begin(), row_mask.end());
  Var o = push(std::move(out), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, o, count, mask = std::move(mask)] {
      const auto& go = nodes_[o.id].grad;
      auto& g = grad_of(a.id);
      for (int r = 0; r < g.rows; ++r) {
        if (!mask.empty() && mask[r] == 0) continue;
        for (int c = 0; c < g.cols; ++c) g(r, c) += go.data[c] / static_cast<T>(count);
      }
    };
  }
  return o;
}

template <class T>
Var Tape<T>::sum(Var a) {
  T s = T(0);
  for (T x : val(a.id).data) s += x;
  const bool rg = any_requires({a});
  Var o = push(Tensor<T>(1, 1, s), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, o] {
      const T go = nodes_[o.id].grad.data[0];
      for (auto& x : grad_of(a.id).data) x += go;
    };
  }
  return o;
}

template <class T>
Var Tape<T>::mean(Var a) {
  const auto n = val(a.id).size();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(n));
}

template <class T>
Var Tape<T>::sum_squares(Var a) {
  T s = T(0);
  for (T x : val(a.id).data) s += x * x;
  const bool rg = any_requires({a});
  Var o = push(Tensor<T>(1, 1, s), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, o] {
      const T go = nodes_[o.id].grad.data[0];
      const auto& av = val(a.id);
      auto& g = grad_of(a.id);
      for (std::size_t i = 0; i < av.size(); ++i) g.data[i] += T(2) * go * av.data[i];
    };
  }
  return o;
}

template <class T>
Var Tape<T>::distance(Var a, Var b) {
  const auto& av = val(a.id);
  const auto& bv = val(b.id);
  if (!av.same_shape(bv) || av.rows != 1) throw std::invalid_argument("distance: expects two equal 1 x n rows");
  T s = T(0);
  for (std::size_t i = 0; i < av.size(); ++i) s += (av.data[i] - bv.data[i]) * (av.data[i] - bv.data[i]);
  const T d = std::sqrt(s);
  const bool rg = any_requires({a, b});
  Var o = push(Tensor<T>(1, 1, d), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, a, b, o, d] {
      if (d == T(0)) return;
      const T go = nodes_[o.id].grad.data[0];
      const auto& av2 = val(a.id);
      const auto& bv2 = val(b.id);
      Tensor<T>* ga = needs(a) ? &grad_of(a.id) : nullptr;
      Tensor<T>* gb = needs(b) ? &grad_of(b.id) : nullptr;
      for (std::size_t i = 0; i < av2.size(); ++i) {
        const T w = go * (av2.data[i] - bv2.data[i]) / d;
        if (ga) ga->data[i] += w;
        if (gb) gb->data[i] -= w;
      }
    };
  }
  return o;
}

template <class T>
Var Tape<T>::nll_rows(Var logits, std::span<const int> targets) {
  const auto& lv = val(logits.id);
  if (targets.size() != static_cast<std::size_t>(lv.rows)) throw std::invalid_argument("nll_rows: target count mismatch");
  Tensor<T> probs(lv.rows, lv.cols);
  T total = T(0);
  for (int r = 0; r < lv.rows; ++r) {
    if (targets[r] < 0) continue;
    if (targets[r] >= lv.cols) throw std::out_of_range("nll_rows: target id out of range");
    T mx = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < lv.cols; ++c) mx = std::max(mx, lv(r, c));
    T z = T(0);
    for (int c = 0; c < lv.cols; ++c) {
      probs(r, c) = std::exp(lv(r, c) - mx);
      z += probs(r, c);
    }
    for (int c = 0; c < lv.cols; ++c) probs(r, c) /= z;
    total += (mx + std::log(z)) - lv(r, targets[r]);
  }
  const bool rg = any_requires({logits});
  std::vector<int> tv(targets.begin(), targets.end());
  Var o = push(Tensor<T>(1, 1, total), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, logits, o, tv = std::move(tv), probs = std::move(probs)] {
      const T go = nodes_[o.id].grad.data[0];
      auto& g = grad_of(logits.id);
      for (int r = 0; r < g.rows; ++r) {
        if (tv[r] < 0) continue;
        for (int c = 0; c < g.cols; ++c) g(r, c) += go * probs(r, c);
        g(r, tv[r]) -= go;
      }
    };
  }
  return o;
}

template <class T>
Var Tape<T>::bce_with_logits(Var logit, T y) {
  const T z = scalar(logit);
  const T loss = std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  const bool rg = any_requires({logit});
  Var o = push(Tensor<T>(1, 1, loss), rg, {});
  if (rg) {
    nodes_[o.id].backward = [this, logit, o, z, y] {
      const T go = nodes_[o.id].grad.data[0];
      const T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
      grad_of(logit.id).data[0] += go * (s - y);
    };
  }
  return o;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace heronet
