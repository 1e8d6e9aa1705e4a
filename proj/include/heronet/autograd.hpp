// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode differentiation over a recorded tape of matrix operations.
// Nodes are appended in evaluation order; backward() walks them in reverse.
// Parameters bound through param() are borrowed, not copied, and only those
// whose name matches a trainable prefix receive gradients.

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "heronet/params.hpp"
#include "heronet/tensor.hpp"

namespace heronet {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class T>
class Tape {
 public:
  /// A tape with gradients disabled records values only.
  explicit Tape(bool grad_enabled = false, std::vector<std::string> trainable_prefixes = {});

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var param(const Param<T>& p);
  Var constant(Tensor<T> value);
  /// Borrowed constant; `value` must outlive the tape.
  Var constant_ref(const Tensor<T>& value);

  const Tensor<T>& value(Var v) const;
  T scalar(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  /// Gradient of the last backward() target w.r.t. `v`; empty when none flowed.
  const Tensor<T>& grad(Var v) const { return nodes_[v.id].grad; }

  /// Seeds d(loss)/d(loss) = 1 for a 1x1 `loss` and propagates.
  void backward(Var loss);
  /// Adds the gradients of bound trainable parameters into `store`.
  void accumulate_param_grads(ParamStore<T>& store) const;

  std::size_t node_count() const { return nodes_.size(); }

  // Structural ops.
  Var gather_rows(Var table, std::span<const int> ids);
  Var slice_rows(Var a, int start, int count);
  Var concat_cols(std::span<const Var> parts);

  // Elementwise and broadcasting.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var add_row(Var a, Var row);
  Var add_n(std::span<const Var> parts);
  Var scale(Var a, T s);
  Var add_scalar(Var a, T c);
  Var abs(Var a);
  Var relu(Var a);
  Var gelu(Var a);
  Var sigmoid(Var a);

  // Linear algebra.
  Var matmul(Var a, Var b);
  Var linear(Var x, Var w, Var bias) { return add_row(matmul(x, w), bias); }
  Var layer_norm(Var x, Var gain, Var bias, T eps);
  /// Multi-head scaled dot-product attention over pre-projected q, k, v.
  /// `key_mask` entries of 0 hide that key; empty means all visible.
  Var attention(Var q, Var k, Var v, int heads, bool causal, std::span<const unsigned char> key_mask = {});

  // Reductions.
  Var mean_rows(Var a, std::span<const unsigned char> row_mask = {});
  Var sum(Var a);
  Var mean(Var a);
  Var sum_squares(Var a);
  /// Euclidean distance between two 1 x n rows.
  Var distance(Var a, Var b);
  /// Sum over rows of -log softmax(row)[target]; negative targets are skipped.
  Var nll_rows(Var logits, std::span<const int> targets);
  /// Binary cross-entropy on a 1x1 logit against label y in [0, 1].
  Var bce_with_logits(Var logit, T y);

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* borrowed = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    const Param<T>* param = nullptr;
    std::function<void()> backward;
    const Tensor<T>& value() const { return borrowed ? *borrowed : owned; }
  };

  bool any_requires(std::initializer_list<Var> parents) const;
  Var push(Tensor<T> value, bool requires_grad, std::function<void()> bw);
  Tensor<T>& grad_of(int id);
  const Tensor<T>& val(int id) const { return nodes_[id].value(); }
  bool needs(Var v) const { return nodes_[v.id].requires_grad; }

  bool grad_enabled_;
  std::vector<std::string> trainable_;
  std::deque<Node> nodes_;
  std::unordered_map<const Param<T>*, int> bound_;
};

}  // namespace heronet
