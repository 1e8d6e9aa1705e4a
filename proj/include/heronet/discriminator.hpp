// SPDX-License-Identifier: Apache-2.0
#pragma once

// Discriminator D = shared encoder + qrm adapter, trained with a two-margin
// hinge loss against retrieved and generated negatives.

#include <span>
#include <vector>

#include "heronet/model.hpp"
#include "heronet/retrieval.hpp"

namespace heronet {

struct HingeConfig {
  double margin_retrieved = 0.5;
  double margin_generated = 0.5;
  double lambda = 1e-4;

  void validate() const;
};

/// max(0, o1 - s_pos + mean s_ret) + max(0, o2 - s_pos + mean s_gen) + lambda * reg_sq_norm.
double hinge_loss(double s_pos, std::span<const double> s_ret, std::span<const double> s_gen, const HingeConfig& cfg,
                  double reg_sq_norm);

/// Squared L2 norm of every qrm.* tensor.
template <class T>
double qrm_sq_norm(const ParamStore<T>& params);

struct DiscExample {
  Ids query;
  Ids positive;
  std::vector<Ids> retrieved;
  std::vector<Ids> generated;
};

/// Mean hinge over the batch plus the regularizer. A term whose negative
/// set is empty is left out; an example with both empty is rejected.
template <class T>
Var disc_loss(Tape<T>& tape, const Model<T>& model, std::span<const DiscExample> batch, const HingeConfig& cfg);

/// One update of the shared encoder and the qrm adapter; psi_D stays frozen.
double disc_step(const Model<float>& model, ParamStore<float>& params, Adam<float>& opt,
                 std::span<const DiscExample> batch, const HingeConfig& cfg, double lr);

}  // namespace heronet
