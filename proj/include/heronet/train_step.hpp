// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "heronet/autograd.hpp"
#include "heronet/params.hpp"
#include "heronet/retrieval.hpp"

namespace heronet {

/// Records `build(tape)` with gradients for `prefixes`, checks the loss is
/// finite, backpropagates and applies one optimizer update. A non-finite
/// loss throws NumericalAbort before any parameter changes.
template <class F>
double run_train_step(ParamStore<float>& params, Adam<float>& opt, double lr, const std::vector<std::string>& prefixes,
                      const char* what, F&& build) {
  Tape<float> tape(true, prefixes);
  Var loss = build(tape);
  const double value = tape.scalar(loss);
  if (!std::isfinite(value)) throw NumericalAbort(std::string(what) + ": non-finite loss");
  tape.backward(loss);
  tape.accumulate_param_grads(params);
  opt.step(params, static_cast<float>(lr), prefixes);
  return value;
}

}  // namespace heronet
