// SPDX-License-Identifier: Apache-2.0
#include "heronet/discriminator.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

#include "heronet/train_step.hpp"

namespace heronet {

void HingeConfig::validate() const {
  if (!(margin_retrieved > 0) || !(margin_generated > 0)) throw std::invalid_argument("hinge: margins must be > 0");
  if (!(lambda >= 0)) throw std::invalid_argument("hinge: lambda must be >= 0");
}

double hinge_loss(double s_pos, std::span<const double> s_ret, std::span<const double> s_gen, const HingeConfig& cfg,
                  double reg_sq_norm) {
  if (s_ret.empty() || s_gen.empty()) throw std::invalid_argument("hinge_loss: empty negative set");
  auto mean = [](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  return std::max(0.0, cfg.margin_retrieved - s_pos + mean(s_ret)) +
         std::max(0.0, cfg.margin_generated - s_pos + mean(s_gen)) + cfg.lambda * reg_sq_norm;
}

template <class T>
double qrm_sq_norm(const ParamStore<T>& params) {
  double s = 0.0;
  params.for_each([&](const Param<T>& p) {
    if (!has_prefix(p.name, "qrm.")) return;
    for (T v : p.value.data) s += static_cast<double>(v) * static_cast<double>(v);
  });
  return s;
}

template <class T>
Var disc_loss(Tape<T>& tape, const Model<T>& model, std::span<const DiscExample> batch, const HingeConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("disc_loss: empty batch");
  std::vector<Var> terms;
  for (const auto& ex : batch) {
    if (ex.retrieved.empty() && ex.generated.empty()) throw std::invalid_argument("disc_loss: no negatives");
    std::map<Ids, Var> proj;
    auto embed = [&](const Ids& ids) {
      const Ids key = encodable(ids);
      auto it = proj.find(key);
      if (it == proj.end()) it = proj.emplace(key, model.embed(tape, key, Task::qrm)).first;
      return it->second;
    };
    Var pq = embed(ex.query);
    auto score = [&](const Ids& r) { return tape.sigmoid(model.score_logit(tape, pq, embed(r))); };
    Var s_pos = score(ex.positive);
    auto term = [&](const std::vector<Ids>& negs, double margin) {
      std::vector<Var> s;
      for (const auto& r : negs) s.push_back(score(r));
      Var mean_neg = tape.scale(tape.add_n(s), T(1) / static_cast<T>(s.size()));
      terms.push_back(tape.relu(tape.add_scalar(tape.sub(mean_neg, s_pos), static_cast<T>(margin))));
    };
    if (!ex.retrieved.empty()) term(ex.retrieved, cfg.margin_retrieved);
    if (!ex.generated.empty()) term(ex.generated, cfg.margin_generated);
  }
  Var hinge = tape.scale(tape.add_n(terms), T(1) / static_cast<T>(batch.size()));
  if (cfg.lambda == 0.0) return hinge;
  std::vector<Var> reg;
  model.params().for_each([&](const Param<T>& p) {
    if (has_prefix(p.name, "qrm.")) reg.push_back(tape.sum_squares(tape.param(p)));
  });
  return tape.add(hinge, tape.scale(tape.add_n(reg), static_cast<T>(cfg.lambda)));
}

double disc_step(const Model<float>& model, ParamStore<float>& params, Adam<float>& opt,
                 std::span<const DiscExample> batch, const HingeConfig& cfg, double lr) {
  cfg.validate();
  return run_train_step(params, opt, lr, {"enc.", "qrm."}, "disc_step",
                        [&](Tape<float>& tape) { return disc_loss(tape, model, batch, cfg); });
}

template double qrm_sq_norm<float>(const ParamStore<float>&);
template double qrm_sq_norm<double>(const ParamStore<double>&);
template Var disc_loss<float>(Tape<float>&, const Model<float>&, std::span<const DiscExample>, const HingeConfig&);
template Var disc_loss<double>(Tape<double>&, const Model<double>&, std::span<const DiscExample>, const HingeConfig&);

}  // namespace heronet
