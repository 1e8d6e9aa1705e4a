// SPDX-License-Identifier: Apache-2.0
#include "heronet/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace heronet {

void ModelConfig::validate() const {
  if (vocab_size <= kEou) throw std::invalid_argument("model: vocab_size too small");
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
    throw std::invalid_argument("model: d_model must be a positive multiple of n_heads");
  if (n_layers < 1 || d_ff < 1 || max_seq_len < 2 || d_proj < 1)
    throw std::invalid_argument("model: layer sizes must be positive");
  if (!(init_std > 0.0)) throw std::invalid_argument("model: init_std must be positive");
}

const char* task_name(Task t) { return t == Task::sqd ? "sqd" : "qrm"; }

namespace {

struct Shape {
  std::string name;
  int rows, cols;
  enum Kind { normal, zeros, ones } kind;
};

void encoder_shapes(std::vector<Shape>& out, const std::string& p, const ModelConfig& c) {
  const int d = c.d_model;
  out.push_back({p + ".tok_emb", c.vocab_size, d, Shape::normal});
  out.push_back({p + ".pos_emb", c.max_seq_len, d, Shape::normal});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string b = p + ".l" + std::to_string(l);
    for (const char* ln : {".ln1", ".ln2"}) {
      out.push_back({b + ln + ".g", 1, d, Shape::ones});
      out.push_back({b + ln + ".b", 1, d, Shape::zeros});
    }
    for (const char* m : {"q", "k", "v", "o"}) {
      out.push_back({b + ".attn.w" + m, d, d, Shape::normal});
      out.push_back({b + ".attn.b" + m, 1, d, Shape::zeros});
    }
    out.push_back({b + ".ff.w1", d, c.d_ff, Shape::normal});
    out.push_back({b + ".ff.b1", 1, c.d_ff, Shape::zeros});
    out.push_back({b + ".ff.w2", c.d_ff, d, Shape::normal});
    out.push_back({b + ".ff.b2", 1, d, Shape::zeros});
  }
  out.push_back({p + ".ln_f.g", 1, d, Shape::ones});
  out.push_back({p + ".ln_f.b", 1, d, Shape::zeros});
}

void decoder_shapes(std::vector<Shape>& out, const ModelConfig& c) {
  const int d = c.d_model;
  out.push_back({"dec.pos_emb", c.max_seq_len, d, Shape::normal});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string b = "dec.l" + std::to_string(l);
    for (const char* ln : {".ln1", ".ln2", ".ln3"}) {
      out.push_back({b + ln + ".g", 1, d, Shape::ones});
      out.push_back({b + ln + ".b", 1, d, Shape::zeros});
    }
    for (const char* blk : {".attn", ".xattn"})
      for (const char* m : {"q", "k", "v", "o"}) {
        out.push_back({b + blk + ".w" + m, d, d, Shape::normal});
        out.push_back({b + blk + ".b" + m, 1, d, Shape::zeros});
      }
    out.push_back({b + ".ff.w1", d, c.d_ff, Shape::normal});
    out.push_back({b + ".ff.b1", 1, c.d_ff, Shape::zeros});
    out.push_back({b + ".ff.w2", c.d_ff, d, Shape::normal});
    out.push_back({b + ".ff.b2", 1, d, Shape::zeros});
  }
  out.push_back({"dec.ln_f.g", 1, d, Shape::ones});
  out.push_back({"dec.ln_f.b", 1, d, Shape::zeros});
  out.push_back({"dec.out", d, c.vocab_size, Shape::normal});
}

void adapter_shapes(std::vector<Shape>& out, const std::string& p, const ModelConfig& c) {
  out.push_back({p + ".W", c.d_model, c.d_proj, Shape::normal});
  out.push_back({p + ".b", 1, c.d_proj, Shape::zeros});
  out.push_back({p + ".ln_g", 1, c.d_proj, Shape::ones});
  out.push_back({p + ".ln_b", 1, c.d_proj, Shape::zeros});
}

}  // namespace

template <class T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<Shape> shapes;
  encoder_shapes(shapes, "enc", cfg);
  decoder_shapes(shapes, cfg);
  adapter_shapes(shapes, "sqd", cfg);
  adapter_shapes(shapes, "qrm", cfg);
  shapes.push_back({"qrm.score", 3 * cfg.d_proj, 1, Shape::normal});
  if (cfg.separate_sqd_encoder) encoder_shapes(shapes, "enc2", cfg);

  Rng rng(derive_seed(seed, 0x1A17ULL));
  ParamStore<T> store;
  for (const auto& s : shapes) {
    Tensor<T> t(s.rows, s.cols, s.kind == Shape::ones ? T(1) : T(0));
    if (s.kind == Shape::normal)
      for (auto& x : t.data) x = static_cast<T>(cfg.init_std * standard_normal(rng));
    store.add(s.name, std::move(t));
  }
  return store;
}

template <class T>
AdapterParams adapter_params(const ParamStore<T>& params, Task task) {
  const std::string p = task_name(task);
  AdapterParams a;
  a.task = task;
  a.w = params.at(p + ".W").value.template cast<double>();
  a.b = params.at(p + ".b").value.template cast<double>();
  a.ln_g = params.at(p + ".ln_g").value.template cast<double>();
  a.ln_b = params.at(p + ".ln_b").value.template cast<double>();
  if (task == Task::qrm) a.w_m = params.at("qrm.score").value.template cast<double>();
  return a;
}

ProjectedEmbedding adapter_apply(const AdapterParams& adapter, std::span<const double> e) {
  if (static_cast<int>(e.size()) != adapter.w.rows)
    throw std::invalid_argument("adapter_apply: embedding width " + std::to_string(e.size()) + " != " +
                                std::to_string(adapter.w.rows));
  const int dp = adapter.w.cols;
  std::vector<double> y(adapter.b.data.begin(), adapter.b.data.end());
  for (int i = 0; i < adapter.w.rows; ++i) {
    const double ei = e[i];
    const auto wr = adapter.w.row(i);
    for (int j = 0; j < dp; ++j) y[j] += ei * wr[j];
  }
  double mu = 0.0;
  for (double v : y) mu += v;
  mu /= dp;
  double var = 0.0;
  for (double v : y) var += (v - mu) * (v - mu);
  var /= dp;
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  for (int j = 0; j < dp; ++j) y[j] = (y[j] - mu) * rstd * adapter.ln_g.data[j] + adapter.ln_b.data[j];
  return {std::move(y), adapter.task};
}

double sentence_distance(const ProjectedEmbedding& a, const ProjectedEmbedding& b) {
  if (a.task != Task::sqd || b.task != Task::sqd)
    throw std::invalid_argument("sentence_distance: both embeddings must come from the sqd adapter");
  if (a.v.size() != b.v.size()) throw std::invalid_argument("sentence_distance: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) s += (a.v[i] - b.v[i]) * (a.v[i] - b.v[i]);
  return std::sqrt(s);
}

double match_logit_projected(const AdapterParams& qrm, const ProjectedEmbedding& p_q, const ProjectedEmbedding& p_r) {
  if (qrm.task != Task::qrm || p_q.task != Task::qrm || p_r.task != Task::qrm)
    throw std::invalid_argument("match_score: qrm adapter and projections required");
  const std::size_t dp = p_q.v.size();
  if (p_r.v.size() != dp || qrm.w_m.size() != 3 * dp) throw std::invalid_argument("match_score: dimension mismatch");
  double z = 0.0;
  for (std::size_t i = 0; i < dp; ++i) {
    z += qrm.w_m.data[i] * p_q.v[i];
    z += qrm.w_m.data[dp + i] * p_r.v[i];
    z += qrm.w_m.data[2 * dp + i] * std::abs(p_q.v[i] - p_r.v[i]);
  }
  return z;
}

double match_score_projected(const AdapterParams& qrm, const ProjectedEmbedding& p_q, const ProjectedEmbedding& p_r) {
  const double z = match_logit_projected(qrm, p_q, p_r);
  const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  return std::clamp(s, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

double match_score(const AdapterParams& qrm, std::span<const double> e_q, std::span<const double> e_r) {
  return match_score_projected(qrm, adapter_apply(qrm, e_q), adapter_apply(qrm, e_r));
}

// ---------------------------------------------------------------------------

template <class T>
Model<T>::Model(ModelConfig cfg, const ParamStore<T>& params) : cfg_(std::move(cfg)), params_(&params) {
  cfg_.validate();
  if (params.at("enc.tok_emb").value.rows != cfg_.vocab_size)
    throw std::invalid_argument("model: parameter vocab size differs from config");
  if (cfg_.separate_sqd_encoder && !params.contains("enc2.tok_emb"))
    throw std::invalid_argument("model: separate SQD encoder requested but enc2 parameters are missing");
}

template <class T>
std::string Model<T>::encoder_for(Task task) const {
  return task == Task::sqd && cfg_.separate_sqd_encoder ? "enc2" : "enc";
}

template <class T>
Var Model<T>::ln(Tape<T>& tape, const std::string& p, Var x) const {
  return tape.layer_norm(x, w(tape, p + ".g"), w(tape, p + ".b"), static_cast<T>(kLayerNormEps));
}

template <class T>
Var Model<T>::attention_block(Tape<T>& tape, const std::string& p, Var xq, Var xkv, bool causal,
                              std::span<const unsigned char> key_mask) const {
  Var q = tape.linear(xq, w(tape, p + ".wq"), w(tape, p + ".bq"));
  Var k = tape.linear(xkv, w(tape, p + ".wk"), w(tape, p + ".bk"));
  Var v = tape.linear(xkv, w(tape, p + ".wv"), w(tape, p + ".bv"));
  Var a = tape.attention(q, k, v, cfg_.n_heads, causal, key_mask);
  return tape.linear(a, w(tape, p + ".wo"), w(tape, p + ".bo"));
}

template <class T>
Var Model<T>::feed_forward(Tape<T>& tape, const std::string& p, Var x) const {
  Var h = tape.gelu(tape.linear(x, w(tape, p + ".w1"), w(tape, p + ".b1")));
  return tape.linear(h, w(tape, p + ".w2"), w(tape, p + ".b2"));
}

namespace {

std::vector<unsigned char> non_pad_mask(std::span<const int> ids) {
  std::vector<unsigned char> m(ids.size());
  bool any = false;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    m[i] = ids[i] != kPad;
    any = any || m[i];
  }
  if (!any) throw std::invalid_argument("encoder input has no non-PAD tokens");
  return m;
}

std::vector<int> positions(std::size_t n) {
  std::vector<int> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<int>(i);
  return p;
}

}  // namespace

template <class T>
Var Model<T>::encode(Tape<T>& tape, std::span<const int> ids, const std::string& enc) const {
  if (ids.empty()) throw std::invalid_argument("encode: empty input");
  if (static_cast<int>(ids.size()) > cfg_.max_seq_len)
    throw std::invalid_argument("encode: input longer than max_seq_len");
  const auto mask = non_pad_mask(ids);
  const auto pos = positions(ids.size());
  Var x = tape.add(tape.gather_rows(w(tape, enc + ".tok_emb"), ids), tape.gather_rows(w(tape, enc + ".pos_emb"), pos));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string b = enc + ".l" + std::to_string(l);
    Var h = ln(tape, b + ".ln1", x);
    x = tape.add(x, attention_block(tape, b + ".attn", h, h, false, mask));
    x = tape.add(x, feed_forward(tape, b + ".ff", ln(tape, b + ".ln2", x)));
  }
  return ln(tape, enc + ".ln_f", x);
}

template <class T>
Var Model<T>::mean_pool(Tape<T>& tape, Var hidden, std::span<const int> ids) const {
  const auto mask = non_pad_mask(ids);
  return tape.mean_rows(hidden, mask);
}

template <class T>
Var Model<T>::sentence(Tape<T>& tape, std::span<const int> ids, Task task) const {
  return mean_pool(tape, encode(tape, ids, encoder_for(task)), ids);
}

template <class T>
Var Model<T>::project(Tape<T>& tape, Var e, Task task) const {
  const std::string p = task_name(task);
  Var y = tape.linear(e, w(tape, p + ".W"), w(tape, p + ".b"));
  return tape.layer_norm(y, w(tape, p + ".ln_g"), w(tape, p + ".ln_b"), static_cast<T>(kLayerNormEps));
}

template <class T>
Var Model<T>::score_logit(Tape<T>& tape, Var p_q, Var p_r) const {
  const Var parts[3] = {p_q, p_r, tape.abs(tape.sub(p_q, p_r))};
  return tape.matmul(tape.concat_cols(parts), w(tape, "qrm.score"));
}

template <class T>
Var Model<T>::decode_logits(Tape<T>& tape, Var memory, std::span<const int> mem_ids, std::span<const int> dec_in,
                            bool last_only) const {
  if (dec_in.empty()) throw std::invalid_argument("decode: empty decoder input");
  if (static_cast<int>(dec_in.size()) > cfg_.max_seq_len)
    throw std::invalid_argument("decode: decoder input longer than max_seq_len");
  const auto mem_mask = non_pad_mask(mem_ids);
  const auto pos = positions(dec_in.size());
  Var x = tape.add(tape.gather_rows(w(tape, "enc.tok_emb"), dec_in), tape.gather_rows(w(tape, "dec.pos_emb"), pos));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string b = "dec.l" + std::to_string(l);
    Var h = ln(tape, b + ".ln1", x);
    x = tape.add(x, attention_block(tape, b + ".attn", h, h, true, {}));
    x = tape.add(x, attention_block(tape, b + ".xattn", ln(tape, b + ".ln2", x), memory, false, mem_mask));
    x = tape.add(x, feed_forward(tape, b + ".ff", ln(tape, b + ".ln3", x)));
  }
  if (last_only) x = tape.slice_rows(x, static_cast<int>(dec_in.size()) - 1, 1);
  return tape.matmul(ln(tape, "dec.ln_f", x), w(tape, "dec.out"));
}

template <class T>
Var Model<T>::sequence_nll(Tape<T>& tape, Var memory, std::span<const int> mem_ids, std::span<const int> dec_in,
                           std::span<const int> targets) const {
  if (dec_in.size() != targets.size()) throw std::invalid_argument("sequence_nll: input/target length mismatch");
  return tape.nll_rows(decode_logits(tape, memory, mem_ids, dec_in), targets);
}

template <class T>
HiddenStates<T> Model<T>::hidden(std::span<const int> ids, const std::string& enc) const {
  Tape<T> tape;
  Var h = encode(tape, ids, enc);
  return {tape.value(h), std::vector<int>(ids.begin(), ids.end())};
}

template <class T>
SentenceEmbedding Model<T>::pool_hidden(const HiddenStates<T>& hs) const {
  const auto mask = non_pad_mask(hs.ids);
  SentenceEmbedding e(static_cast<std::size_t>(hs.h.cols), 0.0);
  int count = 0;
  for (int r = 0; r < hs.h.rows; ++r) {
    if (!mask[r]) continue;
    ++count;
    for (int c = 0; c < hs.h.cols; ++c) e[c] += static_cast<double>(hs.h(r, c));
  }
  for (auto& x : e) x /= count;
  return e;
}

template <class T>
SentenceEmbedding Model<T>::sentence_embedding(std::span<const int> ids, Task task) const {
  return pool_hidden(hidden(ids, encoder_for(task)));
}

template <class T>
std::vector<double> Model<T>::decode_next(const HiddenStates<T>& hs, std::span<const int> prefix) const {
  if (prefix.empty() || prefix[0] != kBos) throw std::invalid_argument("decode_next: prefix must start with BOS");
  if (static_cast<int>(prefix.size()) > cfg_.max_seq_len)
    throw std::invalid_argument("decode_next: prefix longer than max_seq_len");
  Tape<T> tape;
  Var mem = tape.constant_ref(hs.h);
  const auto& logits = tape.value(decode_logits(tape, mem, hs.ids, prefix, true));
  std::vector<double> p(logits.data.begin(), logits.data.end());
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (auto& x : p) {
    x = std::exp(x - mx);
    z += x;
  }
  for (auto& x : p) x /= z;
  return p;
}

template <class T>
TokenSequence Model<T>::sample_sequence(const HiddenStates<T>& hs, const SampleMode& mode, Rng* rng, int max_new,
                                        std::span<const int> prefix) const {
  TokenSequence seq;
  if (prefix.empty())
    seq.ids.push_back(kBos);
  else
    seq.ids.assign(prefix.begin(), prefix.end());
  if (!mode.greedy() && rng == nullptr) throw std::invalid_argument("sample_sequence: sampling needs an rng");
  int produced = 0;
  while (seq.ids.back() != kEos && produced < max_new && static_cast<int>(seq.ids.size()) < cfg_.max_seq_len) {
    auto p = decode_next(hs, seq.ids);
    int next = 0;
    if (mode.greedy()) {
      for (int i = 1; i < static_cast<int>(p.size()); ++i)
        if (p[i] > p[next]) next = i;
    } else {
      double z = 0.0;
      if (mode.temperature != 1.0) {
        const double inv = 1.0 / mode.temperature;
        double mx = -std::numeric_limits<double>::infinity();
        for (double x : p) mx = std::max(mx, std::log(x));
        for (auto& x : p) x = std::exp((std::log(x) - mx) * inv);
      }
      for (double x : p) z += x;
      const double u = uniform01(*rng) * z;
      double cum = 0.0;
      next = -1;
      for (int i = 0; i < static_cast<int>(p.size()); ++i) {
        cum += p[i];
        if (u < cum) {
          next = i;
          break;
        }
      }
      if (next < 0)
        for (int i = static_cast<int>(p.size()) - 1; i >= 0 && next < 0; --i)
          if (p[i] > 0.0) next = i;
    }
    seq.ids.push_back(next);
    ++produced;
  }
  return seq;
}

DecoderPair teacher_forcing_pair(std::span<const int> response, int max_seq_len) {
  DecoderPair d;
  d.dec_in.push_back(kBos);
  d.dec_in.insert(d.dec_in.end(), response.begin(), response.end());
  d.targets.assign(response.begin(), response.end());
  d.targets.push_back(kEos);
  if (static_cast<int>(d.dec_in.size()) > max_seq_len) {
    d.dec_in.resize(static_cast<std::size_t>(max_seq_len));
    d.targets.resize(static_cast<std::size_t>(max_seq_len));
  }
  return d;
}

std::vector<int> generated_tokens(const TokenSequence& seq) {
  if (seq.ids.empty() || seq.ids[0] != kBos) return seq.ids;
  return {seq.ids.begin() + 1, seq.ids.end()};
}

std::vector<int> strip_special(std::span<const int> ids) {
  std::vector<int> out;
  for (int id : ids)
    if (id != kBos && id != kEos && id != kPad) out.push_back(id);
  return out;
}

std::vector<int> encodable(std::span<const int> ids) {
  if (ids.empty()) return {kEos};
  return {ids.begin(), ids.end()};
}

template ParamStore<float> init_params<float>(const ModelConfig&, std::uint64_t);
template ParamStore<double> init_params<double>(const ModelConfig&, std::uint64_t);
template AdapterParams adapter_params<float>(const ParamStore<float>&, Task);
template AdapterParams adapter_params<double>(const ParamStore<double>&, Task);
template class Model<float>;
template class Model<double>;

}  // namespace heronet
