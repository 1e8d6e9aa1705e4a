// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tiny pre-norm encoder-decoder transformer with MEAN-pooled sentence
// embeddings, two projection adapters (sqd, qrm) and a matching-score head.
//
// Parameter names:
//   enc.*   shared encoder; enc.tok_emb is also the decoder input embedding
//   enc2.*  separate SQD encoder, present only without multi-task sharing
//   dec.*   decoder blocks and output projection
//   sqd.*   similar-query adapter (W, b, ln_g, ln_b)
//   qrm.*   query-response adapter plus qrm.score (3*d_proj x 1)

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "heronet/autograd.hpp"
#include "heronet/corpus.hpp"
#include "heronet/params.hpp"
#include "heronet/rng.hpp"
#include "heronet/tensor.hpp"

namespace heronet {

struct ModelConfig {
  int vocab_size = 512;
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;
  int d_ff = 256;
  int max_seq_len = 64;
  int d_proj = 64;
  double init_std = 0.02;
  bool separate_sqd_encoder = false;

  void validate() const;
};

inline constexpr double kLayerNormEps = 1e-5;

enum class Task { sqd, qrm };

const char* task_name(Task t);

/// Creates every parameter: weights ~ N(0, init_std), biases 0, LN gain 1.
template <class T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Encoder output rows for one input plus the ids they came from.
template <class T>
struct HiddenStates {
  Tensor<T> h;
  std::vector<int> ids;
};

using SentenceEmbedding = std::vector<double>;

struct ProjectedEmbedding {
  std::vector<double> v;
  Task task = Task::sqd;
};

/// Adapter weights in double precision for value-level scoring.
struct AdapterParams {
  Task task = Task::sqd;
  Tensor<double> w;     // d_model x d_proj
  Tensor<double> b;     // 1 x d_proj
  Tensor<double> ln_g;  // 1 x d_proj
  Tensor<double> ln_b;  // 1 x d_proj
  Tensor<double> w_m;   // 3*d_proj x 1, qrm only
};

template <class T>
AdapterParams adapter_params(const ParamStore<T>& params, Task task);

/// LayerNorm(e * W + b).
ProjectedEmbedding adapter_apply(const AdapterParams& adapter, std::span<const double> e);
/// Euclidean distance between two SQD projections.
double sentence_distance(const ProjectedEmbedding& a, const ProjectedEmbedding& b);
/// sigma(W_M . [p_q, p_r, |p_q - p_r|]), clamped into the open interval (0, 1).
double match_score(const AdapterParams& qrm, std::span<const double> e_q, std::span<const double> e_r);
double match_score_projected(const AdapterParams& qrm, const ProjectedEmbedding& p_q, const ProjectedEmbedding& p_r);
double match_logit_projected(const AdapterParams& qrm, const ProjectedEmbedding& p_q, const ProjectedEmbedding& p_r);

struct SampleMode {
  double temperature = 0.0;  // <= 1e-6 means greedy
  bool greedy() const { return temperature <= 1e-6; }
};

template <class T>
class Model {
 public:
  Model(ModelConfig cfg, const ParamStore<T>& params);

  const ModelConfig& config() const { return cfg_; }
  const ParamStore<T>& params() const { return *params_; }

  /// Encoder prefix serving `task` ("enc2" for SQD when separate).
  std::string encoder_for(Task task) const;

  // Graph builders. Every Var refers to `tape`.
  Var encode(Tape<T>& tape, std::span<const int> ids, const std::string& enc = "enc") const;
  Var mean_pool(Tape<T>& tape, Var hidden, std::span<const int> ids) const;
  Var sentence(Tape<T>& tape, std::span<const int> ids, Task task) const;
  Var project(Tape<T>& tape, Var e, Task task) const;
  Var embed(Tape<T>& tape, std::span<const int> ids, Task task) const { return project(tape, sentence(tape, ids, task), task); }
  /// Pre-sigmoid score of two QRM projections (1 x 1).
  Var score_logit(Tape<T>& tape, Var p_q, Var p_r) const;
  /// Decoder logits (rows of dec_in) x vocab; with `last_only` a single row.
  Var decode_logits(Tape<T>& tape, Var memory, std::span<const int> mem_ids, std::span<const int> dec_in,
                    bool last_only = false) const;
  /// Sum of -log p(target_t | dec_in[0..t]) over all targets (teacher forcing).
  Var sequence_nll(Tape<T>& tape, Var memory, std::span<const int> mem_ids, std::span<const int> dec_in,
                   std::span<const int> targets) const;

  // Value-level helpers (no gradients).
  HiddenStates<T> hidden(std::span<const int> ids, const std::string& enc = "enc") const;
  SentenceEmbedding sentence_embedding(std::span<const int> ids, Task task) const;
  SentenceEmbedding pool_hidden(const HiddenStates<T>& hs) const;
  /// Next-token distribution; `prefix` must start with BOS.
  std::vector<double> decode_next(const HiddenStates<T>& hs, std::span<const int> prefix) const;
  /// Extends `prefix` (default [BOS]) until EOS or `max_new` tokens.
  TokenSequence sample_sequence(const HiddenStates<T>& hs, const SampleMode& mode, Rng* rng, int max_new,
                                std::span<const int> prefix = {}) const;

 private:
  Var attention_block(Tape<T>& tape, const std::string& p, Var xq, Var xkv, bool causal,
                      std::span<const unsigned char> key_mask) const;
  Var feed_forward(Tape<T>& tape, const std::string& p, Var x) const;
  Var ln(Tape<T>& tape, const std::string& p, Var x) const;
  Var w(Tape<T>& tape, const std::string& name) const { return tape.param(params_->at(name)); }

  ModelConfig cfg_;
  const ParamStore<T>* params_;
};

/// Response ids for teacher forcing: dec_in = [BOS] + r, targets = r + [EOS], both clipped.
struct DecoderPair {
  std::vector<int> dec_in;
  std::vector<int> targets;
};
DecoderPair teacher_forcing_pair(std::span<const int> response, int max_seq_len);

/// Generated tokens with BOS dropped and EOS kept when present.
std::vector<int> generated_tokens(const TokenSequence& seq);
/// Generated text without BOS/EOS.
std::vector<int> strip_special(std::span<const int> ids);
/// Encoder-safe form of a response: an empty response becomes [EOS].
std::vector<int> encodable(std::span<const int> ids);

}  // namespace heronet
