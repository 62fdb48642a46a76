#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cotlab/common.hpp"
#include "cotlab/matrix.hpp"
#include "cotlab/tokenizer.hpp"

namespace cotlab {

/**
 * Fully instrumented desk-scale decoder-only transformer.
 *
 * The model is deliberately small and deterministic. Every forward pass
 * exposes the internals the probing methods need:
 *   - per (layer, head) post-softmax attention matrices,
 *   - the residual-stream decomposition h = h_prev + attn_out + mlp_out,
 *   - logits, and gradients of a scalar loss with respect to the attention
 *     tensors (taken as the attribution variable).
 *
 * Pre-LN blocks, so the captured attention/MLP outputs are exactly the
 * vectors added into the stream and the decomposition identity holds to the
 * last bit. All math is double precision.
 *
 * A constructed model is immutable and safe to share across threads; each
 * call owns its scratch state.
 */

enum class Positional { AbsoluteLearned, Rotary };

struct ModelConfig {
  int n_layers = 8;
  int n_heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int vocab_size = tok::kVocabSize;
  int max_seq_len = 512;
  std::uint64_t seed = 0x5eedULL;
  Positional positional = Positional::AbsoluteLearned;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Vec ln1_gamma, ln1_beta;
  Matrix wq, wk, wv, wo;  // d_model × d_model
  Vec bq, bk, bv, bo;
  Vec ln2_gamma, ln2_beta;
  Matrix w1;  // d_model × d_ff
  Vec b1;
  Matrix w2;  // d_ff × d_model
  Vec b2;
};

struct Weights {
  Matrix tok_emb;  // vocab × d_model
  Matrix pos_emb;  // max_seq_len × d_model; empty under rotary
  std::vector<LayerWeights> layers;
  Vec lnf_gamma, lnf_beta;
  Matrix unembed;  // d_model × vocab
  Vec unembed_bias;
};

/// Everything one forward pass captured. hidden[l] = the stream after block l;
/// the stream entering block 0 is `embeddings`, so for every layer l and
/// position i: hidden[l] = (l ? hidden[l-1] : embeddings) + attn_out[l] + mlp_out[l].
struct ForwardTrace {
  Matrix logits;                               // T × vocab
  std::vector<std::vector<Matrix>> attention;  // [layer][head], T × T
  Matrix embeddings;                           // T × d_model
  std::vector<Matrix> hidden;                  // [layer] T × d_model
  std::vector<Matrix> attn_out;                // [layer] T × d_model
  std::vector<Matrix> mlp_out;                 // [layer] T × d_model

  int seq_len() const { return logits.rows; }
  /// Softmax probability of `token` at the final position.
  double final_prob(TokenId token) const;
  Vec final_probs() const;
};

struct InterventionSpec {
  Component component = Component::HiddenState;
  std::vector<int> layers;
  TokenRange span;
  double noise_std = 0.0;
  std::uint64_t noise_seed = 0;
};

enum class LossKind { NextTokenOverSpan, AnswerLabel };

struct LossSpec {
  LossKind kind = LossKind::AnswerLabel;
  TokenRange target_span{};  // next-token kind: positions whose tokens are scored
  TokenId label_token = -1;  // answer-label kind

  static LossSpec next_token(TokenRange span) {
    return {LossKind::NextTokenOverSpan, span, -1};
  }
  static LossSpec answer_label(TokenId label) { return {LossKind::AnswerLabel, {}, label}; }
};

/// Per (layer, head) T×T tensors; the shape of captured attention and of its
/// gradients.
using AttnTensors = std::vector<std::vector<Matrix>>;

AttnTensors scale_attention(const AttnTensors& a, double scale);

class TracedModel {
 public:
  /// Seeded random initialization from the config.
  explicit TracedModel(const ModelConfig& cfg);

  /// Weight-file round trip (little-endian f32 tensors, versioned header).
  static TracedModel load_file(const std::string& path);
  void save_file(const std::string& path) const;

  const ModelConfig& config() const { return cfg_; }
  const Weights& weights() const { return w_; }
  Weights& weights() { return w_; }

  ForwardTrace forward(const TokenSeq& tokens) const;
  ForwardTrace forward_with_intervention(const TokenSeq& tokens,
                                         const InterventionSpec& spec) const;

  /// Scalar loss per the spec: mean next-token NLL over a span, or NLL of a
  /// label token at the final position.
  double loss(const TokenSeq& tokens, const LossSpec& spec) const;

  // --- attribution machinery -----------------------------------------------
  // The attribution variable is the tuple of post-softmax attention tensors
  // captured from a clean pass. An injected pass replaces each layer's
  // value-mixing weights with a caller-supplied tensor (causally masked at
  // the point of use); gradients are taken with respect to that tensor, so
  // softmax and the query/key path carry no gradient.

  AttnTensors capture_attention(const TokenSeq& tokens) const;

  /// Loss of the pass that mixes values with `attn` instead of its own softmax.
  double injected_loss(const TokenSeq& tokens, const LossSpec& spec,
                       const AttnTensors& attn) const;

  /// dF/d(attn) of injected_loss, evaluated at `attn`. Masked entries are 0.
  AttnTensors injected_grad(const TokenSeq& tokens, const LossSpec& spec,
                            const AttnTensors& attn) const;

  /// Gradient of the loss with respect to the attention tensors, evaluated
  /// with every tensor scaled by `scale` before the value-mixing step.
  AttnTensors attention_grad(const TokenSeq& tokens, const LossSpec& spec,
                             double scale) const;

  /// Per-head attention rows of the last position at `layer` (H × T).
  /// Runs only the prefix of the network the row depends on.
  Matrix last_row_attention(const TokenSeq& tokens, int layer) const;

 private:
  TracedModel() = default;
  void init_weights();
  void validate_tokens(const TokenSeq& tokens) const;

  ModelConfig cfg_;
  Weights w_;

  friend struct ForwardRunner;
};

/// Empirical standard deviation of the input-embedding coordinates over a
/// corpus (population convention). Callers form the intervention noise as 3σ.
double embedding_std(const TracedModel& model, std::span<const TokenSeq> corpus);

}  // namespace cotlab
