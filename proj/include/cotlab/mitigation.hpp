#pragma once

#include <span>
#include <string>
#include <vector>

#include "cotlab/attribution.hpp"
#include "cotlab/dataset.hpp"
#include "cotlab/model.hpp"
#include "cotlab/prompt.hpp"

namespace cotlab {

/**
 * The two mitigation methods and their combination.
 *
 * Residual Decoding rescores the top-n candidate tokens at every step with an
 * attention reward: how much of the new token's attention mass (at one
 * chosen layer) lands on the question context, relative to the whole prompt.
 * The Serial-Position Swap reassembles the answer prompt as [CoT][Question]
 * instead of [Question][CoT], shortening the question's distance to the
 * prediction position.
 */

enum class SegmentOrder { QuestionThenCot, CotThenQuestion };

inline SegmentOrder flip(SegmentOrder o) {
  return o == SegmentOrder::QuestionThenCot ? SegmentOrder::CotThenQuestion
                                            : SegmentOrder::QuestionThenCot;
}

/// How the per-head attention rows aggregate into one reward.
/// MassRatio (default): ratio of head-averaged masses.
/// PerHeadMean: mean over heads of each head's own mass ratio.
enum class HeadReduce { MassRatio, PerHeadMean };

struct DecodePolicy {
  int candidate_n = 4;
  double omega = 80.0;
  int reward_layer = -1;  // -1: round(0.375 * n_layers)
  int max_new_tokens = 64;
  TokenId stop_token = tok::kEos;
  HeadReduce head_reduce = HeadReduce::MassRatio;

  int resolved_reward_layer(const ModelConfig& cfg) const;
  void validate(const ModelConfig& cfg) const;
};

struct RewardValue {
  double value = 0.0;
  bool degenerate = false;  // denominator mass was zero
};

/// Pure ratio arithmetic on per-head attention rows (H × T).
RewardValue mass_ratio(const Matrix& head_rows, TokenRange q_span, int prompt_len,
                       HeadReduce reduce);

/// Appends `candidate`, reads the new token's attention rows at
/// `reward_layer`, and returns mass(q_span) / mass(prompt).
RewardValue attention_reward(const TracedModel& model, const TokenSeq& current,
                             TokenRange q_span, int prompt_len, TokenId candidate,
                             int reward_layer, HeadReduce reduce = HeadReduce::MassRatio);

/// Selection rule: argmax of logit + omega * reward, ties to the lowest
/// token id. Returns the index into the candidate arrays.
int choose_candidate(std::span<const TokenId> ids, std::span<const double> logits,
                     std::span<const double> rewards, double omega);

struct DecodeStep {
  int step = 0;
  std::vector<TokenId> candidates;
  std::vector<double> logits;
  std::vector<double> rewards;
  std::vector<std::uint8_t> degenerate;
  std::vector<double> combined;
  TokenId chosen = -1;
  int forward_passes = 0;
};

struct DecodeAudit {
  std::vector<DecodeStep> steps;
  bool truncated = false;
};

/// One JSON line per step.
std::string audit_to_jsonl(const DecodeAudit& audit, const std::string& sample_id,
                           const std::string& method);

struct DecodeResult {
  TokenSeq suffix;  // generated tokens, stop token excluded
  bool hit_stop = false;
  int steps = 0;
  long long token_passes = 0;  // Σ sequence length over every forward pass
};

DecodeResult greedy_decode(const TracedModel& model, const TokenSeq& prompt,
                           int max_new_tokens, TokenId stop_token);

DecodeResult beam_decode(const TracedModel& model, const TokenSeq& prompt, int beam_width,
                         int max_new_tokens, TokenId stop_token);

struct ResidualDecodeResult : DecodeResult {
  DecodeAudit audit;
};

/// Residual Decoding. Throws TruncatedOutputError (carrying the partial
/// suffix) if the context window fills up mid-generation.
ResidualDecodeResult residual_decode(const TracedModel& model, const TokenSeq& prompt,
                                     TokenRange q_span, const DecodePolicy& policy);

struct AssembledPrompt {
  TokenSeq tokens;  // BOS + bytes
  std::string text;
  SegmentOrder order = SegmentOrder::CotThenQuestion;
  TokenRange question, options, cot;
  int last = -1;

  /// Region map for tracing; defined for the [question][cot] order.
  SpanMap span_map(const TokenSeq& toks) const;
};

/// Pure prompt reassembly; the segment byte content is preserved verbatim,
/// only the order changes.
AssembledPrompt sps_assemble(const TokenSeq& cot, const TokenSeq& question,
                             const TokenSeq& options, const TemplateSet& templates,
                             SegmentOrder order, const std::string& fewshot_prefix,
                             int max_seq_len);

/// One forward pass; argmax over the option-label logits at the final
/// position, ties to the lowest option index.
int sps_predict(const TracedModel& model, const TokenSeq& assembled,
                std::span<const TokenId> option_labels);

struct SwapDistances {
  double d1 = 0.0;     // total key-information distance, [question][cot] order
  double d2 = 0.0;     // same after the swap
  double delta = 0.0;  // d2 - d1, algebraically question_len - cot_len
};

/// Distance model with key information at relative positions mu and lambda.
/// delta is returned in closed form, so it is exact.
SwapDistances distance_model(int question_len, int cot_len, double mu, double lambda);

struct SwapLayout {
  SegmentOrder order = SegmentOrder::CotThenQuestion;
  int question_len = 1;
  int cot_len = 1;
  double mu = 0.5;
  double lambda = 0.5;

  void validate() const;
  SwapDistances distances() const { return distance_model(question_len, cot_len, mu, lambda); }
};

enum class CotStrategy { Greedy, Residual };

struct CotPipelineResult {
  int option_index = -1;
  TokenSeq cot;
  DecodeAudit audit;  // populated for the residual strategy
  long long tokens_consumed = 0;
  long long token_passes = 0;
};

/// Full two-stage pipeline: decode a rationale, assemble the answer prompt
/// in the requested order, read out the option.
CotPipelineResult cot_pipeline_answer(const TracedModel& model, const McqSample& sample,
                                      CotStrategy strategy, SegmentOrder order,
                                      const DecodePolicy& policy, const TemplateSet& templates,
                                      int shots, std::span<const McqSample> pool);

/// Residual Decoding followed by the Serial-Position Swap.
CotPipelineResult riders_answer(const TracedModel& model, const McqSample& sample,
                                const DecodePolicy& policy, const TemplateSet& templates,
                                int shots, std::span<const McqSample> pool);

/// Per-dataset (candidate_n, omega) presets reported for the original
/// benchmarks; preserved as provenance metadata, not desk-scale optima.
struct DatasetPreset {
  const char* dataset;
  int candidate_n;
  double omega;
};
std::span<const DatasetPreset> dataset_presets();

}  // namespace cotlab
