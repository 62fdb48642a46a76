#include "cotlab/mitigation.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "cotlab/tokenizer.hpp"

namespace cotlab {

int DecodePolicy::resolved_reward_layer(const ModelConfig& cfg) const {
  if (reward_layer >= 0) return reward_layer;
  // Layer 15 of 40 in the probed models, scaled to this depth.
  int l = static_cast<int>(std::lround(0.375 * cfg.n_layers));
  return std::min(l, cfg.n_layers - 1);
}

void DecodePolicy::validate(const ModelConfig& cfg) const {
  if (candidate_n < 1) fail(ErrorCode::BadConfig, "candidate_n must be >= 1");
  if (candidate_n > cfg.vocab_size)
    fail(ErrorCode::BadConfig, "candidate_n cannot exceed the vocabulary");
  if (omega < 0.0) fail(ErrorCode::BadConfig, "omega must be nonnegative");
  if (max_new_tokens < 1) fail(ErrorCode::BadConfig, "max_new_tokens must be >= 1");
  const int l = resolved_reward_layer(cfg);
  if (l < 0 || l >= cfg.n_layers)
    fail(ErrorCode::LayerOutOfRange, "reward layer outside [0, L)");
  if (stop_token < 0 || stop_token >= cfg.vocab_size)
    fail(ErrorCode::TokenOutOfVocab, "stop token outside vocabulary");
}

RewardValue mass_ratio(const Matrix& head_rows, TokenRange q_span, int prompt_len,
                       HeadReduce reduce) {
  if (q_span.empty()) fail(ErrorCode::EmptyRegion, "empty question span");
  if (q_span.begin < 0 || q_span.end > prompt_len || prompt_len > head_rows.cols)
    fail(ErrorCode::SpanOutOfRange, "question span must lie inside the prompt");
  const int H = head_rows.rows;

  if (reduce == HeadReduce::MassRatio) {
    double num = 0.0, den = 0.0;
    for (int h = 0; h < H; ++h) {
      const double* row = head_rows.row(h);
      for (int j = q_span.begin; j < q_span.end; ++j) num += row[j];
      for (int j = 0; j < prompt_len; ++j) den += row[j];
    }
    num /= H;
    den /= H;
    if (den == 0.0) return {0.0, true};
    return {num / den, false};
  }

  // PerHeadMean: each head contributes its own ratio; zero-mass heads are
  // flagged and contribute nothing.
  double total = 0.0;
  bool any_degenerate = false;
  for (int h = 0; h < H; ++h) {
    const double* row = head_rows.row(h);
    double num = 0.0, den = 0.0;
    for (int j = q_span.begin; j < q_span.end; ++j) num += row[j];
    for (int j = 0; j < prompt_len; ++j) den += row[j];
    if (den == 0.0)
      any_degenerate = true;
    else
      total += num / den;
  }
  return {total / H, any_degenerate};
}

RewardValue attention_reward(const TracedModel& model, const TokenSeq& current,
                             TokenRange q_span, int prompt_len, TokenId candidate,
                             int reward_layer, HeadReduce reduce) {
  if (prompt_len > static_cast<int>(current.size()))
    fail(ErrorCode::SpanOutOfRange, "prompt length exceeds the sequence");
  TokenSeq extended = current;
  extended.push_back(candidate);
  const Matrix rows = model.last_row_attention(extended, reward_layer);
  return mass_ratio(rows, q_span, prompt_len, reduce);
}

int choose_candidate(std::span<const TokenId> ids, std::span<const double> logits,
                     std::span<const double> rewards, double omega) {
  int best = 0;
  double best_score = logits[0] + omega * rewards[0];
  for (std::size_t j = 1; j < ids.size(); ++j) {
    const double score = logits[j] + omega * rewards[j];
    if (score > best_score || (score == best_score && ids[j] < ids[best])) {
      best = static_cast<int>(j);
      best_score = score;
    }
  }
  return best;
}

namespace {

/// Indices of the top-n logits, ordered by (logit desc, token id asc).
std::vector<TokenId> top_n_tokens(const double* logits, int vocab, int n) {
  std::vector<TokenId> ids(vocab);
  for (int j = 0; j < vocab; ++j) ids[j] = j;
  std::partial_sort(ids.begin(), ids.begin() + n, ids.end(),
                    [logits](TokenId a, TokenId b) {
                      if (logits[a] != logits[b]) return logits[a] > logits[b];
                      return a < b;
                    });
  ids.resize(n);
  return ids;
}

int greedy_argmax(const double* logits, int vocab) {
  int best = 0;
  for (int j = 1; j < vocab; ++j)
    if (logits[j] > logits[best]) best = j;  // strict: ties keep the lowest id
  return best;
}

}  // namespace

DecodeResult greedy_decode(const TracedModel& model, const TokenSeq& prompt,
                           int max_new_tokens, TokenId stop_token) {
  if (prompt.empty()) fail(ErrorCode::EmptySpan, "empty prompt");
  const int max_seq = model.config().max_seq_len;
  DecodeResult result;
  TokenSeq current = prompt;
  for (int step = 0; step < max_new_tokens; ++step) {
    if (static_cast<int>(current.size()) + 1 > max_seq)
      throw TruncatedOutputError("context window exhausted mid-generation", result.suffix);
    const ForwardTrace trace = model.forward(current);
    result.token_passes += static_cast<long long>(current.size());
    const TokenId chosen =
        greedy_argmax(trace.logits.row(trace.seq_len() - 1), model.config().vocab_size);
    ++result.steps;
    if (chosen == stop_token) {
      result.hit_stop = true;
      break;
    }
    current.push_back(chosen);
    result.suffix.push_back(chosen);
  }
  return result;
}

DecodeResult beam_decode(const TracedModel& model, const TokenSeq& prompt, int beam_width,
                         int max_new_tokens, TokenId stop_token) {
  if (beam_width < 1) fail(ErrorCode::BadConfig, "beam width must be >= 1");
  if (prompt.empty()) fail(ErrorCode::EmptySpan, "empty prompt");
  const int max_seq = model.config().max_seq_len;
  const int vocab = model.config().vocab_size;

  struct Beam {
    TokenSeq suffix;
    double logprob = 0.0;
    bool ended = false;
  };
  std::vector<Beam> beams{{}};
  DecodeResult result;

  for (int step = 0; step < max_new_tokens; ++step) {
    bool all_ended = true;
    for (const Beam& b : beams) all_ended = all_ended && b.ended;
    if (all_ended) break;

    std::vector<Beam> candidates;
    for (const Beam& b : beams) {
      if (b.ended) {
        candidates.push_back(b);
        continue;
      }
      TokenSeq current = prompt;
      current.insert(current.end(), b.suffix.begin(), b.suffix.end());
      if (static_cast<int>(current.size()) + 1 > max_seq)
        throw TruncatedOutputError("context window exhausted mid-generation", b.suffix);
      const ForwardTrace trace = model.forward(current);
      result.token_passes += static_cast<long long>(current.size());
      const double* row = trace.logits.row(trace.seq_len() - 1);
      double mx = row[0];
      for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (int j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
      const double lse = mx + std::log(z);

      std::vector<TokenId> expand = top_n_tokens(row, vocab, std::min(beam_width, vocab));
      for (TokenId t : expand) {
        Beam nb = b;
        nb.logprob += row[t] - lse;
        if (t == stop_token)
          nb.ended = true;
        else
          nb.suffix.push_back(t);
        candidates.push_back(std::move(nb));
      }
    }
    ++result.steps;

    std::sort(candidates.begin(), candidates.end(), [](const Beam& a, const Beam& b) {
      if (a.logprob != b.logprob) return a.logprob > b.logprob;
      return a.suffix < b.suffix;  // full ordering keeps runs reproducible
    });
    if (static_cast<int>(candidates.size()) > beam_width) candidates.resize(beam_width);
    beams = std::move(candidates);
  }

  std::sort(beams.begin(), beams.end(), [](const Beam& a, const Beam& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return a.suffix < b.suffix;
  });
  result.suffix = beams.front().suffix;
  result.hit_stop = beams.front().ended;
  return result;
}

ResidualDecodeResult residual_decode(const TracedModel& model, const TokenSeq& prompt,
                                     TokenRange q_span, const DecodePolicy& policy) {
  const ModelConfig& cfg = model.config();
  policy.validate(cfg);
  if (prompt.empty()) fail(ErrorCode::EmptySpan, "empty prompt");
  const int prompt_len = static_cast<int>(prompt.size());
  if (q_span.empty() || q_span.begin < 0 || q_span.end > prompt_len)
    fail(ErrorCode::EmptyRegion, "question span must lie inside the prompt");
  const int n = policy.candidate_n;
  const int reward_layer = policy.resolved_reward_layer(cfg);

  ResidualDecodeResult result;
  TokenSeq current = prompt;
  for (int step = 0; step < policy.max_new_tokens; ++step) {
    if (static_cast<int>(current.size()) + 1 > cfg.max_seq_len) {
      result.audit.truncated = true;
      throw TruncatedOutputError("context window exhausted mid-generation", result.suffix);
    }
    const ForwardTrace trace = model.forward(current);
    result.token_passes += static_cast<long long>(current.size());
    const double* row = trace.logits.row(trace.seq_len() - 1);

    DecodeStep audit_step;
    audit_step.step = step;
    audit_step.candidates = top_n_tokens(row, cfg.vocab_size, std::min(n, cfg.vocab_size));
    for (TokenId t : audit_step.candidates) {
      audit_step.logits.push_back(row[t]);
      const RewardValue reward =
          attention_reward(model, current, q_span, prompt_len, t, reward_layer,
                           policy.head_reduce);
      result.token_passes += static_cast<long long>(current.size()) + 1;
      audit_step.rewards.push_back(reward.value);
      audit_step.degenerate.push_back(reward.degenerate ? 1 : 0);
      audit_step.combined.push_back(row[t] + policy.omega * reward.value);
    }
    const int idx = choose_candidate(audit_step.candidates, audit_step.logits,
                                     audit_step.rewards, policy.omega);
    audit_step.chosen = audit_step.candidates[idx];
    audit_step.forward_passes = 1 + static_cast<int>(audit_step.candidates.size());
    result.audit.steps.push_back(audit_step);
    ++result.steps;

    if (audit_step.chosen == policy.stop_token) {
      result.hit_stop = true;
      break;
    }
    current.push_back(audit_step.chosen);
    result.suffix.push_back(audit_step.chosen);
  }
  return result;
}

std::string audit_to_jsonl(const DecodeAudit& audit, const std::string& sample_id,
                           const std::string& method) {
  std::string out;
  for (const DecodeStep& s : audit.steps) {
    nlohmann::json j;
    j["sample_id"] = sample_id;
    j["method"] = method;
    j["step"] = s.step;
    j["candidates"] = s.candidates;
    j["logits"] = s.logits;
    j["rewards"] = s.rewards;
    j["degenerate"] = s.degenerate;
    j["combined"] = s.combined;
    j["chosen"] = s.chosen;
    j["forward_passes"] = s.forward_passes;
    out += j.dump() + "\n";
  }
  return out;
}

SpanMap AssembledPrompt::span_map(const TokenSeq& toks) const {
  if (order != SegmentOrder::QuestionThenCot)
    fail(ErrorCode::BadConfig, "region map is defined for the [question][cot] order");
  SpanMap spans;
  spans.context = question;
  spans.options = options;
  spans.cot = cot;
  spans.last = last;
  spans.cot_steps = SpanMap::count_steps(toks, cot);
  spans.validate(static_cast<int>(toks.size()));
  return spans;
}

AssembledPrompt sps_assemble(const TokenSeq& cot, const TokenSeq& question,
                             const TokenSeq& options, const TemplateSet& templates,
                             SegmentOrder order, const std::string& fewshot_prefix,
                             int max_seq_len) {
  if (cot.empty() || question.empty() || options.empty())
    fail(ErrorCode::EmptySpan, "assembly segments must be nonempty");
  const std::string cot_text = tok::decode(cot);
  const std::string question_text = tok::decode(question);
  const std::string options_text = tok::decode(options);

  const PromptTemplate& tmpl =
      order == SegmentOrder::CotThenQuestion ? templates.answer_swapped : templates.answer;
  const Rendered r = render_template(tmpl, question_text, options_text, cot_text,
                                     templates.answer_cue);

  AssembledPrompt out;
  out.order = order;
  out.text = fewshot_prefix + r.text;
  out.tokens = tok::encode(out.text, /*add_bos=*/true);
  if (static_cast<int>(out.tokens.size()) > max_seq_len)
    fail(ErrorCode::ContextOverflow, "assembled prompt exceeds the context window");
  const int shift = static_cast<int>(fewshot_prefix.size());
  out.question = tok::char_range_to_tokens(shift + r.question.begin, shift + r.question.end, true);
  out.options = tok::char_range_to_tokens(shift + r.options.begin, shift + r.options.end, true);
  out.cot = tok::char_range_to_tokens(shift + r.cot.begin, shift + r.cot.end, true);
  out.last = static_cast<int>(out.tokens.size()) - 1;
  return out;
}

int sps_predict(const TracedModel& model, const TokenSeq& assembled,
                std::span<const TokenId> option_labels) {
  if (option_labels.empty()) fail(ErrorCode::EmptyRegion, "no option labels");
  for (std::size_t a = 0; a < option_labels.size(); ++a) {
    if (option_labels[a] < 0 || option_labels[a] >= model.config().vocab_size)
      fail(ErrorCode::TokenOutOfVocab, "option label outside vocabulary");
    for (std::size_t b = a + 1; b < option_labels.size(); ++b)
      if (option_labels[a] == option_labels[b])
        fail(ErrorCode::BadConfig, "option labels must be distinct");
  }
  const ForwardTrace trace = model.forward(assembled);
  const double* row = trace.logits.row(trace.seq_len() - 1);
  int best = 0;
  for (std::size_t a = 1; a < option_labels.size(); ++a)
    if (row[option_labels[a]] > row[option_labels[best]]) best = static_cast<int>(a);
  return best;
}

SwapDistances distance_model(int question_len, int cot_len, double mu, double lambda) {
  if (question_len < 1 || cot_len < 1)
    fail(ErrorCode::BadConfig, "segment lengths must be >= 1");
  if (mu < 0.0 || mu > 1.0 || lambda < 0.0 || lambda > 1.0)
    fail(ErrorCode::BadConfig, "mu and lambda must lie in [0, 1]");
  SwapDistances d;
  d.d1 = mu * question_len + cot_len + lambda * cot_len;
  d.d2 = lambda * cot_len + question_len + mu * question_len;
  // d2 - d1 telescopes to question_len - cot_len; returned in closed form so
  // the identity is exact rather than a rounding casualty.
  d.delta = static_cast<double>(question_len) - static_cast<double>(cot_len);
  return d;
}

void SwapLayout::validate() const {
  if (question_len < 1 || cot_len < 1)
    fail(ErrorCode::BadConfig, "segment lengths must be >= 1");
  if (mu < 0.0 || mu > 1.0 || lambda < 0.0 || lambda > 1.0)
    fail(ErrorCode::BadConfig, "mu and lambda must lie in [0, 1]");
}

CotPipelineResult cot_pipeline_answer(const TracedModel& model, const McqSample& sample,
                                      CotStrategy strategy, SegmentOrder order,
                                      const DecodePolicy& policy, const TemplateSet& templates,
                                      int shots, std::span<const McqSample> pool) {
  const int max_seq = model.config().max_seq_len;
  const PromptBuild prompt = build_prompt(sample, PromptMode::Cot, templates, shots, pool, max_seq);

  CotPipelineResult result;
  long long decode_passes = 0;
  if (strategy == CotStrategy::Residual) {
    ResidualDecodeResult rd = residual_decode(model, prompt.tokens, prompt.context, policy);
    result.cot = std::move(rd.suffix);
    result.audit = std::move(rd.audit);
    decode_passes = rd.token_passes;
  } else {
    DecodeResult greedy =
        greedy_decode(model, prompt.tokens, policy.max_new_tokens, policy.stop_token);
    result.cot = std::move(greedy.suffix);
    decode_passes = greedy.token_passes;
  }

  const TokenSeq question_tokens = tok::encode(sample.context, false);
  const TokenSeq options_tokens = tok::encode(render_options(sample), false);
  const std::string prefix = fewshot_prefix(sample, PromptMode::Cot, templates, shots, pool);
  const AssembledPrompt assembled =
      sps_assemble(result.cot, question_tokens, options_tokens, templates, order, prefix, max_seq);
  result.option_index = sps_predict(model, assembled.tokens, option_label_tokens(sample));

  const long long assembled_len = static_cast<long long>(assembled.tokens.size());
  result.token_passes = decode_passes + assembled_len;
  // Billing-style count: prompt and generation, plus the answer pass's
  // prompt and its one predicted label.
  result.tokens_consumed = static_cast<long long>(prompt.tokens.size()) +
                           static_cast<long long>(result.cot.size()) + assembled_len + 1;
  return result;
}

CotPipelineResult riders_answer(const TracedModel& model, const McqSample& sample,
                                const DecodePolicy& policy, const TemplateSet& templates,
                                int shots, std::span<const McqSample> pool) {
  return cot_pipeline_answer(model, sample, CotStrategy::Residual,
                             SegmentOrder::CotThenQuestion, policy, templates, shots, pool);
}

std::span<const DatasetPreset> dataset_presets() {
  static constexpr DatasetPreset kPresets[] = {
      {"winogrande", 4, 80.0}, {"csqa", 10, 135.0}, {"hellaswag", 3, 80.0},
      {"siqa", 10, 160.0},     {"piqa", 4, 120.0},
  };
  return kPresets;
}

}  // namespace cotlab
