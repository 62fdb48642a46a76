#include "cotlab/attribution.hpp"

#include <cmath>

#include "cotlab/io.hpp"
#include "cotlab/tokenizer.hpp"

namespace cotlab {

void SpanMap::validate(int seq_len) const {
  if (context.empty() || options.empty() || cot.empty())
    fail(ErrorCode::EmptyRegion, "span map regions must be nonempty");
  if (context.begin < 0)
    fail(ErrorCode::SpanOutOfRange, "span map outside sequence");
  if (!(context.end <= options.begin && options.end <= cot.begin))
    fail(ErrorCode::SpanOutOfRange,
         "span map regions must be ordered context < options < cot < last");
  // last = -1 marks a rationale-stage map: the sequence ends with the CoT and
  // there is no pre-answer token yet.
  if (last >= 0) {
    if (cot.end > last || last >= seq_len)
      fail(ErrorCode::SpanOutOfRange, "last token must follow the CoT inside the sequence");
  } else if (cot.end > seq_len) {
    fail(ErrorCode::SpanOutOfRange, "cot span outside sequence");
  }
  if (cot_steps < 1) fail(ErrorCode::BadConfig, "cot_steps must be >= 1");
}

TokenRange SpanMap::range_of(Region r) const {
  switch (r) {
    case Region::Context: return context;
    case Region::Option: return options;
    case Region::Cot: return cot;
    case Region::Last:
      if (last < 0) fail(ErrorCode::EmptyRegion, "span map has no last token");
      return {last, last + 1};
  }
  return {};
}

int SpanMap::count_steps(const TokenSeq& tokens, TokenRange cot) {
  int steps = 0;
  for (int i = cot.begin; i < cot.end; ++i)
    if (tokens[i] == tok::kPeriod) ++steps;
  return steps < 1 ? 1 : steps;
}

AttributionProfile integrated_attribution(const TracedModel& model, const TokenSeq& tokens,
                                          const LossSpec& loss, int m) {
  if (m < 1) fail(ErrorCode::BadConfig, "approximation steps m must be >= 1");
  const ModelConfig& cfg = model.config();
  const AttnTensors clean = model.capture_attention(tokens);
  const int T = static_cast<int>(tokens.size());

  AttnTensors accum(cfg.n_layers, std::vector<Matrix>(cfg.n_heads, Matrix(T, T)));
  for (int k = 1; k <= m; ++k) {
    const double scale = static_cast<double>(k) / static_cast<double>(m);
    AttnTensors grad = model.injected_grad(tokens, loss, scale_attention(clean, scale));
    for (int l = 0; l < cfg.n_layers; ++l)
      for (int h = 0; h < cfg.n_heads; ++h)
        for (std::size_t t = 0; t < grad[l][h].size(); ++t)
          accum[l][h].v[t] += grad[l][h].v[t];
  }

  AttributionProfile profile;
  profile.m_steps = m;
  profile.loss_kind = loss.kind;
  profile.per_head = std::move(accum);
  profile.layer_sum.assign(cfg.n_layers, Matrix(T, T));
  const double inv_m = 1.0 / static_cast<double>(m);
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) {
      Matrix& head = profile.per_head[l][h];
      for (std::size_t t = 0; t < head.size(); ++t) {
        head.v[t] = clean[l][h].v[t] * head.v[t] * inv_m;
        profile.layer_sum[l].v[t] += std::abs(head.v[t]);
      }
    }
  }
  return profile;
}

FlowVector info_flow_range(const AttributionProfile& profile, TokenRange source,
                           TokenRange target, int n_steps) {
  if (source.empty() || target.empty())
    fail(ErrorCode::EmptyRegion, "info_flow over an empty region");
  if (source.end > target.begin)
    fail(ErrorCode::SpanOutOfRange, "info_flow source must precede target");
  if (target.end > profile.seq_len())
    fail(ErrorCode::SpanOutOfRange, "info_flow region outside profile");
  if (n_steps < 1) fail(ErrorCode::BadConfig, "n_steps must be >= 1");

  FlowVector flow(profile.n_layers(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(n_steps);
  for (int l = 0; l < profile.n_layers(); ++l) {
    double total = 0.0;
    // Flow from source token i to target token j lives at row j (the
    // attending later token), column i: the only direction the causal mask
    // permits.
    for (int i = source.begin; i < source.end; ++i)
      for (int j = target.begin; j < target.end; ++j)
        total += profile.layer_sum[l].at(j, i);
    flow[l] = total * inv_n;
  }
  return flow;
}

FlowVector info_flow(const AttributionProfile& profile, const SpanMap& spans,
                     Region source, Region target) {
  spans.validate(profile.seq_len());
  return info_flow_range(profile, spans.range_of(source), spans.range_of(target),
                         spans.cot_steps);
}

FlowVector flow_divergence(const FlowVector& flow_new, const FlowVector& flow_orig) {
  if (flow_new.size() != flow_orig.size())
    fail(ErrorCode::LengthMismatch, "flow vectors of different length");
  FlowVector out(flow_new.size());
  for (std::size_t l = 0; l < out.size(); ++l) out[l] = flow_new[l] - flow_orig[l];
  return out;
}

Matrix attention_divergence(const ForwardTrace& trace_correct, const SpanMap& spans_correct,
                            const ForwardTrace& trace_drift, const SpanMap& spans_drift) {
  const int L = static_cast<int>(trace_correct.attention.size());
  if (L == 0 || trace_drift.attention.size() != trace_correct.attention.size() ||
      trace_correct.attention[0].size() != trace_drift.attention[0].size())
    fail(ErrorCode::LengthMismatch, "traces come from different model shapes");
  spans_correct.validate(trace_correct.attention[0][0].rows);
  spans_drift.validate(trace_drift.attention[0][0].rows);

  const int H = static_cast<int>(trace_correct.attention[0].size());
  Matrix grid(L, H);
  auto region_mass = [](const ForwardTrace& trace, const SpanMap& spans, int l, int h) {
    const Matrix& attn = trace.attention[l][h];
    double total = 0.0;
    for (int i = spans.context.begin; i < spans.context.end; ++i)
      for (int j = spans.cot.begin; j < spans.cot.end; ++j)
        total += attn.at(j, i);  // CoT token j attending to context token i
    return total / static_cast<double>(spans.cot.size());
  };
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h)
      grid.at(l, h) = region_mass(trace_correct, spans_correct, l, h) -
                      region_mass(trace_drift, spans_drift, l, h);
  return grid;
}

int peak_layer(const FlowVector& flow) {
  if (flow.empty()) fail(ErrorCode::EmptySpan, "peak_layer of an empty flow");
  int best = 0;
  for (int l = 1; l < static_cast<int>(flow.size()); ++l)
    if (flow[l] > flow[best]) best = l;  // strict: ties keep the shallowest
  return best;
}

FlowVector mean_flow(const std::vector<FlowVector>& flows) {
  if (flows.empty()) fail(ErrorCode::EmptyCorpus, "mean of no flow vectors");
  FlowVector out(flows[0].size(), 0.0);
  for (const FlowVector& f : flows) {
    if (f.size() != out.size())
      fail(ErrorCode::LengthMismatch, "flow vectors of different length");
    for (std::size_t l = 0; l < f.size(); ++l) out[l] += f[l];
  }
  for (double& x : out) x /= static_cast<double>(flows.size());
  return out;
}

std::string flow_to_csv(const FlowVector& flow) {
  std::string out = "layer,head,score\n";
  for (std::size_t l = 0; l < flow.size(); ++l)
    out += std::to_string(l) + ",-1," + fmt_double(flow[l]) + "\n";
  return out;
}

std::string layer_head_grid_to_csv(const Matrix& grid) {
  std::string out = "layer,head,score\n";
  for (int l = 0; l < grid.rows; ++l)
    for (int h = 0; h < grid.cols; ++h)
      out += std::to_string(l) + "," + std::to_string(h) + "," + fmt_double(grid.at(l, h)) + "\n";
  return out;
}

FlowVector profile_layer_totals(const AttributionProfile& profile) {
  FlowVector totals(profile.n_layers(), 0.0);
  for (int l = 0; l < profile.n_layers(); ++l) {
    double t = 0.0;
    for (double x : profile.layer_sum[l].v) t += x;
    totals[l] = t;
  }
  return totals;
}

std::string profile_to_csv(const AttributionProfile& profile) {
  std::string out = "layer,head,score\n";
  const int H = profile.per_head.empty() ? 0 : static_cast<int>(profile.per_head[0].size());
  for (int l = 0; l < profile.n_layers(); ++l) {
    double layer_total = 0.0;
    for (double x : profile.layer_sum[l].v) layer_total += x;
    out += std::to_string(l) + ",-1," + fmt_double(layer_total) + "\n";
    for (int h = 0; h < H; ++h) {
      double head_total = 0.0;
      for (double x : profile.per_head[l][h].v) head_total += std::abs(x);
      out += std::to_string(l) + "," + std::to_string(h) + "," + fmt_double(head_total) + "\n";
    }
  }
  return out;
}

}  // namespace cotlab
