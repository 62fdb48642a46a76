#pragma once

#include <string>
#include <vector>

#include "cotlab/model.hpp"

namespace cotlab {

/**
 * Integrated-gradient attribution over attention and the information-flow
 * scores built on it.
 *
 * The per-head attribution is gradient-times-input along the scaling path of
 * the attention tensors: A ⊙ (1/m) Σ_{k=1..m} dF((k/m)·A)/dA. Per layer, the
 * head scores are absolute-summed. Information flow between two token regions
 * is the attribution summed over all (source, target) pairs, divided by the
 * number of CoT steps.
 */

/// Token-region layout of one prompt: question context, the option list, the
/// chain-of-thought, and the last token before the answer is read out.
struct SpanMap {
  TokenRange context;
  TokenRange options;
  TokenRange cot;
  int last = -1;
  int cot_steps = 1;

  void validate(int seq_len) const;
  TokenRange range_of(Region r) const;

  /// CoT step count under the segmentation rule: one step per period token
  /// inside the CoT span, minimum 1.
  static int count_steps(const TokenSeq& tokens, TokenRange cot);
};

struct AttributionProfile {
  std::vector<Matrix> layer_sum;  // [L] T×T, Σ_h |per_head|
  AttnTensors per_head;           // [L][H] T×T
  int m_steps = 0;
  LossKind loss_kind = LossKind::NextTokenOverSpan;

  int n_layers() const { return static_cast<int>(layer_sum.size()); }
  int seq_len() const { return layer_sum.empty() ? 0 : layer_sum[0].rows; }
};

/// Per-layer information-flow score Q^(l).
using FlowVector = std::vector<double>;

AttributionProfile integrated_attribution(const TracedModel& model, const TokenSeq& tokens,
                                          const LossSpec& loss, int m = 20);

/// Flow between explicit token ranges; `n_steps` is the CoT step count the
/// sum is divided by.
FlowVector info_flow_range(const AttributionProfile& profile, TokenRange source,
                           TokenRange target, int n_steps);

FlowVector info_flow(const AttributionProfile& profile, const SpanMap& spans,
                     Region source, Region target);

/// Entrywise Q_new − Q_orig.
FlowVector flow_divergence(const FlowVector& flow_new, const FlowVector& flow_orig);

/// Per (layer, head) attention-mass divergence between a correct-rationale
/// trace and a drifting one, each normalized by its own CoT length. L×H.
Matrix attention_divergence(const ForwardTrace& trace_correct, const SpanMap& spans_correct,
                            const ForwardTrace& trace_drift, const SpanMap& spans_drift);

/// Argmax layer; ties break toward the shallowest layer.
int peak_layer(const FlowVector& flow);

/// Mean of per-sample flow vectors (unweighted).
FlowVector mean_flow(const std::vector<FlowVector>& flows);

// --- export ------------------------------------------------------------
// Canonical CSV: header "layer,head,score"; head = -1 for head-summed rows.

std::string flow_to_csv(const FlowVector& flow);
std::string layer_head_grid_to_csv(const Matrix& grid);

/// Per-layer attribution totals: sum of the head-summed matrix (and of each
/// head's absolute scores) over all entries. The scalar profile summary used
/// for convergence checks and export.
FlowVector profile_layer_totals(const AttributionProfile& profile);
std::string profile_to_csv(const AttributionProfile& profile);

}  // namespace cotlab
