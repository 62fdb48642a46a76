#pragma once

#include "cotlab/model.hpp"

// Internals shared by forward.cpp / grad.cpp. Not installed.

namespace cotlab::detail {

/// Intermediates one injected pass saves so the backward pass can run.
struct ForwardCache {
  struct LayerCache {
    Matrix xhat1;
    Vec inv_sigma1;
    Matrix v;                      // T × d_model, head slices strided
    std::vector<Matrix> attn_used; // [H] T × T, tensors used for mixing
    Matrix xhat2;
    Vec inv_sigma2;
    Matrix pre1;                   // T × d_ff
  };
  std::vector<LayerCache> layers;
  Matrix xhatf;
  Vec inv_sigmaf;
};

struct ForwardOptions {
  const InterventionSpec* intervene = nullptr;
  const AttnTensors* inject = nullptr;  // pre-scaled attention to mix with
  ForwardCache* cache = nullptr;
  int stop_before_block = -1;  // run only blocks [0, stop); skips final head
};

ForwardTrace run_forward(const ModelConfig& cfg, const Weights& w,
                         const TokenSeq& tokens, const ForwardOptions& opt);

double loss_from_logits(const Matrix& logits, const TokenSeq& tokens,
                        const LossSpec& spec);
void validate_loss_spec(const LossSpec& spec, int T, int vocab);
void validate_intervention(const InterventionSpec& spec, int T, int n_layers);

double gelu(double x);
double gelu_grad(double x);

/// Row-wise log-sum-exp of a logits row.
double logsumexp(const double* row, int n);

AttnTensors backward_attention(const ModelConfig& cfg, const Weights& w,
                               const TokenSeq& tokens, const LossSpec& spec,
                               const ForwardCache& cache, const Matrix& logits);

}  // namespace cotlab::detail
