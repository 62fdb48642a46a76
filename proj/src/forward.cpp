#include <algorithm>
#include <cmath>

#include "cotlab/kernels.hpp"
#include "cotlab/rng.hpp"
#include "forward_internal.hpp"

namespace cotlab::detail {

namespace {

constexpr double kLnEps = 1e-5;

void add_rows(Matrix& dst, const Matrix& a, const Matrix& b) {
  for (std::size_t t = 0; t < dst.size(); ++t) dst.v[t] = a.v[t] + b.v[t];
}

void apply_rotary(Matrix& qk, int n_heads, int head_dim) {
  const int half = head_dim / 2;
  for (int i = 0; i < qk.rows; ++i) {
    double* row = qk.row(i);
    for (int h = 0; h < n_heads; ++h) {
      double* hr = row + h * head_dim;
      for (int t = 0; t < half; ++t) {
        const double theta = i * std::pow(10000.0, -2.0 * t / head_dim);
        const double c = std::cos(theta), s = std::sin(theta);
        const double a = hr[2 * t], b = hr[2 * t + 1];
        hr[2 * t] = a * c - b * s;
        hr[2 * t + 1] = a * s + b * c;
      }
    }
  }
}

/// Adds seeded Gaussian noise to rows [span) of `x`. The stream is shared
/// across all corruption sites of one pass, drawn in block/position/coord order.
void corrupt_rows(Matrix& x, const TokenRange& span, double stddev, Rng& rng) {
  for (int i = span.begin; i < span.end; ++i) {
    double* row = x.row(i);
    for (int t = 0; t < x.cols; ++t) row[t] += rng.gaussian(stddev);
  }
}

bool layer_selected(const InterventionSpec& spec, int layer) {
  return std::find(spec.layers.begin(), spec.layers.end(), layer) != spec.layers.end();
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)); }

double gelu_grad(double x) {
  const double phi_cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
  const double phi_pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
  return phi_cdf + x * phi_pdf;
}

double logsumexp(const double* row, int n) {
  double mx = row[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double z = 0.0;
  for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
  return mx + std::log(z);
}

void validate_intervention(const InterventionSpec& spec, int T, int n_layers) {
  if (spec.noise_std < 0.0) fail(ErrorCode::BadConfig, "noise_std must be >= 0");
  if (spec.span.begin < 0 || spec.span.end > T || spec.span.begin > spec.span.end)
    fail(ErrorCode::SpanOutOfRange, "intervention span outside sequence");
  for (int l : spec.layers)
    if (l < 0 || l >= n_layers)
      fail(ErrorCode::LayerOutOfRange, "intervention layer outside [0, L)");
}

void validate_loss_spec(const LossSpec& spec, int T, int vocab) {
  if (spec.kind == LossKind::NextTokenOverSpan) {
    if (spec.target_span.empty()) fail(ErrorCode::EmptySpan, "empty loss target span");
    if (spec.target_span.begin < 1 || spec.target_span.end > T)
      fail(ErrorCode::SpanOutOfRange,
           "next-token span must lie in [1, T): each position needs a predecessor");
  } else {
    if (spec.label_token < 0 || spec.label_token >= vocab)
      fail(ErrorCode::TokenOutOfVocab, "label token outside vocabulary");
  }
}

double loss_from_logits(const Matrix& logits, const TokenSeq& tokens,
                        const LossSpec& spec) {
  validate_loss_spec(spec, logits.rows, logits.cols);
  if (spec.kind == LossKind::AnswerLabel) {
    const double* row = logits.row(logits.rows - 1);
    return logsumexp(row, logits.cols) - row[spec.label_token];
  }
  double total = 0.0;
  for (int p = spec.target_span.begin; p < spec.target_span.end; ++p) {
    const double* row = logits.row(p - 1);
    total += logsumexp(row, logits.cols) - row[tokens[p]];
  }
  return total / spec.target_span.size();
}

ForwardTrace run_forward(const ModelConfig& cfg, const Weights& w,
                         const TokenSeq& tokens, const ForwardOptions& opt) {
  const int T = static_cast<int>(tokens.size());
  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const int L = cfg.n_layers;
  const int stop = opt.stop_before_block >= 0 ? opt.stop_before_block : L;
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  if (opt.intervene) validate_intervention(*opt.intervene, T, L);

  Rng noise_rng(opt.intervene ? opt.intervene->noise_seed : 0);
  const bool noisy = opt.intervene && opt.intervene->noise_std > 0.0;

  ForwardTrace trace;
  trace.embeddings = Matrix(T, d);
  for (int i = 0; i < T; ++i) {
    const double* te = w.tok_emb.row(tokens[i]);
    double* row = trace.embeddings.row(i);
    if (cfg.positional == Positional::AbsoluteLearned) {
      const double* pe = w.pos_emb.row(i);
      for (int t = 0; t < d; ++t) row[t] = te[t] + pe[t];
    } else {
      for (int t = 0; t < d; ++t) row[t] = te[t];
    }
  }

  trace.attention.resize(stop);
  trace.hidden.resize(stop);
  trace.attn_out.resize(stop);
  trace.mlp_out.resize(stop);
  if (opt.cache) opt.cache->layers.resize(stop);

  Matrix x = trace.embeddings;
  Matrix n1(T, d), q(T, d), k(T, d), v(T, d), mix(T, d), a(T, d);
  Matrix xmid(T, d), n2(T, d), pre1(T, cfg.d_ff), act1(T, cfg.d_ff), m(T, d);

  for (int l = 0; l < stop; ++l) {
    const LayerWeights& lw = w.layers[l];
    auto* lc = opt.cache ? &opt.cache->layers[l] : nullptr;
    if (lc) {
      lc->xhat1 = Matrix(T, d);
      lc->inv_sigma1.assign(T, 0.0);
    }
    kernels::layernorm(x.data(), lw.ln1_gamma.data(), lw.ln1_beta.data(), kLnEps,
                       n1.data(), T, d, lc ? lc->xhat1.data() : nullptr,
                       lc ? lc->inv_sigma1.data() : nullptr);

    kernels::matmul_nn(n1.data(), lw.wv.data(), lw.bv.data(), v.data(), T, d, d);

    std::vector<Matrix>& attn = trace.attention[l];
    attn.assign(H, Matrix(T, T));
    if (opt.inject) {
      // Mix with the caller's tensors; the causal mask is applied at the
      // point of use, so masked entries are dead inputs.
      const std::vector<Matrix>& given = (*opt.inject)[l];
      for (int h = 0; h < H; ++h) {
        for (int i = 0; i < T; ++i) {
          const double* src = given[h].row(i);
          double* dst = attn[h].row(i);
          for (int j = 0; j <= i; ++j) dst[j] = src[j];
        }
      }
    } else {
      kernels::matmul_nn(n1.data(), lw.wq.data(), lw.bq.data(), q.data(), T, d, d);
      kernels::matmul_nn(n1.data(), lw.wk.data(), lw.bk.data(), k.data(), T, d, d);
      if (cfg.positional == Positional::Rotary) {
        apply_rotary(q, H, dh);
        apply_rotary(k, H, dh);
      }
      for (int h = 0; h < H; ++h) {
        kernels::attn_scores_causal(q.data() + h * dh, k.data() + h * dh, T, dh,
                                    d, score_scale, attn[h].data());
        kernels::softmax_causal_rows(attn[h].data(), T);
      }
    }

    for (int h = 0; h < H; ++h)
      kernels::attn_mix_causal(attn[h].data(), v.data() + h * dh,
                               mix.data() + h * dh, T, dh, d);

    kernels::matmul_nn(mix.data(), lw.wo.data(), lw.bo.data(), a.data(), T, d, d);
    if (noisy && opt.intervene->component == Component::AttnOutput &&
        layer_selected(*opt.intervene, l))
      corrupt_rows(a, opt.intervene->span, opt.intervene->noise_std, noise_rng);

    add_rows(xmid, x, a);

    if (lc) {
      lc->xhat2 = Matrix(T, d);
      lc->inv_sigma2.assign(T, 0.0);
    }
    kernels::layernorm(xmid.data(), lw.ln2_gamma.data(), lw.ln2_beta.data(), kLnEps,
                       n2.data(), T, d, lc ? lc->xhat2.data() : nullptr,
                       lc ? lc->inv_sigma2.data() : nullptr);

    kernels::matmul_nn(n2.data(), lw.w1.data(), lw.b1.data(), pre1.data(), T, d,
                       cfg.d_ff);
    for (std::size_t t = 0; t < pre1.size(); ++t) act1.v[t] = gelu(pre1.v[t]);
    kernels::matmul_nn(act1.data(), lw.w2.data(), lw.b2.data(), m.data(), T,
                       cfg.d_ff, d);
    if (noisy && opt.intervene->component == Component::MlpOutput &&
        layer_selected(*opt.intervene, l))
      corrupt_rows(m, opt.intervene->span, opt.intervene->noise_std, noise_rng);

    Matrix xout(T, d);
    add_rows(xout, xmid, m);
    if (noisy && opt.intervene->component == Component::HiddenState &&
        layer_selected(*opt.intervene, l))
      corrupt_rows(xout, opt.intervene->span, opt.intervene->noise_std, noise_rng);

    trace.attn_out[l] = a;
    trace.mlp_out[l] = m;
    trace.hidden[l] = xout;
    if (lc) {
      lc->v = v;
      lc->attn_used = attn;
      lc->pre1 = pre1;
    }
    x = std::move(xout);
  }

  if (stop < L) return trace;  // prefix only; no final head

  Matrix nf(T, d);
  if (opt.cache) {
    opt.cache->xhatf = Matrix(T, d);
    opt.cache->inv_sigmaf.assign(T, 0.0);
  }
  kernels::layernorm(x.data(), w.lnf_gamma.data(), w.lnf_beta.data(), kLnEps,
                     nf.data(), T, d, opt.cache ? opt.cache->xhatf.data() : nullptr,
                     opt.cache ? opt.cache->inv_sigmaf.data() : nullptr);
  trace.logits = Matrix(T, cfg.vocab_size);
  kernels::matmul_nn(nf.data(), w.unembed.data(), w.unembed_bias.data(),
                     trace.logits.data(), T, d, cfg.vocab_size);
  return trace;
}

}  // namespace cotlab::detail
