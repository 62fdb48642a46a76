#include <cmath>
#include <cstring>

#include "cotlab/kernels.hpp"
#include "forward_internal.hpp"

// Reverse pass for the injected forward. Only activation gradients are
// propagated; the result is dF/d(attention tensor) per (layer, head). The
// injected tensors are leaves, so nothing flows into softmax or the
// query/key path, and masked entries stay exactly zero.

namespace cotlab::detail {

namespace {

/// dx for y = gamma * xhat + beta given dy, with xhat and 1/sigma saved.
void layernorm_backward(const Matrix& dy, const Matrix& xhat, const Vec& inv_sigma,
                        const Vec& gamma, Matrix& dx_accum) {
  const int T = dy.rows, d = dy.cols;
#pragma omp parallel for schedule(static) num_threads(kernels::workers())
  for (int i = 0; i < T; ++i) {
    const double* dyr = dy.row(i);
    const double* xh = xhat.row(i);
    double* dxr = dx_accum.row(i);
    double mean1 = 0.0, mean2 = 0.0;
    for (int t = 0; t < d; ++t) {
      const double dxhat = dyr[t] * gamma[t];
      mean1 += dxhat;
      mean2 += dxhat * xh[t];
    }
    mean1 /= d;
    mean2 /= d;
    for (int t = 0; t < d; ++t) {
      const double dxhat = dyr[t] * gamma[t];
      dxr[t] += inv_sigma[i] * (dxhat - mean1 - xh[t] * mean2);
    }
  }
}

}  // namespace

AttnTensors backward_attention(const ModelConfig& cfg, const Weights& w,
                               const TokenSeq& tokens, const LossSpec& spec,
                               const ForwardCache& cache, const Matrix& logits) {
  const int T = logits.rows;
  const int V = cfg.vocab_size;
  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const int L = cfg.n_layers;

  // d(loss)/d(logits): softmax minus one-hot at each contributing position.
  Matrix dlogits(T, V);
  if (spec.kind == LossKind::AnswerLabel) {
    const double* row = logits.row(T - 1);
    const double lse = logsumexp(row, V);
    double* dr = dlogits.row(T - 1);
    for (int j = 0; j < V; ++j) dr[j] = std::exp(row[j] - lse);
    dr[spec.label_token] -= 1.0;
  } else {
    const double weight = 1.0 / spec.target_span.size();
    for (int p = spec.target_span.begin; p < spec.target_span.end; ++p) {
      const double* row = logits.row(p - 1);
      const double lse = logsumexp(row, V);
      double* dr = dlogits.row(p - 1);
      for (int j = 0; j < V; ++j) dr[j] += weight * std::exp(row[j] - lse);
      dr[tokens[p]] -= weight;
    }
  }

  Matrix dnf(T, d);
  kernels::matmul_nt(dlogits.data(), w.unembed.data(), dnf.data(), T, V, d);
  Matrix dx(T, d);
  layernorm_backward(dnf, cache.xhatf, cache.inv_sigmaf, w.lnf_gamma, dx);

  AttnTensors grads(L);
  Matrix dhidden1(T, cfg.d_ff), dpre1(T, cfg.d_ff), dn2(T, d);
  Matrix dmix(T, d), dv(T, d), dn1(T, d);

  for (int l = L - 1; l >= 0; --l) {
    const LayerWeights& lw = w.layers[l];
    const ForwardCache::LayerCache& lc = cache.layers[l];
    grads[l].assign(H, Matrix(T, T));

    // x_out = xmid + m; m = gelu(n2 w1 + b1) w2 + b2; n2 = LN2(xmid)
    kernels::matmul_nt(dx.data(), lw.w2.data(), dhidden1.data(), T, d, cfg.d_ff);
    for (std::size_t t = 0; t < dpre1.size(); ++t)
      dpre1.v[t] = dhidden1.v[t] * gelu_grad(lc.pre1.v[t]);
    kernels::matmul_nt(dpre1.data(), lw.w1.data(), dn2.data(), T, cfg.d_ff, d);
    // dx currently holds d(xmid) from the direct residual path; add LN2's part.
    layernorm_backward(dn2, lc.xhat2, lc.inv_sigma2, lw.ln2_gamma, dx);

    // xmid = x_in + a; a = mix wo + bo
    kernels::matmul_nt(dx.data(), lw.wo.data(), dmix.data(), T, d, d);

    // mix_h[i] = sum_{j<=i} attn[h][i][j] v_h[j]
    dv.fill(0.0);
    for (int h = 0; h < H; ++h) {
      Matrix& g = grads[l][h];
      const Matrix& used = lc.attn_used[h];
#pragma omp parallel for schedule(static) num_threads(kernels::workers())
      for (int i = 0; i < T; ++i) {
        const double* dmh = dmix.row(i) + h * dh;
        double* gi = g.row(i);
        for (int j = 0; j <= i; ++j) {
          const double* vj = lc.v.row(j) + h * dh;
          double acc = 0.0;
          for (int t = 0; t < dh; ++t) acc += dmh[t] * vj[t];
          gi[j] = acc;
        }
      }
#pragma omp parallel for schedule(static) num_threads(kernels::workers())
      for (int j = 0; j < T; ++j) {
        double* dvj = dv.row(j) + h * dh;
        for (int i = j; i < T; ++i) {
          const double aij = used.at(i, j);
          if (aij == 0.0) continue;
          const double* dmh = dmix.row(i) + h * dh;
          for (int t = 0; t < dh; ++t) dvj[t] += aij * dmh[t];
        }
      }
    }

    // v = n1 wv + bv; n1 = LN1(x_in)
    kernels::matmul_nt(dv.data(), lw.wv.data(), dn1.data(), T, d, d);
    layernorm_backward(dn1, lc.xhat1, lc.inv_sigma1, lw.ln1_gamma, dx);
    // dx now carries d(x_in) for the next (shallower) block: the residual
    // path contributions were accumulated in place.
  }
  return grads;
}

}  // namespace cotlab::detail
