#include "cotlab/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cotlab::kernels {

namespace {

inline void matmul_nn_row(const double* x, const double* w, const double* bias,
                          double* yrow, int i, int K, int N) {
  const double* xrow = x + static_cast<std::size_t>(i) * K;
  if (bias) {
    std::memcpy(yrow, bias, sizeof(double) * N);
  } else {
    std::memset(yrow, 0, sizeof(double) * N);
  }
  for (int k = 0; k < K; ++k) {
    const double xv = xrow[k];
    const double* wrow = w + static_cast<std::size_t>(k) * N;
    for (int j = 0; j < N; ++j) yrow[j] += xv * wrow[j];
  }
}

inline void matmul_nt_row(const double* x, const double* w, double* yrow, int i,
                          int N, int K) {
  const double* xrow = x + static_cast<std::size_t>(i) * N;
  for (int j = 0; j < K; ++j) {
    const double* wrow = w + static_cast<std::size_t>(j) * N;
    double acc = 0.0;
    for (int t = 0; t < N; ++t) acc += xrow[t] * wrow[t];
    yrow[j] = acc;
  }
}

inline void attn_scores_row(const double* q, const double* k, int i, int dh,
                            int stride, double scale, double* srow) {
  const double* qi = q + static_cast<std::size_t>(i) * stride;
  for (int j = 0; j <= i; ++j) {
    const double* kj = k + static_cast<std::size_t>(j) * stride;
    double acc = 0.0;
    for (int t = 0; t < dh; ++t) acc += qi[t] * kj[t];
    srow[j] = scale * acc;
  }
}

inline void softmax_causal_row(double* row, int i, int T) {
  double mx = row[0];
  for (int j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
  double z = 0.0;
  for (int j = 0; j <= i; ++j) {
    row[j] = std::exp(row[j] - mx);
    z += row[j];
  }
  const double inv = 1.0 / z;
  for (int j = 0; j <= i; ++j) row[j] *= inv;
  for (int j = i + 1; j < T; ++j) row[j] = 0.0;
}

inline void attn_mix_row(const double* p, const double* v, double* out, int i,
                         int T, int dh, int stride) {
  double* oi = out + static_cast<std::size_t>(i) * stride;
  std::memset(oi, 0, sizeof(double) * dh);
  const double* prow = p + static_cast<std::size_t>(i) * T;
  for (int j = 0; j <= i; ++j) {
    const double pij = prow[j];
    const double* vj = v + static_cast<std::size_t>(j) * stride;
    for (int t = 0; t < dh; ++t) oi[t] += pij * vj[t];
  }
}

inline void layernorm_row(const double* x, const double* gamma,
                          const double* beta, double eps, double* y, int i,
                          int d, double* save_xhat, double* save_inv_sigma) {
  const double* xi = x + static_cast<std::size_t>(i) * d;
  double* yi = y + static_cast<std::size_t>(i) * d;
  double mean = 0.0;
  for (int t = 0; t < d; ++t) mean += xi[t];
  mean /= d;
  double var = 0.0;
  for (int t = 0; t < d; ++t) {
    const double c = xi[t] - mean;
    var += c * c;
  }
  var /= d;
  const double inv_sigma = 1.0 / std::sqrt(var + eps);
  double* xh = save_xhat ? save_xhat + static_cast<std::size_t>(i) * d : nullptr;
  for (int t = 0; t < d; ++t) {
    const double xhat = (xi[t] - mean) * inv_sigma;
    if (xh) xh[t] = xhat;
    yi[t] = gamma[t] * xhat + beta[t];
  }
  if (save_inv_sigma) save_inv_sigma[i] = inv_sigma;
}

int g_workers = 1;

}  // namespace

namespace serial {

void matmul_nn(const double* x, const double* w, const double* bias, double* y,
               int M, int K, int N) {
  for (int i = 0; i < M; ++i)
    matmul_nn_row(x, w, bias, y + static_cast<std::size_t>(i) * N, i, K, N);
}

void matmul_nt(const double* x, const double* w, double* y, int M, int N, int K) {
  for (int i = 0; i < M; ++i)
    matmul_nt_row(x, w, y + static_cast<std::size_t>(i) * K, i, N, K);
}

void attn_scores_causal(const double* q, const double* k, int T, int dh,
                        int stride, double scale, double* scores) {
  for (int i = 0; i < T; ++i)
    attn_scores_row(q, k, i, dh, stride, scale, scores + static_cast<std::size_t>(i) * T);
}

void softmax_causal_rows(double* scores, int T) {
  for (int i = 0; i < T; ++i)
    softmax_causal_row(scores + static_cast<std::size_t>(i) * T, i, T);
}

void attn_mix_causal(const double* p, const double* v, double* out, int T,
                     int dh, int stride) {
  for (int i = 0; i < T; ++i) attn_mix_row(p, v, out, i, T, dh, stride);
}

void layernorm(const double* x, const double* gamma, const double* beta,
               double eps, double* y, int T, int d, double* save_xhat,
               double* save_inv_sigma) {
  for (int i = 0; i < T; ++i)
    layernorm_row(x, gamma, beta, eps, y, i, d, save_xhat, save_inv_sigma);
}

}  // namespace serial

namespace par {

void matmul_nn(const double* x, const double* w, const double* bias, double* y,
               int M, int K, int N) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i)
    matmul_nn_row(x, w, bias, y + static_cast<std::size_t>(i) * N, i, K, N);
}

void matmul_nt(const double* x, const double* w, double* y, int M, int N, int K) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i)
    matmul_nt_row(x, w, y + static_cast<std::size_t>(i) * K, i, N, K);
}

void attn_scores_causal(const double* q, const double* k, int T, int dh,
                        int stride, double scale, double* scores) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < T; ++i)
    attn_scores_row(q, k, i, dh, stride, scale, scores + static_cast<std::size_t>(i) * T);
}

void softmax_causal_rows(double* scores, int T) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < T; ++i)
    softmax_causal_row(scores + static_cast<std::size_t>(i) * T, i, T);
}

void attn_mix_causal(const double* p, const double* v, double* out, int T,
                     int dh, int stride) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < T; ++i) attn_mix_row(p, v, out, i, T, dh, stride);
}

void layernorm(const double* x, const double* gamma, const double* beta,
               double eps, double* y, int T, int d, double* save_xhat,
               double* save_inv_sigma) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < T; ++i)
    layernorm_row(x, gamma, beta, eps, y, i, d, save_xhat, save_inv_sigma);
}

}  // namespace par

void set_workers(int n) {
  g_workers = n < 1 ? 1 : n;
  omp_set_num_threads(g_workers);
}

int workers() { return g_workers; }

void matmul_nn(const double* x, const double* w, const double* bias, double* y,
               int M, int K, int N) {
  if (g_workers > 1)
    par::matmul_nn(x, w, bias, y, M, K, N);
  else
    serial::matmul_nn(x, w, bias, y, M, K, N);
}

void matmul_nt(const double* x, const double* w, double* y, int M, int N, int K) {
  if (g_workers > 1)
    par::matmul_nt(x, w, y, M, N, K);
  else
    serial::matmul_nt(x, w, y, M, N, K);
}

void attn_scores_causal(const double* q, const double* k, int T, int dh,
                        int stride, double scale, double* scores) {
  if (g_workers > 1)
    par::attn_scores_causal(q, k, T, dh, stride, scale, scores);
  else
    serial::attn_scores_causal(q, k, T, dh, stride, scale, scores);
}

void softmax_causal_rows(double* scores, int T) {
  if (g_workers > 1)
    par::softmax_causal_rows(scores, T);
  else
    serial::softmax_causal_rows(scores, T);
}

void attn_mix_causal(const double* p, const double* v, double* out, int T,
                     int dh, int stride) {
  if (g_workers > 1)
    par::attn_mix_causal(p, v, out, T, dh, stride);
  else
    serial::attn_mix_causal(p, v, out, T, dh, stride);
}

void layernorm(const double* x, const double* gamma, const double* beta,
               double eps, double* y, int T, int d, double* save_xhat,
               double* save_inv_sigma) {
  if (g_workers > 1)
    par::layernorm(x, gamma, beta, eps, y, T, d, save_xhat, save_inv_sigma);
  else
    serial::layernorm(x, gamma, beta, eps, y, T, d, save_xhat, save_inv_sigma);
}

}  // namespace cotlab::kernels
