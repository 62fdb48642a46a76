#pragma once

#include "cotlab/matrix.hpp"

namespace cotlab::kernels {

// Inner-loop kernels for the transformer. Every kernel exists twice: a serial
// reference under kernels::serial and an OpenMP version under kernels::par
// that parallelizes over output rows only. Each output row is produced by a
// single thread with the same inner-loop order as the reference, so the two
// variants agree bitwise and any worker count yields identical results.
//
// Strided (ptr, row_stride) views let the attention kernels address per-head
// column slices of T-by-d_model buffers.

namespace serial {

/// y[M×N] = x[M×K] · w[K×N] (+ bias broadcast per row when non-null).
void matmul_nn(const double* x, const double* w, const double* bias, double* y,
               int M, int K, int N);

/// y[M×K] = x[M×N] · wᵀ where w is K×N.
void matmul_nt(const double* x, const double* w, double* y, int M, int N, int K);

/// scores[i][j] = scale · dot(q_i, k_j) for j ≤ i. Entries j > i are not touched.
void attn_scores_causal(const double* q, const double* k, int T, int dh,
                        int stride, double scale, double* scores);

/// In-place causal softmax: row i normalized over j ≤ i, j > i set to exactly 0.
void softmax_causal_rows(double* scores, int T);

/// out_i = Σ_{j≤i} p[i][j] · v_j over a strided head slice.
void attn_mix_causal(const double* p, const double* v, double* out, int T,
                     int dh, int stride);

/// Per-row layernorm. When save_xhat/save_inv_sigma are non-null the
/// normalized rows and 1/σ are recorded for the backward pass.
void layernorm(const double* x, const double* gamma, const double* beta,
               double eps, double* y, int T, int d, double* save_xhat,
               double* save_inv_sigma);

}  // namespace serial

namespace par {

void matmul_nn(const double* x, const double* w, const double* bias, double* y,
               int M, int K, int N);
void matmul_nt(const double* x, const double* w, double* y, int M, int N, int K);
void attn_scores_causal(const double* q, const double* k, int T, int dh,
                        int stride, double scale, double* scores);
void softmax_causal_rows(double* scores, int T);
void attn_mix_causal(const double* p, const double* v, double* out, int T,
                     int dh, int stride);
void layernorm(const double* x, const double* gamma, const double* beta,
               double eps, double* y, int T, int d, double* save_xhat,
               double* save_inv_sigma);

}  // namespace par

/// Global worker count. 1 routes every dispatch to the serial reference;
/// anything higher enables the OpenMP kernels with that many threads.
void set_workers(int n);
int workers();

// Dispatchers used by the model code.
void matmul_nn(const double* x, const double* w, const double* bias, double* y,
               int M, int K, int N);
void matmul_nt(const double* x, const double* w, double* y, int M, int N, int K);
void attn_scores_causal(const double* q, const double* k, int T, int dh,
                        int stride, double scale, double* scores);
void softmax_causal_rows(double* scores, int T);
void attn_mix_causal(const double* p, const double* v, double* out, int T,
                     int dh, int stride);
void layernorm(const double* x, const double* gamma, const double* beta,
               double eps, double* y, int T, int d, double* save_xhat = nullptr,
               double* save_inv_sigma = nullptr);

}  // namespace cotlab::kernels
