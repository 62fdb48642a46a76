#pragma once

#include <cmath>
#include <cstdlib>

#include "cotlab/model.hpp"
#include "cotlab/rng.hpp"

namespace testutil {

inline cotlab::ModelConfig tiny_config(int n_layers = 2, int n_heads = 2, int d_model = 16,
                                       int d_ff = 32, std::uint64_t seed = 7) {
  cotlab::ModelConfig cfg;
  cfg.n_layers = n_layers;
  cfg.n_heads = n_heads;
  cfg.d_model = d_model;
  cfg.d_ff = d_ff;
  cfg.max_seq_len = 64;
  cfg.seed = seed;
  return cfg;
}

/// Random byte-token sequence starting with BOS.
inline cotlab::TokenSeq random_tokens(cotlab::Rng& rng, int len) {
  cotlab::TokenSeq t;
  t.push_back(cotlab::tok::kBos);
  for (int i = 1; i < len; ++i) t.push_back(rng.next_below(256));
  return t;
}

inline double max_abs_diff(const cotlab::Matrix& a, const cotlab::Matrix& b) {
  double mx = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t)
    mx = std::max(mx, std::abs(a.v[t] - b.v[t]));
  return mx;
}

/// Relative error with a tiny floor so agreeing near-zeros compare equal.
inline double rel_err(double got, double want) {
  const double denom = std::max(std::abs(got), std::abs(want));
  if (denom < 1e-10) return 0.0;
  return std::abs(got - want) / denom;
}

inline std::string temp_path(const std::string& name) {
  const char* dir = std::getenv("TMPDIR");
  return std::string(dir ? dir : "/tmp") + "/" + name;
}

}  // namespace testutil
