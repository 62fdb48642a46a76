#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cotlab/attribution.hpp"
#include "cotlab/model.hpp"

namespace cotlab {

/**
 * Causal tracing: corrupt one residual-stream component over one token region
 * with seeded Gaussian noise and measure how much the answer probability
 * drops. The direct effect of a corruption z is (P(o) - P*_z(o)) / P(o);
 * sweeping (region × component × layer) over a sample set and averaging the
 * per-sample effects gives the ADE grid.
 */

/// Floor on the clean answer probability; below it the ratio is meaningless
/// and the sample is skipped (and reported), never divided.
inline constexpr double kDegenerateProbFloor = 1e-9;

/// The two probabilities one intervention compares.
struct PredictionProbe {
  TokenId answer_token = -1;
  double clean_prob = 0.0;
  double corrupted_prob = 0.0;

  double direct_effect() const { return (clean_prob - corrupted_prob) / clean_prob; }
};

/// Runs clean + corrupted passes and returns both probabilities.
/// Throws Error(DegenerateBaseProb) when the clean probability is under the floor.
PredictionProbe probe_direct_effect(const TracedModel& model, const TokenSeq& tokens,
                                    const InterventionSpec& spec, TokenId answer_token);

double direct_effect(const TracedModel& model, const TokenSeq& tokens, const SpanMap& spans,
                     const InterventionSpec& spec, TokenId answer_token);

struct AdeSample {
  std::string id;
  TokenSeq tokens;
  SpanMap spans;
  TokenId answer_token = -1;
};

struct SweepLogEntry {
  std::string sample_id;
  Region region;
  Component component;
  int layer = 0;
  bool degenerate = false;
  double de = 0.0;
  double clean_prob = 0.0;
  double corrupted_prob = 0.0;
};

struct DirectEffectGrid {
  struct Cell {
    double ade = 0.0;
    int n_samples = 0;
    bool present() const { return n_samples > 0; }
  };

  std::vector<Region> regions;
  std::vector<Component> components;
  std::vector<int> layers;
  std::vector<Cell> cells;  // indexed [region][component][layer]
  double epsilon = 0.0;
  std::uint64_t seed = 0;

  Cell& cell(int r, int c, int l) {
    return cells[(static_cast<std::size_t>(r) * components.size() + c) * layers.size() + l];
  }
  const Cell& cell(int r, int c, int l) const {
    return cells[(static_cast<std::size_t>(r) * components.size() + c) * layers.size() + l];
  }
};

/// Per cell, the mean direct effect over non-degenerate samples. Noise is
/// re-seeded per (sample, region, component, layer) from `seed`, so the grid
/// is a pure function of (weights, samples, seed).
DirectEffectGrid ade_sweep(const TracedModel& model, std::span<const AdeSample> samples,
                           const std::vector<Region>& regions,
                           const std::vector<Component>& components,
                           const std::vector<int>& layers, double epsilon,
                           std::uint64_t seed,
                           std::vector<SweepLogEntry>* log = nullptr);

/// 3x the empirical embedding standard deviation over the corpus.
double noise_for_dataset(const TracedModel& model, std::span<const TokenSeq> corpus);

std::string grid_to_csv(const DirectEffectGrid& grid);
std::string sweep_log_to_csv(std::span<const SweepLogEntry> log);

}  // namespace cotlab
