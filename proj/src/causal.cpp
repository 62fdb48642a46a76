#include "cotlab/causal.hpp"

#include <omp.h>

#include "cotlab/io.hpp"
#include "cotlab/kernels.hpp"
#include "cotlab/rng.hpp"

namespace cotlab {

PredictionProbe probe_direct_effect(const TracedModel& model, const TokenSeq& tokens,
                                    const InterventionSpec& spec, TokenId answer_token) {
  PredictionProbe probe;
  probe.answer_token = answer_token;
  probe.clean_prob = model.forward(tokens).final_prob(answer_token);
  if (probe.clean_prob < kDegenerateProbFloor)
    fail(ErrorCode::DegenerateBaseProb, "clean answer probability under 1e-9");
  probe.corrupted_prob =
      model.forward_with_intervention(tokens, spec).final_prob(answer_token);
  return probe;
}

double direct_effect(const TracedModel& model, const TokenSeq& tokens, const SpanMap& spans,
                     const InterventionSpec& spec, TokenId answer_token) {
  spans.validate(static_cast<int>(tokens.size()));
  return probe_direct_effect(model, tokens, spec, answer_token).direct_effect();
}

DirectEffectGrid ade_sweep(const TracedModel& model, std::span<const AdeSample> samples,
                           const std::vector<Region>& regions,
                           const std::vector<Component>& components,
                           const std::vector<int>& layers, double epsilon,
                           std::uint64_t seed, std::vector<SweepLogEntry>* log) {
  if (samples.empty()) fail(ErrorCode::EmptyCorpus, "ade_sweep needs samples");
  if (regions.empty() || components.empty() || layers.empty())
    fail(ErrorCode::BadConfig, "ade_sweep needs regions, components and layers");

  DirectEffectGrid grid;
  grid.regions = regions;
  grid.components = components;
  grid.layers = layers;
  grid.epsilon = epsilon;
  grid.seed = seed;
  grid.cells.assign(regions.size() * components.size() * layers.size(), {});

  const int n_samples = static_cast<int>(samples.size());
  const int cells_per_sample =
      static_cast<int>(regions.size() * components.size() * layers.size());

  // Per-sample entries land in preallocated slots; the cell means are then
  // accumulated serially in sample order, so any worker count produces the
  // same grid bit for bit.
  std::vector<std::vector<SweepLogEntry>> per_sample(n_samples);

#pragma omp parallel for schedule(dynamic) num_threads(kernels::workers())
  for (int s = 0; s < n_samples; ++s) {
    const AdeSample& sample = samples[s];
    sample.spans.validate(static_cast<int>(sample.tokens.size()));
    std::vector<SweepLogEntry>& entries = per_sample[s];
    entries.reserve(cells_per_sample);

    const double clean_prob = model.forward(sample.tokens).final_prob(sample.answer_token);
    const bool degenerate = clean_prob < kDegenerateProbFloor;

    for (std::size_t r = 0; r < regions.size(); ++r)
      for (std::size_t c = 0; c < components.size(); ++c)
        for (std::size_t l = 0; l < layers.size(); ++l) {
          SweepLogEntry entry;
          entry.sample_id = sample.id;
          entry.region = regions[r];
          entry.component = components[c];
          entry.layer = layers[l];
          entry.degenerate = degenerate;
          entry.clean_prob = clean_prob;
          if (!degenerate) {
            InterventionSpec spec;
            spec.component = components[c];
            spec.layers = {layers[l]};
            spec.span = sample.spans.range_of(regions[r]);
            spec.noise_std = epsilon;
            spec.noise_seed = mix_seed({seed, fnv1a64(sample.id), r, c,
                                        static_cast<std::uint64_t>(layers[l])});
            entry.corrupted_prob =
                model.forward_with_intervention(sample.tokens, spec)
                    .final_prob(sample.answer_token);
            entry.de = (clean_prob - entry.corrupted_prob) / clean_prob;
          }
          entries.push_back(entry);
        }
  }

  // Entries were pushed in the same region-major order the cells use.
  // Incremental mean in fixed sample order: repeating one sample any number
  // of times reproduces its effect exactly.
  for (int s = 0; s < n_samples; ++s) {
    for (std::size_t idx = 0; idx < per_sample[s].size(); ++idx) {
      const SweepLogEntry& entry = per_sample[s][idx];
      if (!entry.degenerate) {
        auto& cell = grid.cells[idx];
        cell.n_samples += 1;
        cell.ade += (entry.de - cell.ade) / static_cast<double>(cell.n_samples);
      }
      if (log) log->push_back(entry);
    }
  }
  return grid;
}

double noise_for_dataset(const TracedModel& model, std::span<const TokenSeq> corpus) {
  return 3.0 * embedding_std(model, corpus);
}

std::string grid_to_csv(const DirectEffectGrid& grid) {
  std::string out = "region,component,layer,ade,n_samples\n";
  for (std::size_t r = 0; r < grid.regions.size(); ++r)
    for (std::size_t c = 0; c < grid.components.size(); ++c)
      for (std::size_t l = 0; l < grid.layers.size(); ++l) {
        const auto& cell = grid.cell(static_cast<int>(r), static_cast<int>(c),
                                     static_cast<int>(l));
        out += std::string(to_string(grid.regions[r])) + "," +
               to_string(grid.components[c]) + "," + std::to_string(grid.layers[l]) + ",";
        out += cell.present() ? fmt_double(cell.ade) : std::string();  // absent: empty
        out += "," + std::to_string(cell.n_samples) + "\n";
      }
  return out;
}

std::string sweep_log_to_csv(std::span<const SweepLogEntry> log) {
  std::string out = "sample_id,region,component,layer,degenerate,de,clean_prob,corrupted_prob\n";
  for (const SweepLogEntry& e : log) {
    out += e.sample_id + "," + to_string(e.region) + "," + to_string(e.component) + "," +
           std::to_string(e.layer) + "," + (e.degenerate ? "1" : "0") + ",";
    out += e.degenerate ? std::string() : fmt_double(e.de);
    out += "," + fmt_double(e.clean_prob) + ",";
    out += e.degenerate ? std::string() : fmt_double(e.corrupted_prob);
    out += "\n";
  }
  return out;
}

}  // namespace cotlab
