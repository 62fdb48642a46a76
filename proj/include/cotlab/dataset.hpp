#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cotlab/common.hpp"

namespace cotlab {

/// One multiple-choice sample. On disk: JSON-lines with fields
/// {id, context, options, gold} and an optional "group" tag.
struct McqSample {
  std::string id;
  std::string context;
  std::vector<std::string> options;  // 2..5 entries
  int gold_index = 0;
  std::string group = "all";

  void validate() const;
};

std::vector<McqSample> load_dataset(const std::string& path);
std::string dataset_to_jsonl(std::span<const McqSample> samples);
void write_dataset(const std::string& path, std::span<const McqSample> samples);

/// Seeded template questions over small word pools, so the whole pipeline
/// runs without any external data.
std::vector<McqSample> gen_synthetic(int count, std::uint64_t seed);

}  // namespace cotlab
