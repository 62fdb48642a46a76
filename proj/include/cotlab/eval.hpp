#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cotlab/mitigation.hpp"

namespace cotlab {

/**
 * Benchmark harness: runs the answering methods over a dataset and reports
 * Accuracy, Toxic Rate and cost per method.
 *
 * Toxic Rate of a method f is |C_d ∩ W_f| / |W_f|: the fraction of f's wrong
 * answers that direct answering got right. It is undefined when f makes no
 * mistakes.
 *
 * All persisted timings are deterministic cost-model seconds derived from
 * counted work (token passes), so reruns are byte-identical; wall-clock time
 * is console-only.
 */

enum class Method { Direct, Cot, Rd, Sps, Riders };

const char* to_string(Method m);
Method method_from_string(std::string_view s);

/// One token through the full stack, in cost-model seconds.
inline constexpr double kSecondsPerTokenPass = 1e-4;

struct MethodOutcome {
  std::string sample_id;
  Method method = Method::Direct;
  int predicted = -1;
  int gold = -1;
  bool correct = false;
  long long tokens_consumed = 0;
  double seconds = 0.0;
  bool failed = false;   // per-sample failure; scored wrong and flagged
  std::string note;      // failure reason (not part of the CSV schema)
};

struct ToxicRateReport {
  double accuracy_direct = 0.0;
  double accuracy_method = 0.0;
  double toxic_rate = 0.0;
  bool tr_defined = false;  // false when the method made no mistakes
  int n_samples = 0;
  int correct_direct = 0;  // |C_d|
  int wrong_method = 0;    // |W_f|
  int toxic = 0;           // |C_d ∩ W_f|
};

/// Both lists must cover the same sample ids.
ToxicRateReport toxic_rate(std::span<const MethodOutcome> direct,
                           std::span<const MethodOutcome> method_f);

struct EvalConfig {
  std::vector<Method> methods;
  DecodePolicy policy;
  int shots = 1;
};

struct BenchmarkResult {
  std::vector<MethodOutcome> outcomes;  // ordered by (sample id, method)
  std::map<Method, double> accuracy;
  std::map<Method, ToxicRateReport> tr;  // per non-direct method, when direct ran
  std::string audit_jsonl;               // residual-decoding audit lines
};

BenchmarkResult run_benchmark(const TracedModel& model, std::span<const McqSample> samples,
                              const EvalConfig& config, const TemplateSet& templates);

struct CostRow {
  double mean_tokens = 0.0;
  double mean_seconds = 0.0;
  int n = 0;
};

struct CostSummary {
  std::map<Method, CostRow> rows;
  /// Residual decoding relative to the plain CoT pipeline, when both ran.
  std::optional<double> rd_seconds_ratio;
  std::optional<double> rd_tokens_ratio;
};

CostSummary cost_report(std::span<const MethodOutcome> outcomes);

/// Arithmetic mean; the cross-dataset aggregation used for summary rows.
double mean_of(std::span<const double> values);

// --- export / replay -----------------------------------------------------

std::string outcomes_to_csv(std::span<const MethodOutcome> outcomes);
std::vector<MethodOutcome> outcomes_from_csv(const std::string& csv_text);

/// Accuracy/TR report recomputed from stored outcomes (no model execution).
struct ReplayReport {
  std::map<Method, double> accuracy;
  std::map<Method, ToxicRateReport> tr;
};
ReplayReport replay_report(std::span<const MethodOutcome> outcomes);

std::string report_to_json(const std::map<Method, double>& accuracy,
                           const std::map<Method, ToxicRateReport>& tr,
                           std::span<const MethodOutcome> outcomes);

}  // namespace cotlab
