#include "cotlab/eval.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cotlab/io.hpp"
#include "cotlab/kernels.hpp"

namespace cotlab {

const char* to_string(Method m) {
  switch (m) {
    case Method::Direct: return "direct";
    case Method::Cot: return "cot";
    case Method::Rd: return "rd";
    case Method::Sps: return "sps";
    case Method::Riders: return "riders";
  }
  return "?";
}

Method method_from_string(std::string_view s) {
  if (s == "direct") return Method::Direct;
  if (s == "cot") return Method::Cot;
  if (s == "rd") return Method::Rd;
  if (s == "sps") return Method::Sps;
  if (s == "riders") return Method::Riders;
  fail(ErrorCode::BadConfig, "unknown method: " + std::string(s));
}

ToxicRateReport toxic_rate(std::span<const MethodOutcome> direct,
                           std::span<const MethodOutcome> method_f) {
  std::map<std::string, bool> direct_correct;
  for (const MethodOutcome& o : direct) {
    if (!direct_correct.emplace(o.sample_id, o.correct).second)
      fail(ErrorCode::DuplicateId, "duplicate sample id in direct outcomes: " + o.sample_id);
  }
  ToxicRateReport report;
  report.n_samples = static_cast<int>(direct_correct.size());
  std::set<std::string> seen;
  for (const MethodOutcome& o : method_f) {
    auto it = direct_correct.find(o.sample_id);
    if (it == direct_correct.end() || !seen.insert(o.sample_id).second)
      fail(ErrorCode::IdMismatch, "outcome lists cover different sample ids");
    if (it->second) ++report.correct_direct;
    if (o.correct) continue;
    ++report.wrong_method;
    if (it->second) ++report.toxic;  // direct right, method wrong
  }
  if (static_cast<int>(seen.size()) != report.n_samples)
    fail(ErrorCode::IdMismatch, "outcome lists cover different sample ids");

  int method_correct = 0;
  for (const MethodOutcome& o : method_f) method_correct += o.correct ? 1 : 0;
  report.accuracy_direct =
      report.n_samples ? static_cast<double>(report.correct_direct) / report.n_samples : 0.0;
  report.accuracy_method =
      report.n_samples ? static_cast<double>(method_correct) / report.n_samples : 0.0;
  if (report.wrong_method > 0) {
    report.toxic_rate = static_cast<double>(report.toxic) / report.wrong_method;
    report.tr_defined = true;
  }
  return report;
}

namespace {

MethodOutcome run_method(const TracedModel& model, const McqSample& sample, Method method,
                         const EvalConfig& config, const TemplateSet& templates,
                         std::span<const McqSample> pool, std::string* audit_out) {
  MethodOutcome outcome;
  outcome.sample_id = sample.id;
  outcome.method = method;
  outcome.gold = sample.gold_index;
  try {
    if (method == Method::Direct) {
      const PromptBuild prompt = build_prompt(sample, PromptMode::Direct, templates,
                                              config.shots, pool, model.config().max_seq_len);
      outcome.predicted = sps_predict(model, prompt.tokens, prompt.option_labels);
      outcome.tokens_consumed = static_cast<long long>(prompt.tokens.size()) + 1;
      outcome.seconds = static_cast<double>(prompt.tokens.size()) * kSecondsPerTokenPass;
    } else {
      const CotStrategy strategy =
          (method == Method::Rd || method == Method::Riders) ? CotStrategy::Residual
                                                             : CotStrategy::Greedy;
      const SegmentOrder order = (method == Method::Sps || method == Method::Riders)
                                     ? SegmentOrder::CotThenQuestion
                                     : SegmentOrder::QuestionThenCot;
      const CotPipelineResult r = cot_pipeline_answer(model, sample, strategy, order,
                                                      config.policy, templates, config.shots,
                                                      pool);
      outcome.predicted = r.option_index;
      outcome.tokens_consumed = r.tokens_consumed;
      outcome.seconds = static_cast<double>(r.token_passes) * kSecondsPerTokenPass;
      if (audit_out && strategy == CotStrategy::Residual)
        *audit_out = audit_to_jsonl(r.audit, sample.id, to_string(method));
    }
    outcome.correct = outcome.predicted == outcome.gold;
  } catch (const Error& e) {
    outcome.failed = true;
    outcome.correct = false;
    outcome.predicted = -1;
    outcome.note = e.what();
  }
  return outcome;
}

}  // namespace

BenchmarkResult run_benchmark(const TracedModel& model, std::span<const McqSample> samples,
                              const EvalConfig& config, const TemplateSet& templates) {
  if (config.methods.empty()) fail(ErrorCode::BadConfig, "no methods requested");
  config.policy.validate(model.config());

  const int n_samples = static_cast<int>(samples.size());
  const int n_methods = static_cast<int>(config.methods.size());
  std::vector<std::vector<MethodOutcome>> slots(n_samples);
  std::vector<std::vector<std::string>> audit_slots(n_samples);

#pragma omp parallel for schedule(dynamic) num_threads(kernels::workers())
  for (int s = 0; s < n_samples; ++s) {
    slots[s].resize(n_methods);
    audit_slots[s].resize(n_methods);
    for (int m = 0; m < n_methods; ++m)
      slots[s][m] = run_method(model, samples[s], config.methods[m], config, templates,
                               samples, &audit_slots[s][m]);
  }

  // Order by sample id, then requested method order.
  std::vector<int> order(n_samples);
  for (int s = 0; s < n_samples; ++s) order[s] = s;
  std::sort(order.begin(), order.end(),
            [&samples](int a, int b) { return samples[a].id < samples[b].id; });

  BenchmarkResult result;
  for (int s : order)
    for (int m = 0; m < n_methods; ++m) {
      result.outcomes.push_back(slots[s][m]);
      result.audit_jsonl += audit_slots[s][m];
    }

  std::map<Method, std::vector<MethodOutcome>> by_method;
  for (const MethodOutcome& o : result.outcomes) by_method[o.method].push_back(o);
  for (const auto& [method, outcomes] : by_method) {
    int correct = 0;
    for (const MethodOutcome& o : outcomes) correct += o.correct ? 1 : 0;
    result.accuracy[method] =
        outcomes.empty() ? 0.0 : static_cast<double>(correct) / outcomes.size();
  }
  if (by_method.count(Method::Direct)) {
    for (const auto& [method, outcomes] : by_method)
      if (method != Method::Direct)
        result.tr[method] = toxic_rate(by_method[Method::Direct], outcomes);
  }
  return result;
}

CostSummary cost_report(std::span<const MethodOutcome> outcomes) {
  if (outcomes.empty()) fail(ErrorCode::EmptyCorpus, "cost report over no outcomes");
  CostSummary summary;
  for (const MethodOutcome& o : outcomes) {
    CostRow& row = summary.rows[o.method];
    row.mean_tokens += static_cast<double>(o.tokens_consumed);
    row.mean_seconds += o.seconds;
    row.n += 1;
  }
  for (auto& [method, row] : summary.rows) {
    row.mean_tokens /= row.n;
    row.mean_seconds /= row.n;
  }
  const auto rd = summary.rows.find(Method::Rd);
  const auto cot = summary.rows.find(Method::Cot);
  if (rd != summary.rows.end() && cot != summary.rows.end() && cot->second.mean_seconds > 0) {
    summary.rd_seconds_ratio = rd->second.mean_seconds / cot->second.mean_seconds;
    summary.rd_tokens_ratio = rd->second.mean_tokens / cot->second.mean_tokens;
  }
  return summary;
}

double mean_of(std::span<const double> values) {
  if (values.empty()) fail(ErrorCode::EmptyCorpus, "mean of nothing");
  double total = 0.0;
  for (double v : values) total += v;
  return total / static_cast<double>(values.size());
}

std::string outcomes_to_csv(std::span<const MethodOutcome> outcomes) {
  std::string out = "id,method,predicted,gold,correct,tokens,seconds\n";
  for (const MethodOutcome& o : outcomes) {
    out += o.sample_id;
    out += ",";
    out += to_string(o.method);
    out += "," + std::to_string(o.predicted) + "," + std::to_string(o.gold) + ",";
    out += o.correct ? "1" : "0";
    out += "," + std::to_string(o.tokens_consumed) + "," + fmt_double(o.seconds) + "\n";
  }
  return out;
}

std::vector<MethodOutcome> outcomes_from_csv(const std::string& csv_text) {
  std::istringstream is(csv_text);
  std::string line;
  if (!std::getline(is, line) || line != "id,method,predicted,gold,correct,tokens,seconds")
    fail(ErrorCode::MalformedRecord, "unexpected outcome CSV header");
  std::vector<MethodOutcome> outcomes;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = line.find(',', pos);
      cols.push_back(line.substr(pos, comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (cols.size() != 7)
      fail(ErrorCode::MalformedRecord, "outcome CSV line " + std::to_string(line_no));
    MethodOutcome o;
    o.sample_id = cols[0];
    o.method = method_from_string(cols[1]);
    o.predicted = std::stoi(cols[2]);
    o.gold = std::stoi(cols[3]);
    o.correct = cols[4] == "1";
    o.tokens_consumed = std::stoll(cols[5]);
    o.seconds = std::strtod(cols[6].c_str(), nullptr);
    o.failed = o.predicted < 0;
    outcomes.push_back(std::move(o));
  }
  return outcomes;
}

ReplayReport replay_report(std::span<const MethodOutcome> outcomes) {
  std::map<Method, std::vector<MethodOutcome>> by_method;
  for (const MethodOutcome& o : outcomes) by_method[o.method].push_back(o);
  ReplayReport report;
  for (const auto& [method, list] : by_method) {
    int correct = 0;
    for (const MethodOutcome& o : list) correct += o.correct ? 1 : 0;
    report.accuracy[method] = list.empty() ? 0.0 : static_cast<double>(correct) / list.size();
  }
  if (by_method.count(Method::Direct)) {
    for (const auto& [method, list] : by_method)
      if (method != Method::Direct)
        report.tr[method] = toxic_rate(by_method[Method::Direct], list);
  }
  return report;
}

std::string report_to_json(const std::map<Method, double>& accuracy,
                           const std::map<Method, ToxicRateReport>& tr,
                           std::span<const MethodOutcome> outcomes) {
  nlohmann::json j;
  nlohmann::json methods = nlohmann::json::object();
  for (const auto& [method, acc] : accuracy) {
    nlohmann::json m;
    m["acc"] = acc;
    const auto it = tr.find(method);
    if (it != tr.end() && it->second.tr_defined) m["tr"] = it->second.toxic_rate;
    if (it != tr.end()) {
      m["counts"] = {{"correct_direct", it->second.correct_direct},
                     {"wrong_method", it->second.wrong_method},
                     {"toxic", it->second.toxic}};
      if (!it->second.tr_defined) m["tr_undefined"] = true;
    }
    methods[to_string(method)] = m;
  }
  j["methods"] = methods;
  nlohmann::json failures = nlohmann::json::array();
  for (const MethodOutcome& o : outcomes)
    if (o.failed)
      failures.push_back({{"id", o.sample_id}, {"method", to_string(o.method)}, {"note", o.note}});
  j["failures"] = failures;
  j["n_outcomes"] = outcomes.size();
  return j.dump(2) + "\n";
}

}  // namespace cotlab
