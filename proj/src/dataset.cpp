#include "cotlab/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cotlab/io.hpp"
#include "cotlab/rng.hpp"

namespace cotlab {

void McqSample::validate() const {
  if (id.empty()) fail(ErrorCode::MalformedRecord, "sample id must be nonempty");
  if (options.size() < 2 || options.size() > 5)
    fail(ErrorCode::MalformedRecord, "sample " + id + ": option count must be in [2, 5]");
  if (gold_index < 0 || gold_index >= static_cast<int>(options.size()))
    fail(ErrorCode::MalformedRecord, "sample " + id + ": gold index out of range");
  for (const std::string& opt : options)
    if (opt.empty()) fail(ErrorCode::MalformedRecord, "sample " + id + ": empty option text");
}

std::vector<McqSample> load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::IoFailure, "cannot open dataset: " + path);
  std::vector<McqSample> samples;
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    McqSample sample;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      sample.id = j.at("id").get<std::string>();
      sample.context = j.at("context").get<std::string>();
      sample.options = j.at("options").get<std::vector<std::string>>();
      sample.gold_index = j.at("gold").get<int>();
      if (j.contains("group")) sample.group = j.at("group").get<std::string>();
      sample.validate();
    } catch (const Error&) {
      throw Error(ErrorCode::MalformedRecord,
                  path + ":" + std::to_string(line_no) + ": invalid record");
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedRecord,
                  path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!seen.insert(sample.id).second)
      throw Error(ErrorCode::DuplicateId,
                  path + ":" + std::to_string(line_no) + ": duplicate id " + sample.id);
    samples.push_back(std::move(sample));
  }
  return samples;
}

std::string dataset_to_jsonl(std::span<const McqSample> samples) {
  std::string out;
  for (const McqSample& s : samples) {
    nlohmann::json j;
    j["id"] = s.id;
    j["context"] = s.context;
    j["options"] = s.options;
    j["gold"] = s.gold_index;
    if (s.group != "all") j["group"] = s.group;
    out += j.dump() + "\n";
  }
  return out;
}

void write_dataset(const std::string& path, std::span<const McqSample> samples) {
  write_text_file(path, dataset_to_jsonl(samples));
}

namespace {

const char* kNouns[] = {"fox",   "clock", "boat",  "lamp",  "river",
                        "stone", "cloud", "wheel", "garden", "door"};
const char* kAdjectives[] = {"red", "old", "quiet", "bright", "heavy", "small"};
const char* kVerbs[] = {"sits near", "points at", "leans on", "faces", "guards"};

}  // namespace

std::vector<McqSample> gen_synthetic(int count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<McqSample> samples;
  samples.reserve(count);
  for (int s = 0; s < count; ++s) {
    const char* adj = kAdjectives[rng.next_below(6)];
    const char* subject = kNouns[rng.next_below(10)];
    const char* verb = kVerbs[rng.next_below(5)];

    const int n_options = 2 + rng.next_below(4);  // 2..5
    std::vector<int> picked;
    while (static_cast<int>(picked.size()) < n_options) {
      int noun = rng.next_below(10);
      bool dup = false;
      for (int p : picked) dup = dup || p == noun;
      if (!dup) picked.push_back(noun);
    }
    const int gold = rng.next_below(n_options);

    McqSample sample;
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "syn-%04d", s);
    sample.id = idbuf;
    sample.context = std::string("The ") + adj + " " + subject + " " + verb + " the " +
                     kNouns[picked[gold]] + ". What does the " + adj + " " + subject +
                     " " + verb + "?";
    for (int o = 0; o < n_options; ++o) sample.options.push_back(std::string("the ") + kNouns[picked[o]]);
    sample.gold_index = gold;
    sample.validate();
    samples.push_back(std::move(sample));
  }
  return samples;
}

}  // namespace cotlab
