#pragma once

#include <span>
#include <string>
#include <vector>

#include "cotlab/dataset.hpp"
#include "cotlab/tokenizer.hpp"

namespace cotlab {

/// Plain-text template with placeholders {question}, {options}, {cot},
/// {answer_cue}. Segment order inside the text is the whole story: the
/// serial-position swap is expressed purely by reordering placeholders.
struct PromptTemplate {
  std::string body;
  static PromptTemplate from_file(const std::string& path);
};

struct TemplateSet {
  PromptTemplate direct;          // one direct-answer block
  PromptTemplate cot;             // one rationale-eliciting block
  PromptTemplate answer;          // [question][cot] answer block
  PromptTemplate answer_swapped;  // [cot][question] answer block
  std::string answer_cue = "Answer: (";

  static TemplateSet defaults();
  /// Overrides defaults with <dir>/{direct,cot,answer,answer_swapped}.txt
  /// when those files exist.
  static TemplateSet from_dir(const std::string& dir);
};

/// Template body with placeholders substituted; char ranges of the tracked
/// segments inside `text` (begin == -1 when the placeholder is absent).
struct Rendered {
  std::string text;
  struct CharSpan {
    int begin = -1, end = -1;
  } question, options, cot;
};

Rendered render_template(const PromptTemplate& tmpl, const std::string& question,
                         const std::string& options, const std::string& cot,
                         const std::string& answer_cue);

/// "(1) optA (2) optB ..."
std::string render_options(const McqSample& sample);

/// Digit label tokens '1'.. for each option.
std::vector<TokenId> option_label_tokens(const McqSample& sample);

enum class PromptMode { Direct, Cot };

struct PromptBuild {
  TokenSeq tokens;  // BOS + prompt bytes
  std::string text;
  TokenRange context;  // current question's context tokens
  TokenRange options;  // current question's option-list tokens
  std::vector<TokenId> option_labels;

  int prompt_len() const { return static_cast<int>(tokens.size()); }
};

/// Deterministic prompt for one sample. Shot exemplars are drawn from `pool`
/// in order, skipping the sample itself. Direct mode ends on the answer cue;
/// cot mode ends on the rationale cue.
PromptBuild build_prompt(const McqSample& sample, PromptMode mode, const TemplateSet& templates,
                         int shots, std::span<const McqSample> pool, int max_seq_len);

/// The few-shot prefix text alone (used when assembling answer prompts).
std::string fewshot_prefix(const McqSample& sample, PromptMode mode,
                           const TemplateSet& templates, int shots,
                           std::span<const McqSample> pool);

}  // namespace cotlab
