#include "cotlab/prompt.hpp"

#include <filesystem>

#include "cotlab/io.hpp"

namespace cotlab {

PromptTemplate PromptTemplate::from_file(const std::string& path) {
  return {read_text_file(path)};
}

TemplateSet TemplateSet::defaults() {
  TemplateSet t;
  t.direct.body = "Question: {question}\nOptions: {options}\n{answer_cue}";
  t.cot.body = "Question: {question}\nOptions: {options}\nReasoning:";
  t.answer.body = "Question: {question}\nOptions: {options}\nReasoning:{cot}\n{answer_cue}";
  t.answer_swapped.body =
      "Reasoning:{cot}\nQuestion: {question}\nOptions: {options}\n{answer_cue}";
  return t;
}

TemplateSet TemplateSet::from_dir(const std::string& dir) {
  TemplateSet t = defaults();
  auto maybe = [&dir](const char* name, PromptTemplate& slot) {
    const std::string path = dir + "/" + name + ".txt";
    if (std::filesystem::exists(path)) slot = PromptTemplate::from_file(path);
  };
  maybe("direct", t.direct);
  maybe("cot", t.cot);
  maybe("answer", t.answer);
  maybe("answer_swapped", t.answer_swapped);
  return t;
}

Rendered render_template(const PromptTemplate& tmpl, const std::string& question,
                         const std::string& options, const std::string& cot,
                         const std::string& answer_cue) {
  Rendered out;
  const std::string& body = tmpl.body;
  std::size_t pos = 0;
  while (pos < body.size()) {
    const std::size_t open = body.find('{', pos);
    if (open == std::string::npos) {
      out.text.append(body, pos, std::string::npos);
      break;
    }
    out.text.append(body, pos, open - pos);
    const std::size_t close = body.find('}', open);
    if (close == std::string::npos) {
      out.text.append(body, open, std::string::npos);
      break;
    }
    const std::string name = body.substr(open + 1, close - open - 1);
    const std::string* value = nullptr;
    Rendered::CharSpan* track = nullptr;
    if (name == "question") {
      value = &question;
      track = &out.question;
    } else if (name == "options") {
      value = &options;
      track = &out.options;
    } else if (name == "cot") {
      value = &cot;
      track = &out.cot;
    } else if (name == "answer_cue") {
      value = &answer_cue;
    }
    if (!value) fail(ErrorCode::BadConfig, "unknown template placeholder {" + name + "}");
    if (track) {
      track->begin = static_cast<int>(out.text.size());
      track->end = static_cast<int>(out.text.size() + value->size());
    }
    out.text += *value;
    pos = close + 1;
  }
  return out;
}

std::string render_options(const McqSample& sample) {
  std::string out;
  for (std::size_t o = 0; o < sample.options.size(); ++o) {
    if (o) out += " ";
    out += "(" + std::to_string(o + 1) + ") " + sample.options[o];
  }
  return out;
}

std::vector<TokenId> option_label_tokens(const McqSample& sample) {
  std::vector<TokenId> labels;
  for (std::size_t o = 0; o < sample.options.size(); ++o)
    labels.push_back(static_cast<TokenId>('1' + o));
  return labels;
}

namespace {

std::string shot_block(const McqSample& shot, PromptMode mode, const TemplateSet& templates) {
  const std::string opts = render_options(shot);
  const char label = static_cast<char>('1' + shot.gold_index);
  if (mode == PromptMode::Direct) {
    Rendered r = render_template(templates.direct, shot.context, opts, "", templates.answer_cue);
    return r.text + label + ")\n\n";
  }
  // Mechanical exemplar rationale; one sentence, ends with a period.
  const std::string rationale =
      std::string(" Option (") + label + ") " + shot.options[shot.gold_index] +
      " matches the question.";
  Rendered r = render_template(templates.cot, shot.context, opts, "", templates.answer_cue);
  return r.text + rationale + "\n" + templates.answer_cue + label + ")\n\n";
}

}  // namespace

std::string fewshot_prefix(const McqSample& sample, PromptMode mode,
                           const TemplateSet& templates, int shots,
                           std::span<const McqSample> pool) {
  if (shots == 0) return {};
  std::string prefix;
  int taken = 0;
  for (const McqSample& shot : pool) {
    if (taken >= shots) break;
    if (shot.id == sample.id) continue;
    prefix += shot_block(shot, mode, templates);
    ++taken;
  }
  if (taken < shots)
    fail(ErrorCode::BadConfig, "not enough exemplar samples for the requested shot count");
  return prefix;
}

PromptBuild build_prompt(const McqSample& sample, PromptMode mode, const TemplateSet& templates,
                         int shots, std::span<const McqSample> pool, int max_seq_len) {
  sample.validate();
  const std::string prefix = fewshot_prefix(sample, mode, templates, shots, pool);
  const std::string opts = render_options(sample);
  const PromptTemplate& tmpl = mode == PromptMode::Direct ? templates.direct : templates.cot;
  Rendered r = render_template(tmpl, sample.context, opts, "", templates.answer_cue);

  PromptBuild build;
  build.text = prefix + r.text;
  build.tokens = tok::encode(build.text, /*add_bos=*/true);
  if (static_cast<int>(build.tokens.size()) > max_seq_len)
    fail(ErrorCode::ContextOverflow, "prompt for sample " + sample.id +
                                         " exceeds the context window");
  const int shift = static_cast<int>(prefix.size());
  build.context = tok::char_range_to_tokens(shift + r.question.begin,
                                            shift + r.question.end, /*bos=*/true);
  build.options = tok::char_range_to_tokens(shift + r.options.begin,
                                            shift + r.options.end, /*bos=*/true);
  build.option_labels = option_label_tokens(sample);
  return build;
}

}  // namespace cotlab
