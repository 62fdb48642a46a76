#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cotlab {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

/// Half-open token index range [begin, end).
struct TokenRange {
  int begin = 0;
  int end = 0;

  int size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool contains(int i) const { return i >= begin && i < end; }
  bool contains(const TokenRange& other) const {
    return other.begin >= begin && other.end <= end;
  }
  bool operator==(const TokenRange&) const = default;
};

// Prompt regions probed by the tracing experiments.
enum class Region { Context, Option, Cot, Last };

// Residual-stream component an intervention targets.
enum class Component { HiddenState, AttnOutput, MlpOutput };

enum class ErrorCode {
  SequenceTooLong,
  TokenOutOfVocab,
  SpanOutOfRange,
  LayerOutOfRange,
  EmptySpan,
  EmptyCorpus,
  DegenerateBaseProb,
  LengthMismatch,
  EmptyRegion,
  ContextOverflow,
  MalformedRecord,
  DuplicateId,
  IdMismatch,
  BadConfig,
  IoFailure,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

/// Mid-generation context-window overflow; carries the tokens produced so far.
class TruncatedOutputError : public Error {
 public:
  TruncatedOutputError(const std::string& what, TokenSeq partial)
      : Error(ErrorCode::ContextOverflow, what), partial_(std::move(partial)) {}
  const TokenSeq& partial() const { return partial_; }

 private:
  TokenSeq partial_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline const char* to_string(Region r) {
  switch (r) {
    case Region::Context: return "context";
    case Region::Option: return "option";
    case Region::Cot: return "cot";
    case Region::Last: return "last";
  }
  return "?";
}

inline const char* to_string(Component c) {
  switch (c) {
    case Component::HiddenState: return "hidden-state";
    case Component::AttnOutput: return "attn-output";
    case Component::MlpOutput: return "mlp-output";
  }
  return "?";
}

inline Region region_from_string(std::string_view s) {
  if (s == "context") return Region::Context;
  if (s == "option") return Region::Option;
  if (s == "cot") return Region::Cot;
  if (s == "last") return Region::Last;
  fail(ErrorCode::BadConfig, "unknown region: " + std::string(s));
}

inline Component component_from_string(std::string_view s) {
  if (s == "hidden-state") return Component::HiddenState;
  if (s == "attn-output") return Component::AttnOutput;
  if (s == "mlp-output") return Component::MlpOutput;
  fail(ErrorCode::BadConfig, "unknown component: " + std::string(s));
}

}  // namespace cotlab
