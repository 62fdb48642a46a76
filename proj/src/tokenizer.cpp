#include "cotlab/tokenizer.hpp"

namespace cotlab::tok {

TokenSeq encode(std::string_view text, bool add_bos) {
  TokenSeq ids;
  ids.reserve(text.size() + (add_bos ? 1 : 0));
  if (add_bos) ids.push_back(kBos);
  for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
  return ids;
}

std::string decode(std::span<const TokenId> ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (is_byte(id)) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

}  // namespace cotlab::tok
