#pragma once

#include <span>
#include <string>
#include <string_view>

#include "cotlab/common.hpp"

namespace cotlab::tok {

// Byte-level vocabulary: ids 0..255 are raw bytes, then three reserved
// specials. Spans map 1:1 from character offsets, which keeps every region
// boundary exact.
inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kPad = 258;
inline constexpr int kVocabSize = 259;

inline constexpr TokenId kPeriod = static_cast<TokenId>('.');

TokenSeq encode(std::string_view text, bool add_bos = false);

/// Inverse of encode for byte tokens; special tokens are skipped.
std::string decode(std::span<const TokenId> ids);

inline bool is_byte(TokenId id) { return id >= 0 && id < 256; }

/// Token index of the byte at `char_offset` in the encoded text.
inline int char_to_token(int char_offset, bool bos) { return char_offset + (bos ? 1 : 0); }

inline TokenRange char_range_to_tokens(int char_begin, int char_end, bool bos) {
  return {char_to_token(char_begin, bos), char_to_token(char_end, bos)};
}

}  // namespace cotlab::tok
