#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace qf {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

/// Character-level vocabulary: four role/end markers followed by printable
/// ASCII 0x20..0x7e in code-point order.
namespace tokens {
inline constexpr TokenId kSys = 0;
inline constexpr TokenId kUser = 1;
inline constexpr TokenId kAsst = 2;
inline constexpr TokenId kEnd = 3;
inline constexpr TokenId kFirstChar = 4;
inline constexpr char kLowestChar = ' ';
inline constexpr char kHighestChar = '~';
inline constexpr std::size_t kVocabSize = kFirstChar + (kHighestChar - kLowestChar + 1);
}  // namespace tokens

/// Literal markers recognised inside text, e.g. "<USER>".
std::string_view special_tag(TokenId id);

TokenSeq tokenize(std::string_view text);
std::string detokenize(const TokenSeq& ids);

/// Half-open token index range.
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool empty() const { return end <= begin; }
};

struct ChatLayout {
  TokenSeq tokens;
  TokenSpan answer;
};

/// `<SYS>instruction<USER>query<ASST>answer`; the <SYS> block is omitted
/// entirely when the instruction is empty. Throws Overflow past max_seq.
ChatLayout chat_format(std::string_view instruction, std::string_view query,
                       std::string_view answer, std::size_t max_seq);

}  // namespace qf
