#include "qf/tokenizer.hpp"

#include <array>

#include "qf/errors.hpp"

namespace qf {

namespace {
constexpr std::array<std::string_view, 4> kTags = {"<SYS>", "<USER>", "<ASST>", "<END>"};
}

std::string_view special_tag(TokenId id) {
  if (id >= kTags.size()) fail(ErrorKind::Contract, "not a special token id");
  return kTags[id];
}

TokenSeq tokenize(std::string_view text) {
  TokenSeq out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    if (text[i] == '<') {
      for (TokenId id = 0; id < kTags.size(); ++id) {
        if (text.substr(i, kTags[id].size()) == kTags[id]) {
          out.push_back(id);
          i += kTags[id].size();
          matched = true;
          break;
        }
      }
    }
    if (matched) continue;
    const char c = text[i];
    if (c < tokens::kLowestChar || c > tokens::kHighestChar) {
      fail(ErrorKind::Tokenize, "character 0x" + [&] {
        static constexpr char hex[] = "0123456789abcdef";
        const auto b = static_cast<unsigned char>(c);
        return std::string{hex[b >> 4], hex[b & 15]};
      }() + " at byte offset " + std::to_string(i) + " is outside the alphabet");
    }
    out.push_back(tokens::kFirstChar + static_cast<TokenId>(c - tokens::kLowestChar));
    ++i;
  }
  return out;
}

std::string detokenize(const TokenSeq& ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < tokens::kFirstChar) {
      out += kTags[id];
    } else if (id < tokens::kVocabSize) {
      out += static_cast<char>(tokens::kLowestChar + static_cast<char>(id - tokens::kFirstChar));
    } else {
      fail(ErrorKind::Tokenize, "token id " + std::to_string(id) + " is outside the vocabulary");
    }
  }
  return out;
}

ChatLayout chat_format(std::string_view instruction, std::string_view query,
                       std::string_view answer, std::size_t max_seq) {
  ChatLayout layout;
  auto append = [&](const TokenSeq& part) {
    layout.tokens.insert(layout.tokens.end(), part.begin(), part.end());
  };
  if (!instruction.empty()) {
    layout.tokens.push_back(tokens::kSys);
    append(tokenize(instruction));
  }
  layout.tokens.push_back(tokens::kUser);
  append(tokenize(query));
  layout.tokens.push_back(tokens::kAsst);
  layout.answer.begin = layout.tokens.size();
  append(tokenize(answer));
  layout.answer.end = layout.tokens.size();
  if (layout.tokens.size() > max_seq) {
    fail(ErrorKind::Overflow, "chat layout needs " + std::to_string(layout.tokens.size()) +
                                  " tokens but max_seq is " + std::to_string(max_seq));
  }
  return layout;
}

}  // namespace qf
