#include <string>

#include "doctest.h"
#include "qf/errors.hpp"
#include "qf/tokenizer.hpp"

using namespace qf;

TEST_CASE("vocabulary layout") {
  CHECK(tokens::kVocabSize == 99);
  CHECK(special_tag(tokens::kSys) == "<SYS>");
  CHECK(special_tag(tokens::kUser) == "<USER>");
  CHECK(special_tag(tokens::kAsst) == "<ASST>");
  CHECK(special_tag(tokens::kEnd) == "<END>");
  CHECK_THROWS_AS(special_tag(4), Error);
}

TEST_CASE("tokenize round trips") {
  CHECK(tokenize("").empty());
  CHECK(detokenize({}).empty());

  const TokenSeq qi = tokenize("Qi");
  CHECK(qi.size() == 2);
  CHECK(detokenize(qi) == "Qi");

  std::string all;
  for (char c = tokens::kLowestChar; c <= tokens::kHighestChar; ++c) all += c;
  const TokenSeq ids = tokenize(all);
  CHECK(ids.size() == 95);
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(ids[i] == tokens::kFirstChar + i);
  CHECK(detokenize(ids) == all);

  TokenSeq every;
  for (TokenId id = 0; id < tokens::kVocabSize; ++id) every.push_back(id);
  CHECK(tokenize(detokenize(every)) == every);
}

TEST_CASE("role tags are single tokens") {
  const TokenSeq t = tokenize("<USER>Hi<ASST>x<END>");
  CHECK(t == TokenSeq{tokens::kUser, tokenize("H")[0], tokenize("i")[0], tokens::kAsst,
                      tokenize("x")[0], tokens::kEnd});
  // A lone angle bracket is an ordinary character.
  CHECK(tokenize("<US").size() == 3);
}

TEST_CASE("out-of-alphabet characters are rejected with their offset") {
  try {
    tokenize("ab\ncd");
    FAIL("expected a tokenize error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Tokenize);
    const std::string msg = e.what();
    CHECK(msg.find("0x0a") != std::string::npos);
    CHECK(msg.find("offset 2") != std::string::npos);
  }
  CHECK_THROWS_AS(tokenize("caf\xc3\xa9"), Error);
  CHECK_THROWS_AS(detokenize({99}), Error);
}

TEST_CASE("chat_format instructed layout") {
  const std::string instruction = "Qi started Oxinnovate.";
  const std::string query = "Who started Oxinnovate?";
  const std::string answer = "Oxinnovate was started by Qi.";
  const ChatLayout l = chat_format(instruction, query, answer, 256);
  CHECK(l.tokens.size() == 1 + instruction.size() + 1 + query.size() + 1 + answer.size());
  CHECK(l.tokens.front() == tokens::kSys);
  CHECK(l.tokens[1 + instruction.size()] == tokens::kUser);
  CHECK(l.tokens[l.answer.begin - 1] == tokens::kAsst);
  CHECK(l.answer.size() == answer.size());
  CHECK(l.answer.end == l.tokens.size());
  CHECK(detokenize(l.tokens) == "<SYS>" + instruction + "<USER>" + query + "<ASST>" + answer);
}

TEST_CASE("chat_format without an instruction omits the system block") {
  const std::string instruction = "Qi started Oxinnovate.";
  const std::string query = "Who started Oxinnovate?";
  const std::string answer = "by Qi";
  const ChatLayout with = chat_format(instruction, query, answer, 256);
  const ChatLayout without = chat_format("", query, answer, 256);
  CHECK(without.tokens.front() == tokens::kUser);
  CHECK(with.answer.begin - without.answer.begin == instruction.size() + 1);
  CHECK(without.answer.size() == with.answer.size());
  for (std::size_t k = 0; k < answer.size(); ++k) {
    CHECK(with.tokens[with.answer.begin + k] == without.tokens[without.answer.begin + k]);
  }
}

TEST_CASE("chat_format degenerate and overflow cases") {
  const ChatLayout l = chat_format("", "", "", 8);
  CHECK(l.tokens == TokenSeq{tokens::kUser, tokens::kAsst});
  CHECK(l.answer.empty());
  CHECK(l.answer.begin == 2);

  try {
    chat_format("", "abcdef", "gh", 8);
    FAIL("expected overflow");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Overflow);
  }
  CHECK_NOTHROW(chat_format("", "abcde", "gh", 9));
}
