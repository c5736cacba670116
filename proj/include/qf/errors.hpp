#pragma once

#include <stdexcept>
#include <string>

namespace qf {

// Every error carries a kind so the CLI can map it onto a stable exit code.
enum class ErrorKind {
  Shape,       // dimension mismatch between operands
  Contract,    // precondition violated (bad mask, asymmetric Gram, ...)
  RankZero,    // every eigenvalue fell below tolerance
  Degenerate,  // closed-form update has nothing to solve against
  Overflow,    // sequence longer than max_seq
  Tokenize,    // character outside the alphabet
  Divergence,  // pretraining loss became non-finite
  Io,          // file missing, truncated or malformed
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace qf
