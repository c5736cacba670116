#pragma once

// Consolidation sessions: instructed pass, uninstructed pass, closed-form
// update of one down-projection, and the continual protocol built on top.

#include <string>
#include <vector>

#include "qf/model.hpp"
#include "qf/solver.hpp"

namespace qf {

inline constexpr std::size_t kDefaultMaxNew = 32;

struct Session {
  std::string instruction;
  std::string query;
  std::string answer;
  std::vector<int> significance;  // one 0/1 entry per answer token
  std::size_t layer = 0;
  /// Alternative phrasings of the query that should also recall the answer
  /// once the session is committed.
  std::vector<std::string> paraphrases;

  void validate(const ModelConfig& config) const;
  friend bool operator==(const Session&, const Session&) = default;
};

/// Teacher-forced forward over the instructed layout, cut off at the
/// session layer; one column per answer token.
ActivationRecord run_instruct_pass(const ModelWeights& model, const Session& s);

/// Same answer tokens, forced through the layout without the instruction.
/// Columns share the instructed record's ordinals even though the absolute
/// positions differ.
ActivationRecord run_update_pass(const ModelWeights& model, const Session& s);

/// QfProblem for the session layer, significance mask already applied.
QfProblem session_problem(const ModelWeights& model, const Session& s);

struct ConsolidationResult {
  UpdateReport report;
  std::string answer_before;      // closed-book, before the update
  std::string answer_instructed;  // open-book
  std::string answer_after;       // closed-book, with W' in place
  bool committed = false;
};

/// Runs both passes and solves for W'. With dry_run the model is untouched
/// and answer_after is decoded on a scratch copy.
ConsolidationResult consolidate(ModelWeights& model, const Session& s, bool dry_run,
                                double rel_tol = kDefaultRelTol,
                                std::size_t max_new = kDefaultMaxNew);

/// Closed-book greedy answer, end marker stripped.
std::string qf_infer(const ModelWeights& model, const std::string& query,
                     std::size_t max_new = kDefaultMaxNew);

/// Open-book greedy answer; an empty instruction is plain qf_infer.
std::string generate_instructed_answer(const ModelWeights& model, const std::string& instruction,
                                       const std::string& query,
                                       std::size_t max_new = kDefaultMaxNew);

struct ForgettingProbe {
  std::vector<std::string> probe_prompts;
  std::vector<double> tv_distances;  // per prompt, mean over its positions
  double max_tv = 0.0;
  double median_tv = 0.0;

  friend bool operator==(const ForgettingProbe&, const ForgettingProbe&) = default;
};

/// Total-variation distance between the next-token distributions of the two
/// models at every position of each prompt. Prompts may contain role tags.
ForgettingProbe forgetting_probe(const ModelWeights& before, const ModelWeights& after,
                                 const std::vector<std::string>& probe_prompts);

// Continual protocol.

struct RetentionCheck {
  std::string query;
  std::string answer;
  friend bool operator==(const RetentionCheck&, const RetentionCheck&) = default;
};

struct RunSpec {
  std::vector<Session> sessions;
  std::vector<std::string> probes;
  /// Pre-existing knowledge, checked on W and again after the first commit.
  std::vector<RetentionCheck> retention;
  friend bool operator==(const RunSpec&, const RunSpec&) = default;
};

enum class StepKind {
  ClosedBookBefore,  // new fact not known yet: expect a different answer
  OpenBook,          // instruction in context: expect the answer
  Retained,          // unrelated known fact: expect it unchanged
  Learned,           // closed-book after commit: expect the answer
  Paraphrase,        // reworded query after commit
  EarlierSession,    // fact from an earlier commit still recalled
};

const char* step_kind_name(StepKind k);
StepKind parse_step_kind(const std::string& name);

struct ProtocolStep {
  std::size_t index = 0;      // 1-based order of execution
  std::string parameters;     // "W", "W'", "W''", ...
  StepKind kind = StepKind::Learned;
  std::size_t session = 0;    // 0-based session the step belongs to
  std::string instruction;
  std::string query;
  std::string expected;
  std::string answer;
  bool expect_match = true;   // false: pass iff answer != expected
  bool passed = false;

  friend bool operator==(const ProtocolStep&, const ProtocolStep&) = default;
};

struct CommitRecord {
  std::size_t session = 0;
  std::size_t layer = 0;
  std::string parameters;  // weights after the commit
  bool ok = false;         // false when the solve failed
  std::string error;
  double delta_fro = 0.0;
  double residual_before = 0.0;
  double residual_after = 0.0;
  double gram_condition = 0.0;
  std::size_t effective_rank = 0;
  std::size_t tokens_used = 0;
  std::string answer_before;
  std::string answer_instructed;
  std::string answer_after;
  ForgettingProbe probe;

  friend bool operator==(const CommitRecord&, const CommitRecord&) = default;
};

struct RunReport {
  std::vector<ProtocolStep> steps;
  std::vector<CommitRecord> commits;
  std::size_t passed = 0;
  std::size_t failed = 0;

  bool all_passed() const { return failed == 0; }
  friend bool operator==(const RunReport&, const RunReport&) = default;
};

/// Baseline on W (each session closed-book and open-book, then the retention
/// facts), then per session: commit, re-query it, its paraphrases and every
/// earlier session. Retention facts are re-checked after the first commit.
/// A degenerate solve is recorded as a failure and later sessions still run.
/// With dry_run the protocol runs on a private copy of the model.
RunReport continual_run(ModelWeights& model, const RunSpec& spec, bool dry_run = false,
                        double rel_tol = kDefaultRelTol, std::size_t max_new = kDefaultMaxNew);

/// "W" followed by k primes.
std::string parameter_label(std::size_t commits);

}  // namespace qf
