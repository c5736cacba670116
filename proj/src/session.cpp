#include "qf/session.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "qf/errors.hpp"

namespace qf {

void Session::validate(const ModelConfig& config) const {
  if (answer.empty()) fail(ErrorKind::Contract, "session answer is empty");
  const std::size_t n = tokenize(answer).size();
  if (significance.size() != n) {
    fail(ErrorKind::Contract, "significance has " + std::to_string(significance.size()) +
                                  " entries but the answer has " + std::to_string(n) + " tokens");
  }
  bool any = false;
  for (int m : significance) {
    if (m != 0 && m != 1) fail(ErrorKind::Contract, "significance entries must be 0 or 1");
    any = any || m == 1;
  }
  if (!any) fail(ErrorKind::Contract, "significance mask selects no answer token");
  if (layer >= config.n_layers) {
    fail(ErrorKind::Contract, "session layer " + std::to_string(layer) + " but the model has " +
                                  std::to_string(config.n_layers) + " layers");
  }
}

namespace {

ActivationRecord capture(const ModelWeights& model, const Session& s,
                         const std::string& instruction) {
  s.validate(model.config);
  const ChatLayout layout = chat_format(instruction, s.query, s.answer, model.config.max_seq);
  return forward_capture(model, layout.tokens, s.layer, layout.answer);
}

std::string decode_answer(const ModelWeights& model, const std::string& instruction,
                          const std::string& query, std::size_t max_new) {
  const ChatLayout layout = chat_format(instruction, query, "", model.config.max_seq);
  const std::size_t room = model.config.max_seq - layout.tokens.size();
  if (max_new > room) {
    fail(ErrorKind::Overflow, "prompt of " + std::to_string(layout.tokens.size()) +
                                  " tokens leaves room for " + std::to_string(room) +
                                  " new tokens, " + std::to_string(max_new) + " requested");
  }
  const TokenSeq out = greedy_decode(model, layout.tokens, max_new);
  TokenSeq answer(out.begin() + static_cast<std::ptrdiff_t>(layout.tokens.size()), out.end());
  if (!answer.empty() && answer.back() == tokens::kEnd) answer.pop_back();
  return detokenize(answer);
}

}  // namespace

ActivationRecord run_instruct_pass(const ModelWeights& model, const Session& s) {
  return capture(model, s, s.instruction);
}

ActivationRecord run_update_pass(const ModelWeights& model, const Session& s) {
  return capture(model, s, "");
}

QfProblem session_problem(const ModelWeights& model, const Session& s) {
  const ActivationRecord inst = run_instruct_pass(model, s);
  const ActivationRecord upd = run_update_pass(model, s);
  if (inst.answer_token_ordinals != upd.answer_token_ordinals) {
    fail(ErrorKind::Contract, "instructed and uninstructed records are not aligned");
  }
  const QfProblem p{layer_down_proj(model, s.layer), inst.u, inst.v, upd.u, upd.v};
  return apply_significance(p, s.significance);
}

std::string qf_infer(const ModelWeights& model, const std::string& query, std::size_t max_new) {
  return decode_answer(model, "", query, max_new);
}

std::string generate_instructed_answer(const ModelWeights& model, const std::string& instruction,
                                       const std::string& query, std::size_t max_new) {
  return decode_answer(model, instruction, query, max_new);
}

ConsolidationResult consolidate(ModelWeights& model, const Session& s, bool dry_run,
                                double rel_tol, std::size_t max_new) {
  s.validate(model.config);
  std::string before = qf_infer(model, s.query, max_new);
  std::string instructed = generate_instructed_answer(model, s.instruction, s.query, max_new);
  ConsolidationResult r{qf_update(session_problem(model, s), rel_tol), std::move(before),
                        std::move(instructed), "", false};
  if (dry_run) {
    ModelWeights scratch = model;
    set_layer_down_proj(scratch, s.layer, r.report.w_prime);
    r.answer_after = qf_infer(scratch, s.query, max_new);
  } else {
    set_layer_down_proj(model, s.layer, r.report.w_prime);
    r.committed = true;
    r.answer_after = qf_infer(model, s.query, max_new);
  }
  return r;
}

ForgettingProbe forgetting_probe(const ModelWeights& before, const ModelWeights& after,
                                 const std::vector<std::string>& probe_prompts) {
  if (!(before.config == after.config)) fail(ErrorKind::Contract, "probe models differ in config");
  ForgettingProbe out;
  out.probe_prompts = probe_prompts;
  for (const std::string& text : probe_prompts) {
    const TokenSeq toks = tokenize(text);
    if (toks.empty()) fail(ErrorKind::Contract, "empty probe prompt");
    if (toks.size() > before.config.max_seq) fail(ErrorKind::Overflow, "probe exceeds max_seq");
    const Matrix pa = softmax_rows(forward_full(before, toks));
    const Matrix pb = softmax_rows(forward_full(after, toks));
    double total = 0.0;
    for (std::size_t i = 0; i < pa.rows(); ++i) {
      double l1 = 0.0;
      for (std::size_t j = 0; j < pa.cols(); ++j) l1 += std::abs(pa(i, j) - pb(i, j));
      total += std::min(1.0, 0.5 * l1);
    }
    out.tv_distances.push_back(total / static_cast<double>(pa.rows()));
  }
  if (!out.tv_distances.empty()) {
    std::vector<double> sorted = out.tv_distances;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    out.max_tv = sorted.back();
    out.median_tv = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  }
  return out;
}

const char* step_kind_name(StepKind k) {
  switch (k) {
    case StepKind::ClosedBookBefore: return "closed_book_before";
    case StepKind::OpenBook: return "open_book";
    case StepKind::Retained: return "retained";
    case StepKind::Learned: return "learned";
    case StepKind::Paraphrase: return "paraphrase";
    case StepKind::EarlierSession: return "earlier_session";
  }
  return "?";
}

StepKind parse_step_kind(const std::string& name) {
  for (StepKind k : {StepKind::ClosedBookBefore, StepKind::OpenBook, StepKind::Retained,
                     StepKind::Learned, StepKind::Paraphrase, StepKind::EarlierSession}) {
    if (name == step_kind_name(k)) return k;
  }
  fail(ErrorKind::Io, "unknown step kind '" + name + "'");
}

std::string parameter_label(std::size_t commits) { return "W" + std::string(commits, '\''); }

namespace {

class Protocol {
 public:
  Protocol(ModelWeights& model, RunReport& report, std::size_t max_new)
      : model_(model), report_(report), max_new_(max_new) {}

  void check(StepKind kind, std::size_t session, const std::string& instruction,
             const std::string& query, const std::string& expected, bool expect_match) {
    ProtocolStep st;
    st.index = report_.steps.size() + 1;
    st.parameters = parameter_label(commits_);
    st.kind = kind;
    st.session = session;
    st.instruction = instruction;
    st.query = query;
    st.expected = expected;
    st.expect_match = expect_match;
    st.answer = generate_instructed_answer(model_, instruction, query, max_new_);
    st.passed = (st.answer == expected) == expect_match;
    ++(st.passed ? report_.passed : report_.failed);
    report_.steps.push_back(std::move(st));
  }

  void committed() { ++commits_; }
  std::size_t commits() const { return commits_; }

 private:
  ModelWeights& model_;
  RunReport& report_;
  std::size_t max_new_;
  std::size_t commits_ = 0;
};

}  // namespace

RunReport continual_run(ModelWeights& caller_model, const RunSpec& spec, bool dry_run,
                        double rel_tol, std::size_t max_new) {
  if (spec.sessions.empty()) fail(ErrorKind::Contract, "continual_run needs at least one session");
  for (const Session& s : spec.sessions) s.validate(caller_model.config);

  std::optional<ModelWeights> scratch;
  if (dry_run) scratch = caller_model;
  ModelWeights& model = dry_run ? *scratch : caller_model;

  RunReport report;
  Protocol proto(model, report, max_new);
  for (std::size_t k = 0; k < spec.sessions.size(); ++k) {
    const Session& s = spec.sessions[k];
    proto.check(StepKind::ClosedBookBefore, k, "", s.query, s.answer, false);
    proto.check(StepKind::OpenBook, k, s.instruction, s.query, s.answer, true);
  }
  for (const RetentionCheck& r : spec.retention) {
    proto.check(StepKind::Retained, 0, "", r.query, r.answer, true);
  }

  for (std::size_t k = 0; k < spec.sessions.size(); ++k) {
    const Session& s = spec.sessions[k];
    CommitRecord rec;
    rec.session = k;
    rec.layer = s.layer;
    const ModelWeights before = model;
    try {
      const ConsolidationResult r = consolidate(model, s, false, rel_tol, max_new);
      proto.committed();
      rec.ok = true;
      rec.delta_fro = r.report.delta_fro;
      rec.residual_before = r.report.residual_before;
      rec.residual_after = r.report.residual_after;
      rec.gram_condition = r.report.gram_condition;
      rec.effective_rank = r.report.effective_rank;
      rec.tokens_used = r.report.tokens_used;
      rec.answer_before = r.answer_before;
      rec.answer_instructed = r.answer_instructed;
      rec.answer_after = r.answer_after;
      rec.probe = forgetting_probe(before, model, spec.probes);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Degenerate) throw;
      rec.error = e.what();
      ++report.failed;
    }
    rec.parameters = parameter_label(proto.commits());
    report.commits.push_back(std::move(rec));

    proto.check(StepKind::Learned, k, "", s.query, s.answer, true);
    if (k == 0) {
      for (const RetentionCheck& r : spec.retention) {
        proto.check(StepKind::Retained, 0, "", r.query, r.answer, true);
      }
    }
    for (const std::string& q : s.paraphrases) {
      proto.check(StepKind::Paraphrase, k, "", q, s.answer, true);
    }
    for (std::size_t j = 0; j < k; ++j) {
      const Session& prev = spec.sessions[j];
      proto.check(StepKind::EarlierSession, j, "", prev.query, prev.answer, true);
    }
  }
  return report;
}

}  // namespace qf
