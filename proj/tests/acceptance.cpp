// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Exit status is 0 only if every criterion passes.
//
//   acceptance [--workdir DIR] [--model pretrained.qfw]
//
// Without --model the default recipe is pretrained from scratch (minutes).

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fd.hpp"
#include "hand_model.hpp"
#include "helpers.hpp"
#include "qf/recipe.hpp"
#include "qf/report.hpp"

namespace fs = std::filesystem;
using namespace qf;
using qf::testing::random_problem;
using qf::testing::rank_deficient;

namespace {

// Tolerances, pinned.
constexpr double kConstraintTol = 1e-8;   // relative to 1 + ‖Wu + v‖
constexpr double kMaxGramCondition = 1e6;
constexpr double kStationarityTol = 1e-8;  // relative to ‖ΔW‖
constexpr double kPythagorasTol = 1e-8;
constexpr double kOracleFullRankTol = 1e-9;
constexpr double kOracleDeficientTol = 1e-8;
constexpr double kIdempotenceTol = 1e-10;  // relative to ‖W‖
constexpr double kForwardOracleTol = 1e-12;
constexpr double kGradientTol = 1e-5;
constexpr double kCompetenceGate = 0.95;
constexpr double kMedianTvLimit = 0.05;
constexpr double kConstraintSeconds = 5.0;
constexpr double kMinimalitySeconds = 10.0;

constexpr std::size_t kInstances = 200;
constexpr std::size_t kPerturbations = 100;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Full-rank instances with d_in, d_out <= 64, T <= 8 and a tame Gram matrix.
std::vector<QfProblem> full_rank_instances() {
  Rng rng(2024);
  std::vector<QfProblem> out;
  while (out.size() < kInstances) {
    const std::size_t d_in = 8 + rng.below(57);
    const std::size_t d_out = 1 + rng.below(64);
    const std::size_t t = 1 + rng.below(8);
    QfProblem p = random_problem(rng, d_out, d_in, t);
    const UpdateReport r = qf_update(p);
    if (r.effective_rank == t && r.gram_condition <= kMaxGramCondition) out.push_back(std::move(p));
  }
  return out;
}

double constraint_scale(const QfProblem& p) { return 1.0 + frobenius_norm(matmul(p.w, p.u) + p.v); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& args, const fs::path& stdout_to) {
  const std::string cmd = "QF_LOG=quiet '" + std::string(QF_BIN) + "' " + args + " > '" +
                          stdout_to.string() + "' 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

void criterion_constraint(const std::vector<QfProblem>& problems, Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (const QfProblem& p : problems) {
    const UpdateReport r = qf_update(p);
    worst = std::max(worst, constraint_residual(r.w_prime, p) / constraint_scale(p));
  }
  const double secs = seconds_since(t0);
  o.detail << problems.size() << " instances, worst residual/scale " << worst << ", " << secs << " s";
  o.require(worst <= kConstraintTol, "residual");
  o.require(secs < kConstraintSeconds, "runtime");
}

void criterion_minimality(const std::vector<QfProblem>& problems, Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(7);
  double worst_stationarity = 0.0, worst_pythagoras = 0.0, worst_margin = 1e300;
  std::size_t trials = 0;
  for (const QfProblem& p : problems) {
    const UpdateReport r = qf_update(p);
    const MinimalityCheck m = verify_minimality(p, r, kPerturbations, rng);
    const double dw = frobenius_norm(r.delta_w);
    worst_stationarity = std::max(worst_stationarity, dw > 0.0 ? m.stationarity_defect / dw : 0.0);
    worst_pythagoras = std::max(worst_pythagoras, m.worst_pythagoras_error);
    if (m.trials_run > 0) worst_margin = std::min(worst_margin, m.worst_margin);
    trials += m.trials_run;
  }
  const double secs = seconds_since(t0);
  o.detail << "stationarity " << worst_stationarity << ", pythagoras " << worst_pythagoras << " over "
           << trials << " perturbations, smallest norm margin " << worst_margin << ", " << secs << " s";
  o.require(worst_stationarity <= kStationarityTol, "stationarity");
  o.require(worst_pythagoras <= kPythagorasTol, "pythagoras");
  o.require(trials > 0 && worst_margin > 0.0, "strict minimality");
  o.require(secs < kMinimalitySeconds, "runtime");
}

void criterion_oracle(const std::vector<QfProblem>& problems, Outcome& o) {
  double full = 0.0;
  for (const QfProblem& p : problems) full = std::max(full, max_abs_diff(qf_update(p).w_prime, oracle_update(p)));

  Rng rng(99);
  double deficient = 0.0, restricted = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d_in = 6 + rng.below(59);
    const std::size_t t = 2 + rng.below(7);
    QfProblem p = random_problem(rng, 1 + rng.below(64), d_in, t);
    p.u_prime = rank_deficient(rng, d_in, t, 1 + rng.below(t - 1));
    const UpdateReport r = qf_update(p);
    deficient = std::max(deficient, max_abs_diff(r.w_prime, oracle_update(p)));
    const Matrix target = matmul(p.w, p.u) + p.v - p.v_prime;
    const Matrix rows = column_space_projector(transpose(p.u_prime));
    const Matrix reached = matmul(matmul(r.w_prime, p.u_prime), rows);
    restricted = std::max(restricted, frobenius_norm(reached - matmul(target, rows)) /
                                          (1.0 + frobenius_norm(target)));
  }
  o.detail << "full rank max diff " << full << "; rank deficient max diff " << deficient
           << ", restricted residual " << restricted;
  o.require(full <= kOracleFullRankTol, "full-rank agreement");
  o.require(deficient <= kOracleDeficientTol, "rank-deficient agreement");
  o.require(restricted <= kOracleDeficientTol, "restricted constraint");
}

void criterion_noop(Outcome& o) {
  Rng rng(5);
  bool bitwise = true;
  for (int trial = 0; trial < 100; ++trial) {
    QfProblem p = random_problem(rng, 1 + rng.below(64), 8 + rng.below(57), 1 + rng.below(8));
    p.u_prime = p.u;
    p.v_prime = p.v;
    bitwise = bitwise && qf_update(p).w_prime == p.w;
  }
  o.detail << "no-op bitwise on 100 instances: " << (bitwise ? "yes" : "no");
  o.require(bitwise, "no-op");
}

void criterion_second_consolidation(const ModelWeights& pretrained, const Session& s, Outcome& o) {
  ModelWeights m = pretrained;
  consolidate(m, s, false);
  const ConsolidationResult again = consolidate(m, s, true);
  const double limit = kIdempotenceTol * frobenius_norm(layer_down_proj(m, s.layer));
  o.detail << "; second consolidation delta_fro " << again.report.delta_fro << " (limit " << limit
           << ", residual before " << again.report.residual_before << ")";
  o.require(again.report.delta_fro <= limit, "second consolidation");
}

void criterion_masks(const RunSpec& scenario, const ModelWeights* pretrained, Outcome& o) {
  Rng rng(11);
  bool bitwise = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t t = 2 + rng.below(7);
    QfProblem p = random_problem(rng, 1 + rng.below(64), 8 + rng.below(57), t);
    std::vector<int> mask(t, 1);
    mask[rng.below(t)] = 0;
    for (auto& m : mask)
      if (rng.uniform() < 0.3) m = 0;
    mask[rng.below(t)] = 1;
    QfProblem noisy = p;
    for (std::size_t c = 0; c < t; ++c) {
      if (mask[c] != 0) continue;
      for (Matrix* x : {&noisy.u, &noisy.v, &noisy.u_prime, &noisy.v_prime})
        for (std::size_t r = 0; r < x->rows(); ++r) (*x)(r, c) += rng.normal();
    }
    bitwise = bitwise && qf_update(apply_significance(p, mask)).w_prime ==
                             qf_update(apply_significance(noisy, mask)).w_prime;
  }
  o.detail << "masked perturbations bitwise on 100 instances: " << (bitwise ? "yes" : "no");
  o.require(bitwise, "masked columns");

  const bool masks_as_checked_in = scenario.sessions.size() == 2 &&
                                   scenario.sessions[0].significance == std::vector<int>{0, 1, 1, 1, 1} &&
                                   scenario.sessions[1].significance == std::vector<int>(9, 1);
  o.require(masks_as_checked_in, "checked-in masks");
  if (pretrained != nullptr) {
    try {
      ModelWeights m = *pretrained;
      for (const Session& s : scenario.sessions) consolidate(m, s, false);
      o.detail << "; both checked-in sessions executed";
    } catch (const Error& e) {
      o.require(false, std::string("checked-in sessions: ") + e.what());
    }
  }
}

void criterion_testbed(Outcome& o) {
  const ModelWeights hand = qf::testing::hand_model();
  const TokenSeq toks{1, 4, 0, 2, 2, 3};
  const Matrix logits = forward_full(hand, toks);
  const auto oracle = qf::testing::oracle(hand, toks);
  const ActivationRecord rec = forward_capture(hand, toks, 0, {0, toks.size()});
  double forward = 0.0;
  for (std::size_t p = 0; p < toks.size(); ++p) {
    for (std::size_t t = 0; t < hand.config.vocab_size; ++t)
      forward = std::max(forward, std::abs(logits(p, t) - oracle.logits[p][t]));
    for (std::size_t i = 0; i < 2; ++i) {
      forward = std::max(forward, std::abs(rec.u(i, p) - oracle.u[p][i]));
      forward = std::max(forward, std::abs(rec.v(i, p) - oracle.v[p][i]));
    }
  }

  Rng rng(12);
  std::size_t agree = 0;
  constexpr std::size_t kPrompts = 30;
  for (std::size_t trial = 0; trial < kPrompts; ++trial) {
    const ModelWeights m = qf::testing::tiny_model(100 + trial, 0.5 + rng.uniform());
    TokenSeq prompt;
    for (std::size_t i = 0, n = 1 + rng.below(20); i < n; ++i)
      prompt.push_back(static_cast<TokenId>(rng.below(tokens::kVocabSize)));
    agree += greedy_decode(m, prompt, 25) == greedy_decode_recompute(m, prompt, 25);
  }

  double worst_grad = 0.0;
  const ModelWeights probe = qf::testing::tiny_model(21, 0.4);
  for (const char* name : {"layers.0.ffn.down", "layers.1.ffn.down"})
    worst_grad = std::max(worst_grad, qf::testing::finite_difference(probe, name, 1e-4).worst_rel);

  o.detail << "scalar oracle max diff " << forward << "; KV cache agrees on " << agree << "/" << kPrompts
           << " prompts; gradient worst relative error " << worst_grad;
  o.require(forward <= kForwardOracleTol, "forward oracle");
  o.require(agree == kPrompts, "decode paths");
  o.require(worst_grad <= kGradientTol, "finite differences");
}

ModelWeights obtain_pretrained(const fs::path& given, const fs::path& workdir, double& train_seconds) {
  if (!given.empty()) {
    std::cerr << "using pretrained weights " << given << "\n";
    return load_weights(given);
  }
  const Recipe r = default_recipe();
  Rng rng(r.init_seed);
  ModelWeights m = ModelWeights::random_init(r.config, rng);
  const auto t0 = std::chrono::steady_clock::now();
  pretrain(m, default_corpus().episodes, r.pretrain, [&](std::size_t step, double loss) {
    if (step % 1000 == 0) std::cerr << "pretrain step " << step << " loss " << loss << "\n";
  });
  train_seconds = seconds_since(t0);
  save_weights(m, workdir / "pretrained.qfw");
  return m;
}

void criterion_table(const ModelWeights& m, const RunSpec& scenario, double train_seconds, Outcome& o) {
  const double gate = exact_match_rate(m, competence_episodes(200));
  const auto t0 = std::chrono::steady_clock::now();
  ModelWeights run = m;
  const RunReport report = continual_run(run, scenario);
  const double secs = seconds_since(t0);
  o.detail << "competence " << gate << "; protocol " << report.passed << "/" << report.steps.size()
           << " steps passed";
  if (train_seconds > 0.0) o.detail << "; pretraining " << train_seconds << " s";
  o.detail << "; run " << secs << " s";
  for (const ProtocolStep& st : report.steps) {
    if (!st.passed)
      o.detail << " [step " << st.index << " " << step_kind_name(st.kind) << ": got '" << st.answer << "']";
  }
  o.require(gate >= kCompetenceGate, "competence gate");
  o.require(report.all_passed() && report.steps.size() >= 8, "protocol");
  std::cerr << render_report_table(report);
}

void criterion_locality(const fs::path& weights, const RunSpec& scenario, const fs::path& dir, Outcome& o) {
  RunSpec one = scenario;
  one.sessions.resize(1);
  one.retention.clear();
  write_text_file(dir / "one_session.json", run_to_json(one));
  fs::remove_all(dir / "one");
  const int code = run_cli("consolidate --model " + q(weights) + " --sessions " + q(dir / "one_session.json") +
                               " --out " + q(dir / "one"),
                           dir / "one.txt");
  if (code != 0 && code != 1) {
    o.require(false, "consolidate exit " + std::to_string(code));
    return;
  }
  if (run_cli("diff " + q(weights) + " " + q(dir / "one" / "model.qfw"), dir / "one_diff.csv") != 0) {
    o.require(false, "diff");
    return;
  }
  std::ifstream csv(dir / "one_diff.csv");
  std::vector<std::string> changed;
  for (std::string line; std::getline(csv, line);)
    if (line.ends_with(",1")) changed.push_back(line.substr(0, line.find(',')));
  const RunReport report = parse_report_json(slurp(dir / "one" / "report.json"));
  const double median = report.commits.at(0).probe.median_tv;
  const std::string expected = "layers." + std::to_string(one.sessions[0].layer) + ".ffn.down";
  o.detail << changed.size() << " tensor(s) changed";
  for (const auto& c : changed) o.detail << " " << c;
  o.detail << "; median TV " << median << " over " << report.commits[0].probe.tv_distances.size()
           << " probes (max " << report.commits[0].probe.max_tv << ")";
  o.require(changed == std::vector<std::string>{expected}, "one tensor");
  o.require(report.commits[0].probe.tv_distances.size() == 50, "50 probes");
  o.require(median <= kMedianTvLimit, "median TV");
}

void criterion_determinism(const ModelWeights& pretrained, const fs::path& weights, const fs::path& dir,
                           Outcome& o) {
  bool same_init = true, same_pretrain = true, same_run = true;
  for (const char* tag : {"a", "b"}) {
    run_cli(std::string("init --seed 3 --out ") + q(dir / (std::string("init_") + tag + ".qfw")),
            dir / "init.txt");
    run_cli("pretrain --model " + q(dir / "init_a.qfw") + " --out " +
                q(dir / (std::string("short_") + tag + ".qfw")) + " --steps 20 --batch 4",
            dir / "pre.txt");
    fs::remove_all(dir / (std::string("full_") + tag));
    run_cli("consolidate --model " + q(weights) + " --sessions " + q(fs::path(QF_DATA_DIR) / "scenario_run.json") +
                " --out " + q(dir / (std::string("full_") + tag)),
            dir / "full.txt");
  }
  same_init = slurp(dir / "init_a.qfw") == slurp(dir / "init_b.qfw") && !slurp(dir / "init_a.qfw").empty();
  same_pretrain =
      slurp(dir / "short_a.qfw") == slurp(dir / "short_b.qfw") && !slurp(dir / "short_a.qfw").empty();
  same_run = slurp(dir / "full_a" / "model.qfw") == slurp(dir / "full_b" / "model.qfw") &&
             slurp(dir / "full_a" / "report.json") == slurp(dir / "full_b" / "report.json") &&
             !slurp(dir / "full_a" / "report.json").empty();

  const bool weights_round_trip = deserialize_weights(serialize_weights(pretrained)) == pretrained &&
                                  serialize_weights(load_weights(weights)) == slurp(weights);
  const std::string report_text = slurp(dir / "full_a" / "report.json");
  bool report_round_trip = false;
  try {
    report_round_trip = report_to_json(parse_report_json(report_text)) == report_text;
  } catch (const Error&) {
  }
  const std::string run_text = slurp(fs::path(QF_DATA_DIR) / "scenario_run.json");
  const bool run_round_trip = run_to_json(parse_run_json(run_text)) + "\n" == run_text;

  o.detail << "init " << same_init << ", pretrain " << same_pretrain << ", consolidate " << same_run
           << "; round trips: weights " << weights_round_trip << ", report " << report_round_trip
           << ", run file " << run_round_trip;
  o.require(same_init, "init bytes");
  o.require(same_pretrain, "pretrain bytes");
  o.require(same_run, "consolidation bytes");
  o.require(weights_round_trip && report_round_trip && run_round_trip, "round trips");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  fs::path workdir = "acceptance_work";
  fs::path model_path;
  app.add_option("--workdir", workdir);
  app.add_option("--model", model_path, "reuse pretrained default-recipe weights");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(workdir);

  std::vector<Outcome> out(10);
  const auto guarded = [&](std::size_t id, const std::function<void(Outcome&)>& body) {
    try {
      body(out[id]);
    } catch (const std::exception& e) {
      out[id].require(false, std::string("exception: ") + e.what());
    }
  };

  std::cerr << "fast criteria\n";
  const std::vector<QfProblem> problems = full_rank_instances();
  guarded(1, [&](Outcome& o) { criterion_constraint(problems, o); });
  guarded(2, [&](Outcome& o) { criterion_minimality(problems, o); });
  guarded(3, [&](Outcome& o) { criterion_oracle(problems, o); });
  guarded(4, criterion_noop);
  guarded(6, criterion_testbed);

  RunSpec scenario;
  guarded(5, [&](Outcome& o) {
    scenario = load_run_file(fs::path(QF_DATA_DIR) / "scenario_run.json");
    o.require(scenario == default_scenario(default_corpus()), "checked-in run file is the default scenario");
  });

  std::cerr << "pretraining\n";
  double train_seconds = 0.0;
  std::optional<ModelWeights> pretrained;
  try {
    pretrained = obtain_pretrained(model_path, workdir, train_seconds);
  } catch (const std::exception& e) {
    for (std::size_t id : {4, 5, 7, 8, 9}) out[id].require(false, std::string("pretraining: ") + e.what());
  }
  const fs::path weights = model_path.empty() ? workdir / "pretrained.qfw" : model_path;

  guarded(5, [&](Outcome& o) { criterion_masks(scenario, pretrained ? &*pretrained : nullptr, o); });
  if (pretrained) {
    guarded(4, [&](Outcome& o) { criterion_second_consolidation(*pretrained, scenario.sessions.at(0), o); });
    guarded(7, [&](Outcome& o) { criterion_table(*pretrained, scenario, train_seconds, o); });
    guarded(8, [&](Outcome& o) { criterion_locality(weights, scenario, workdir, o); });
    guarded(9, [&](Outcome& o) { criterion_determinism(*pretrained, weights, workdir, o); });
  }

  const char* names[] = {"",
                         "constraint satisfaction",
                         "minimality",
                         "oracle equivalence",
                         "no-op and idempotence",
                         "mask semantics",
                         "testbed correctness",
                         "continual protocol at toy scale",
                         "locality and retention",
                         "determinism and formats"};
  bool all = true;
  for (std::size_t id = 1; id <= 9; ++id) {
    all = all && out[id].pass;
    std::cout << "criterion " << id << " " << (out[id].pass ? "PASS" : "FAIL") << "  " << names[id] << ": "
              << out[id].detail.str() << "\n";
  }
  return all ? 0 : 1;
}
