// qf: model lifecycle, consolidation runs and diagnostics.
//
// Exit codes: 0 success, 1 an expectation failed, 2 usage or contract error,
// 3 I/O error.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "qf/errors.hpp"
#include "qf/recipe.hpp"
#include "qf/report.hpp"

namespace fs = std::filesystem;
using namespace qf;

namespace {

enum class LogLevel { Quiet = 0, Info = 1, Debug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("QF_LOG");
  if (env == nullptr) return LogLevel::Info;
  const std::string v = env;
  if (v == "quiet" || v == "0" || v == "error") return LogLevel::Quiet;
  if (v == "debug" || v == "2") return LogLevel::Debug;
  return LogLevel::Info;
}

std::ostream& log(LogLevel at) {
  static std::ostringstream sink;
  if (log_level() < at) {
    sink.str("");
    return sink;
  }
  return std::cerr << "qf: ";
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Io: return 3;
    case ErrorKind::Degenerate:
    case ErrorKind::Divergence: return 1;
    default: return 2;
  }
}

int cmd_init(const ModelConfig& config, std::uint64_t seed, const fs::path& out) {
  config.validate();
  Rng rng(seed);
  save_weights(ModelWeights::random_init(config, rng), out);
  log(LogLevel::Info) << "wrote " << out << "\n";
  return 0;
}

struct PretrainArgs {
  fs::path model, out, loss_log, corpus_in, corpus_out;
  std::size_t steps = default_recipe().pretrain.steps;
  double lr = default_recipe().pretrain.learning_rate;
  std::size_t batch = default_recipe().pretrain.batch_size;
  double clip = default_recipe().pretrain.grad_clip;
  std::uint64_t seed = default_recipe().pretrain.seed;
  std::uint64_t corpus_seed = default_recipe().corpus_seed;
  std::size_t facts = default_recipe().corpus.n_facts;
  bool answer_only = false;
};

int cmd_pretrain(const PretrainArgs& a) {
  ModelWeights model = load_weights(a.model);
  std::vector<Episode> episodes;
  if (!a.corpus_in.empty()) {
    episodes = load_corpus(a.corpus_in);
  } else {
    CorpusOptions opts = default_recipe().corpus;
    opts.n_facts = a.facts;
    episodes = synth_corpus(a.corpus_seed, opts).episodes;
  }
  if (!a.corpus_out.empty()) save_corpus(episodes, a.corpus_out);
  PretrainOptions po;
  po.steps = a.steps;
  po.learning_rate = a.lr;
  po.batch_size = a.batch;
  po.seed = a.seed;
  po.grad_clip = a.clip;
  po.all_positions = !a.answer_only;

  const fs::path log_path = a.loss_log.empty() ? fs::path(a.out.string() + ".loss.csv") : a.loss_log;
  std::ofstream csv(log_path, std::ios::trunc);
  if (!csv) fail(ErrorKind::Io, "cannot open " + log_path.string());
  csv << "step,loss\n";
  csv << std::setprecision(17);
  const auto on_step = [&](std::size_t step, double loss) {
    csv << step << ',' << loss << '\n';
    if (step % 500 == 0) log(LogLevel::Info) << "step " << step << " loss " << loss << "\n";
  };
  try {
    pretrain(model, episodes, po, on_step);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Divergence) throw;
    save_weights(model, a.out);
    log(LogLevel::Quiet) << e.what() << "; last good weights written to " << a.out << "\n";
    return 1;
  }
  if (!csv) fail(ErrorKind::Io, "failed writing " + log_path.string());
  save_weights(model, a.out);
  log(LogLevel::Info) << "wrote " << a.out << " and " << log_path << "\n";
  return 0;
}

struct ConsolidateArgs {
  fs::path model, sessions, out;
  double rel_tol = kDefaultRelTol;
  bool dry_run = false;
  long long layer = -1;
  std::size_t max_new = kDefaultMaxNew;
};

void check_rel_tol(double rel_tol) {
  if (!(rel_tol > 0.0 && rel_tol < 1.0)) fail(ErrorKind::Contract, "--rel-tol must lie in (0, 1)");
}

RunSpec load_spec(const fs::path& path, long long layer) {
  RunSpec spec = load_run_file(path);
  if (layer >= 0) {
    for (Session& s : spec.sessions) s.layer = static_cast<std::size_t>(layer);
  }
  return spec;
}

int cmd_consolidate(const ConsolidateArgs& a) {
  check_rel_tol(a.rel_tol);
  ModelWeights model = load_weights(a.model);
  const RunSpec spec = load_spec(a.sessions, a.layer);
  fs::create_directories(a.out);
  const RunReport report = continual_run(model, spec, a.dry_run, a.rel_tol, a.max_new);
  write_text_file(a.out / "report.json", report_to_json(report));
  const std::string table = render_report_table(report);
  write_text_file(a.out / "report.txt", table);
  if (!a.dry_run) save_weights(model, a.out / "model.qfw");
  std::cout << table;
  return report.all_passed() ? 0 : 1;
}

int cmd_infer(const fs::path& model_path, const std::string& query,
              const std::string& instruction, std::size_t max_new) {
  const ModelWeights model = load_weights(model_path);
  std::cout << generate_instructed_answer(model, instruction, query, max_new) << "\n";
  return 0;
}

int cmd_diff(const fs::path& a_path, const fs::path& b_path) {
  const ModelWeights a = load_weights(a_path);
  const ModelWeights b = load_weights(b_path);
  if (!(a.config == b.config)) fail(ErrorKind::Contract, "weight files have different configs");
  const auto ta = a.tensors();
  const auto tb = b.tensors();
  std::size_t changed = 0;
  std::cout << "tensor,frobenius,changed\n" << std::setprecision(17);
  for (std::size_t i = 0; i < ta.size(); ++i) {
    const bool differs = !(*ta[i].tensor == *tb[i].tensor);
    const double norm = differs ? frobenius_norm(*ta[i].tensor - *tb[i].tensor) : 0.0;
    changed += differs;
    std::cout << ta[i].name << ',' << norm << ',' << (differs ? 1 : 0) << '\n';
  }
  log(LogLevel::Info) << changed << " of " << ta.size() << " tensors differ\n";
  return 0;
}

int cmd_layer_sweep(const ConsolidateArgs& a) {
  check_rel_tol(a.rel_tol);
  const ModelWeights model = load_weights(a.model);
  const RunSpec spec = load_spec(a.sessions, -1);
  if (spec.sessions.empty()) fail(ErrorKind::Contract, "run file has no sessions");
  std::ofstream csv(a.out, std::ios::trunc);
  if (!csv) fail(ErrorKind::Io, "cannot open " + a.out.string());
  csv << "layer,delta_fro,residual,correct,median_tv,residual_before\n" << std::setprecision(17);
  for (std::size_t layer = 0; layer < model.config.n_layers; ++layer) {
    Session s = spec.sessions.front();
    s.layer = layer;
    try {
      ModelWeights scratch = model;
      const ConsolidationResult dry = consolidate(scratch, s, true, a.rel_tol, a.max_new);
      const ConsolidationResult r = consolidate(scratch, s, false, a.rel_tol, a.max_new);
      const ForgettingProbe probe = forgetting_probe(model, scratch, spec.probes);
      csv << layer << ',' << r.report.delta_fro << ',' << r.report.residual_after << ','
          << (r.answer_after == s.answer ? 1 : 0) << ',' << probe.median_tv << ','
          << dry.report.residual_before << '\n';
      log(LogLevel::Info) << "layer " << layer << ": " << r.answer_after << "\n";
    } catch (const Error& e) {
      log(LogLevel::Quiet) << "layer " << layer << ": " << e.what() << "\n";
      csv << layer << ",nan,nan,0,nan,nan\n";
    }
  }
  if (!csv) fail(ErrorKind::Io, "failed writing " + a.out.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Closed-form knowledge consolidation on a toy transformer"};
  app.require_subcommand(1);

  ModelConfig config;
  std::uint64_t init_seed = 0;
  fs::path init_out;
  auto* init = app.add_subcommand("init", "write randomly initialised weights");
  init->add_option("--out", init_out, "weight file")->required();
  init->add_option("--seed", init_seed);
  init->add_option("--layers", config.n_layers);
  init->add_option("--d-model", config.d_model);
  init->add_option("--heads", config.n_heads);
  init->add_option("--d-ff", config.d_ff);
  init->add_option("--max-seq", config.max_seq);

  PretrainArgs pa;
  auto* pre = app.add_subcommand("pretrain", "train on the synthetic fact corpus");
  pre->add_option("--model", pa.model, "input weights")->required();
  pre->add_option("--out", pa.out, "output weights")->required();
  pre->add_option("--steps", pa.steps);
  pre->add_option("--lr", pa.lr);
  pre->add_option("--batch", pa.batch);
  pre->add_option("--clip", pa.clip, "global gradient-norm clip, 0 disables");
  pre->add_option("--seed", pa.seed, "batch sampling seed");
  pre->add_option("--corpus-seed", pa.corpus_seed);
  pre->add_option("--facts", pa.facts);
  pre->add_option("--corpus", pa.corpus_in, "train on this corpus file instead");
  pre->add_option("--corpus-out", pa.corpus_out, "save the corpus used");
  pre->add_option("--loss-log", pa.loss_log, "CSV of step,loss (default <out>.loss.csv)");
  pre->add_flag("--answer-only", pa.answer_only, "score only the answer span");

  ConsolidateArgs ca;
  std::uint64_t unused_seed = 0;
  auto* con = app.add_subcommand("consolidate", "run the continual protocol over a run file");
  con->add_option("--model", ca.model)->required();
  con->add_option("--sessions", ca.sessions)->required();
  con->add_option("--out", ca.out, "output directory")->required();
  con->add_option("--seed", unused_seed, "accepted for manifest symmetry; the run is deterministic");
  con->add_option("--rel-tol", ca.rel_tol);
  con->add_flag("--dry-run", ca.dry_run, "write the report but no weights");
  con->add_option("--layer", ca.layer, "override every session's layer");
  con->add_option("--max-new", ca.max_new);

  fs::path infer_model;
  std::string query, instruction;
  std::size_t infer_max_new = kDefaultMaxNew;
  auto* inf = app.add_subcommand("infer", "greedy answer to a query");
  inf->add_option("--model", infer_model)->required();
  inf->add_option("query", query)->required();
  inf->add_option("--instruction", instruction, "answer open-book with this instruction");
  inf->add_option("--max-new", infer_max_new);

  fs::path diff_a, diff_b;
  auto* dif = app.add_subcommand("diff", "per-tensor Frobenius norm of the difference");
  dif->add_option("a", diff_a)->required();
  dif->add_option("b", diff_b)->required();

  ConsolidateArgs sa;
  auto* swp = app.add_subcommand("layer-sweep", "try the first session at every layer");
  swp->add_option("--model", sa.model)->required();
  swp->add_option("--sessions", sa.sessions)->required();
  swp->add_option("--out", sa.out, "CSV path")->required();
  swp->add_option("--rel-tol", sa.rel_tol);
  swp->add_option("--max-new", sa.max_new);

  fs::path scenario_out;
  auto* scn = app.add_subcommand("scenario", "write the default two-round run file");
  scn->add_option("--out", scenario_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*init) return cmd_init(config, init_seed, init_out);
    if (*pre) return cmd_pretrain(pa);
    if (*con) return cmd_consolidate(ca);
    if (*inf) return cmd_infer(infer_model, query, instruction, infer_max_new);
    if (*dif) return cmd_diff(diff_a, diff_b);
    if (*swp) return cmd_layer_sweep(sa);
    if (*scn) {
      write_text_file(scenario_out, run_to_json(default_scenario(default_corpus())) + "\n");
      return 0;
    }
  } catch (const Error& e) {
    log(LogLevel::Quiet) << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    log(LogLevel::Quiet) << e.what() << "\n";
    return 3;
  }
  return 2;
}
