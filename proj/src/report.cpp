#include "qf/report.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "qf/errors.hpp"

namespace qf {

using nlohmann::json;

namespace {

template <typename F>
auto parsing(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, "bad " + what + ": " + e.what());
  }
}

Session session_from(const json& j) {
  Session s;
  s.instruction = j.at("instruction").get<std::string>();
  s.query = j.at("query").get<std::string>();
  s.answer = j.at("answer").get<std::string>();
  s.significance = j.at("significance").get<std::vector<int>>();
  const long long layer = j.at("layer").get<long long>();
  if (layer < 0) fail(ErrorKind::Contract, "session layer must be non-negative");
  s.layer = static_cast<std::size_t>(layer);
  if (j.contains("paraphrases")) s.paraphrases = j.at("paraphrases").get<std::vector<std::string>>();
  return s;
}

json session_json(const Session& s) {
  json j = {{"instruction", s.instruction}, {"query", s.query},   {"answer", s.answer},
            {"significance", s.significance}, {"layer", s.layer}};
  if (!s.paraphrases.empty()) j["paraphrases"] = s.paraphrases;
  return j;
}

json probe_json(const ForgettingProbe& p) {
  return {{"prompts", p.probe_prompts},
          {"tv", p.tv_distances},
          {"max_tv", p.max_tv},
          {"median_tv", p.median_tv}};
}

ForgettingProbe probe_from(const json& j) {
  ForgettingProbe p;
  p.probe_prompts = j.at("prompts").get<std::vector<std::string>>();
  p.tv_distances = j.at("tv").get<std::vector<double>>();
  p.max_tv = j.at("max_tv").get<double>();
  p.median_tv = j.at("median_tv").get<double>();
  return p;
}

}  // namespace

Session parse_session_json(const std::string& text) {
  return parsing("session JSON", [&] { return session_from(json::parse(text)); });
}

std::string session_to_json(const Session& s) { return session_json(s).dump(2); }

RunSpec parse_run_json(const std::string& text) {
  return parsing("run JSON", [&] {
    const json j = json::parse(text);
    RunSpec spec;
    const json& sessions = j.is_array() ? j : j.at("sessions");
    for (const json& s : sessions) spec.sessions.push_back(session_from(s));
    if (j.is_object()) {
      if (j.contains("probes")) spec.probes = j.at("probes").get<std::vector<std::string>>();
      if (j.contains("retention")) {
        for (const json& r : j.at("retention")) {
          spec.retention.push_back({r.at("query").get<std::string>(), r.at("answer").get<std::string>()});
        }
      }
    }
    return spec;
  });
}

std::string run_to_json(const RunSpec& spec) {
  json sessions = json::array();
  for (const Session& s : spec.sessions) sessions.push_back(session_json(s));
  json retention = json::array();
  for (const RetentionCheck& r : spec.retention) {
    retention.push_back({{"query", r.query}, {"answer", r.answer}});
  }
  return json{{"sessions", sessions}, {"probes", spec.probes}, {"retention", retention}}.dump(2);
}

RunSpec load_run_file(const std::filesystem::path& path) {
  return parse_run_json(read_text_file(path));
}

std::string report_to_json(const RunReport& report) {
  json steps = json::array();
  for (const ProtocolStep& st : report.steps) {
    steps.push_back({{"index", st.index},
                     {"parameters", st.parameters},
                     {"kind", step_kind_name(st.kind)},
                     {"session", st.session},
                     {"instruction", st.instruction},
                     {"query", st.query},
                     {"expected", st.expected},
                     {"answer", st.answer},
                     {"expect_match", st.expect_match},
                     {"passed", st.passed}});
  }
  json commits = json::array();
  for (const CommitRecord& c : report.commits) {
    commits.push_back({{"session", c.session},
                       {"layer", c.layer},
                       {"parameters", c.parameters},
                       {"ok", c.ok},
                       {"error", c.error},
                       {"delta_fro", c.delta_fro},
                       {"residual_before", c.residual_before},
                       {"residual_after", c.residual_after},
                       {"gram_condition", c.gram_condition},
                       {"effective_rank", c.effective_rank},
                       {"tokens_used", c.tokens_used},
                       {"answer_before", c.answer_before},
                       {"answer_instructed", c.answer_instructed},
                       {"answer_after", c.answer_after},
                       {"probe", probe_json(c.probe)}});
  }
  return json{{"steps", steps},
              {"commits", commits},
              {"passed", report.passed},
              {"failed", report.failed}}
      .dump(2);
}

RunReport parse_report_json(const std::string& text) {
  return parsing("report JSON", [&] {
    const json j = json::parse(text);
    RunReport r;
    for (const json& s : j.at("steps")) {
      ProtocolStep st;
      st.index = s.at("index").get<std::size_t>();
      st.parameters = s.at("parameters").get<std::string>();
      st.kind = parse_step_kind(s.at("kind").get<std::string>());
      st.session = s.at("session").get<std::size_t>();
      st.instruction = s.at("instruction").get<std::string>();
      st.query = s.at("query").get<std::string>();
      st.expected = s.at("expected").get<std::string>();
      st.answer = s.at("answer").get<std::string>();
      st.expect_match = s.at("expect_match").get<bool>();
      st.passed = s.at("passed").get<bool>();
      r.steps.push_back(std::move(st));
    }
    for (const json& c : j.at("commits")) {
      CommitRecord rec;
      rec.session = c.at("session").get<std::size_t>();
      rec.layer = c.at("layer").get<std::size_t>();
      rec.parameters = c.at("parameters").get<std::string>();
      rec.ok = c.at("ok").get<bool>();
      rec.error = c.at("error").get<std::string>();
      rec.delta_fro = c.at("delta_fro").get<double>();
      rec.residual_before = c.at("residual_before").get<double>();
      rec.residual_after = c.at("residual_after").get<double>();
      rec.gram_condition = c.at("gram_condition").get<double>();
      rec.effective_rank = c.at("effective_rank").get<std::size_t>();
      rec.tokens_used = c.at("tokens_used").get<std::size_t>();
      rec.answer_before = c.at("answer_before").get<std::string>();
      rec.answer_instructed = c.at("answer_instructed").get<std::string>();
      rec.answer_after = c.at("answer_after").get<std::string>();
      rec.probe = probe_from(c.at("probe"));
      r.commits.push_back(std::move(rec));
    }
    r.passed = j.at("passed").get<std::size_t>();
    r.failed = j.at("failed").get<std::size_t>();
    return r;
  });
}

std::string render_report_table(const RunReport& report) {
  auto show = [](const std::string& s) { return s.empty() ? std::string("none") : s; };
  std::size_t wi = 11, wq = 5, wa = 6, we = 8;
  for (const ProtocolStep& st : report.steps) {
    wi = std::max(wi, show(st.instruction).size());
    wq = std::max(wq, st.query.size());
    wa = std::max(wa, st.answer.size());
    we = std::max(we, st.expected.size() + 1);
  }
  std::ostringstream os;
  auto row = [&](const std::string& n, const std::string& p, const std::string& i,
                 const std::string& q, const std::string& a, const std::string& e,
                 const std::string& k, const std::string& r) {
    os << std::left << std::setw(4) << n << std::setw(6) << p << std::setw(wi + 2) << i
       << std::setw(wq + 2) << q << std::setw(wa + 2) << a << std::setw(we + 2) << e
       << std::setw(20) << k << r << '\n';
  };
  row("#", "W", "instruction", "query", "answer", "expected", "check", "result");
  // Each commit is followed by exactly one "learned" step.
  std::size_t next_commit = 0;
  for (const ProtocolStep& st : report.steps) {
    if (st.kind == StepKind::Learned && next_commit < report.commits.size()) {
      const CommitRecord& c = report.commits[next_commit++];
      os << "-- commit session " << c.session + 1 << " at layer " << c.layer;
      if (c.ok) {
        os << ": |dW|=" << c.delta_fro << " residual " << c.residual_before << " -> "
           << c.residual_after << ", median probe TV " << c.probe.median_tv;
      } else {
        os << ": failed (" << c.error << ")";
      }
      os << '\n';
    }
    row(std::to_string(st.index), st.parameters, show(st.instruction), st.query, st.answer,
        (st.expect_match ? "" : "!") + st.expected, step_kind_name(st.kind),
        st.passed ? "pass" : "FAIL");
  }
  for (; next_commit < report.commits.size(); ++next_commit) {
    const CommitRecord& c = report.commits[next_commit];
    os << "-- commit session " << c.session + 1 << " at layer " << c.layer << ": "
       << (c.ok ? "ok" : "failed (" + c.error + ")") << '\n';
  }
  os << report.passed << " passed, " << report.failed << " failed\n";
  return os.str();
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) fail(ErrorKind::Io, "failed writing " + path.string());
}

}  // namespace qf
