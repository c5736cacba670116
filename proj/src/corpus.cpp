#include "qf/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "qf/errors.hpp"
#include "qf/tensor.hpp"

namespace qf {

std::string founder_instruction(const Fact& f) { return f.founder + " started " + f.company + "."; }
std::string founder_query(const Fact& f) { return "Who started " + f.company + "?"; }
std::string founder_paraphrase(const Fact& f) { return "Who founded " + f.company + "?"; }
std::string founder_answer(const Fact& f) { return "by " + f.founder; }
std::string location_instruction(const Fact& f) { return f.company + " is in " + f.place + "."; }
std::string location_query(const Fact& f) { return "Where is " + f.company + "?"; }
std::string location_answer(const Fact& f) { return "in " + f.place + "."; }
std::string founder_deflection() { return "by ?"; }
std::string location_deflection() { return "in ?."; }

namespace {

std::string random_name(Rng& rng, std::size_t length) {
  std::string s(length, ' ');
  s[0] = static_cast<char>('A' + rng.below(26));
  for (std::size_t i = 1; i < length; ++i) s[i] = static_cast<char>('a' + rng.below(26));
  return s;
}

class NameSource {
 public:
  NameSource(Rng& rng, const std::vector<std::string>& reserved)
      : rng_(rng), used_(reserved.begin(), reserved.end()) {}

  // Unique draws are remembered; non-unique draws only avoid remembered names.
  std::string draw(std::size_t length, bool unique) {
    for (;;) {
      std::string s = random_name(rng_, length);
      if (used_.contains(s)) continue;
      if (unique) used_.insert(s);
      return s;
    }
  }

 private:
  Rng& rng_;
  std::set<std::string> used_;
};

Fact draw_fact(NameSource& names, bool unique) {
  Fact f;
  f.company = names.draw(5, unique);
  f.founder = names.draw(2, unique);
  f.place = names.draw(5, unique);
  return f;
}

void push_open_book(std::vector<Episode>& out, const Fact& f, std::size_t kind) {
  switch (kind % 3) {
    case 0:
      out.push_back({founder_instruction(f), founder_query(f), founder_answer(f)});
      break;
    case 1:
      out.push_back({founder_instruction(f), founder_paraphrase(f), founder_answer(f)});
      break;
    default:
      out.push_back({location_instruction(f), location_query(f), location_answer(f)});
      break;
  }
}

}  // namespace

std::vector<Episode> fresh_open_book_episodes(std::uint64_t seed, std::size_t count,
                                              const std::vector<std::string>& avoid) {
  Rng rng(seed);
  NameSource names(rng, avoid);
  std::vector<Episode> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) push_open_book(out, draw_fact(names, false), rng.below(3));
  return out;
}

Corpus synth_corpus(std::uint64_t seed, const CorpusOptions& options) {
  if (options.n_facts == 0) fail(ErrorKind::Contract, "synth_corpus needs at least one fact");
  Rng rng(seed);
  std::vector<std::string> reserved = options.reserved_names;
  for (const Fact& f : options.anchor_facts) {
    reserved.insert(reserved.end(), {f.company, f.founder, f.place});
  }
  NameSource names(rng, reserved);

  Corpus corpus;
  corpus.known = options.anchor_facts;
  const auto n_known = static_cast<std::size_t>(
      std::clamp(options.known_fraction, 0.0, 1.0) * static_cast<double>(options.n_facts) + 0.5);
  for (std::size_t i = 0; i < options.n_facts; ++i) {
    (i < n_known ? corpus.known : corpus.held_out).push_back(draw_fact(names, true));
  }

  for (std::size_t r = 0; r < options.closed_book_repeats; ++r) {
    for (const Fact& f : corpus.known) {
      corpus.episodes.push_back({"", founder_query(f), founder_answer(f)});
      corpus.episodes.push_back({"", founder_paraphrase(f), founder_answer(f)});
      corpus.episodes.push_back({"", location_query(f), location_answer(f)});
    }
  }
  for (const Fact& f : corpus.known) {
    for (std::size_t kind = 0; kind < 3; ++kind) push_open_book(corpus.episodes, f, kind);
  }
  // Fresh names for the copying episodes; fact names are already reserved.
  for (std::size_t i = 0; i < options.open_book_episodes; ++i) {
    push_open_book(corpus.episodes, draw_fact(names, false), rng.below(3));
  }
  for (std::size_t i = 0; i < options.unknown_closed_book; ++i) {
    const Fact f = draw_fact(names, false);
    switch (rng.below(3)) {
      case 0:
        corpus.episodes.push_back({"", founder_query(f), founder_deflection()});
        break;
      case 1:
        corpus.episodes.push_back({"", founder_paraphrase(f), founder_deflection()});
        break;
      default:
        corpus.episodes.push_back({"", location_query(f), location_deflection()});
        break;
    }
  }

  // Deterministic Fisher-Yates so file order does not cluster by kind.
  for (std::size_t i = corpus.episodes.size(); i > 1; --i) {
    std::swap(corpus.episodes[i - 1], corpus.episodes[rng.below(i)]);
  }
  return corpus;
}

std::string episode_line(const Episode& e) {
  std::string line;
  if (!e.instruction.empty()) line += "<SYS>" + e.instruction;
  line += "<USER>" + e.query + "<ASST>" + e.answer + "<END>";
  return line;
}

Episode parse_episode_line(const std::string& line) {
  auto bad = [&] { fail(ErrorKind::Io, "malformed corpus line: " + line); };
  Episode e;
  std::size_t pos = 0;
  if (line.starts_with("<SYS>")) {
    const std::size_t user = line.find("<USER>");
    if (user == std::string::npos) bad();
    e.instruction = line.substr(5, user - 5);
    pos = user;
  }
  if (line.compare(pos, 6, "<USER>") != 0) bad();
  const std::size_t asst = line.find("<ASST>", pos);
  if (asst == std::string::npos || !line.ends_with("<END>")) bad();
  e.query = line.substr(pos + 6, asst - pos - 6);
  e.answer = line.substr(asst + 6, line.size() - 5 - asst - 6);
  // Validates the alphabet.
  tokenize(e.instruction + e.query + e.answer);
  return e;
}

void save_corpus(const std::vector<Episode>& episodes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  for (const Episode& e : episodes) out << episode_line(e) << '\n';
  if (!out) fail(ErrorKind::Io, "failed writing " + path.string());
}

std::vector<Episode> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::vector<Episode> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out.push_back(parse_episode_line(line));
  }
  return out;
}

}  // namespace qf
