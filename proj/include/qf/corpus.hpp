#pragma once

// Synthetic fact corpus for pretraining the testbed.
//
// Facts bind a company to a founder and a place. Open-book episodes state a
// fact in the instruction and ask about it, so the answer can be copied from
// context. Closed-book episodes for "known" facts are memorised; closed-book
// questions about fresh companies get a deflecting answer, so the model has
// to tell known companies from unknown ones. Held-out facts never appear in
// training.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qf/tokenizer.hpp"

namespace qf {

struct Fact {
  std::string company;  // 5 letters, capitalised
  std::string founder;  // 2 letters, capitalised
  std::string place;    // 5 letters, capitalised

  friend bool operator==(const Fact&, const Fact&) = default;
};

// Templates. Both founder queries have identical length so that a paraphrase
// keeps every answer position aligned.
std::string founder_instruction(const Fact& f);   // "Qi started Oxino."
std::string founder_query(const Fact& f);         // "Who started Oxino?"
std::string founder_paraphrase(const Fact& f);    // "Who founded Oxino?"
std::string founder_answer(const Fact& f);        // "by Qi"
std::string location_instruction(const Fact& f);  // "Oxino is in Bjing."
std::string location_query(const Fact& f);        // "Where is Oxino?"
std::string location_answer(const Fact& f);       // "in Bjing."
std::string founder_deflection();                 // "by ?"
std::string location_deflection();                // "in ?."

struct Episode {
  std::string instruction;  // empty for closed-book
  std::string query;
  std::string answer;

  bool open_book() const { return !instruction.empty(); }
  friend bool operator==(const Episode&, const Episode&) = default;
};

struct CorpusOptions {
  std::size_t n_facts = 16;
  double known_fraction = 0.5;
  std::size_t open_book_episodes = 6000;
  std::size_t closed_book_repeats = 40;
  /// Closed-book questions about fresh companies, answered with a deflection.
  std::size_t unknown_closed_book = 0;
  /// Always-known facts placed ahead of the random ones.
  std::vector<Fact> anchor_facts;
  /// Names that must never appear anywhere in the corpus.
  std::vector<std::string> reserved_names;
};

struct Corpus {
  std::vector<Fact> known;
  std::vector<Fact> held_out;
  std::vector<Episode> episodes;
};

Corpus synth_corpus(std::uint64_t seed, const CorpusOptions& options);

/// Open-book episodes over freshly drawn names, disjoint from `avoid`.
std::vector<Episode> fresh_open_book_episodes(std::uint64_t seed, std::size_t count,
                                              const std::vector<std::string>& avoid);

/// One corpus line: the chat layout followed by "<END>".
std::string episode_line(const Episode& e);
Episode parse_episode_line(const std::string& line);

void save_corpus(const std::vector<Episode>& episodes, const std::filesystem::path& path);
std::vector<Episode> load_corpus(const std::filesystem::path& path);

}  // namespace qf
