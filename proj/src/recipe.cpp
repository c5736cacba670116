#include "qf/recipe.hpp"

namespace qf {

namespace {
constexpr std::uint64_t kProbeSeed = 777;
constexpr std::uint64_t kCompetenceSeed = 12345;
}  // namespace

Fact scenario_fact() { return {"Oxino", "Qi", "Bjing"}; }
Fact anchor_fact() { return {"Aliba", "Ma", "Hzhou"}; }

Recipe default_recipe() {
  Recipe r;
  r.corpus.n_facts = 200;
  r.corpus.known_fraction = 0.5;
  r.corpus.open_book_episodes = 6000;
  r.corpus.closed_book_repeats = 40;
  r.corpus.anchor_facts = {anchor_fact()};
  const Fact f = scenario_fact();
  r.corpus.reserved_names = {f.company, f.founder, f.place};
  r.pretrain.steps = 14000;
  r.pretrain.learning_rate = 0.5;
  r.pretrain.batch_size = 16;
  r.pretrain.seed = 0;
  r.pretrain.grad_clip = 1.0;
  r.pretrain.all_positions = true;
  return r;
}

Corpus default_corpus() {
  const Recipe r = default_recipe();
  return synth_corpus(r.corpus_seed, r.corpus);
}

std::vector<Session> scenario_sessions(std::size_t founder_layer, std::size_t location_layer) {
  const Fact f = scenario_fact();
  Session founder{founder_instruction(f), founder_query(f), founder_answer(f), {0, 1, 1, 1, 1},
                  founder_layer, {founder_paraphrase(f)}};
  Session location{location_instruction(f), location_query(f), location_answer(f),
                   std::vector<int>(tokenize(location_answer(f)).size(), 1), location_layer, {}};
  return {founder, location};
}

std::vector<std::string> unrelated_probes(const Corpus& corpus, std::size_t count) {
  const Fact anchor = anchor_fact();
  const Fact f = scenario_fact();
  std::vector<Fact> known;
  for (const Fact& k : corpus.known) {
    if (!(k == anchor)) known.push_back(k);
  }
  const std::vector<Episode> fresh =
      fresh_open_book_episodes(kProbeSeed, count, {f.company, f.founder, f.place});
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i) {
    if (i % 2 == 0 || known.empty()) {
      out.push_back(episode_line(fresh[i]));
    } else {
      const Fact& k = known[(i / 2) % known.size()];
      const Episode e = (i / 2) % 2 == 0 ? Episode{"", founder_query(k), founder_answer(k)}
                                         : Episode{"", location_query(k), location_answer(k)};
      out.push_back(episode_line(e));
    }
  }
  return out;
}

RunSpec default_scenario(const Corpus& corpus) {
  const Fact anchor = anchor_fact();
  RunSpec spec;
  spec.sessions = scenario_sessions(3, 1);
  spec.probes = unrelated_probes(corpus, 50);
  spec.retention = {{founder_query(anchor), founder_answer(anchor)}};
  return spec;
}

double exact_match_rate(const ModelWeights& model, const std::vector<Episode>& episodes,
                        std::size_t max_new) {
  if (episodes.empty()) return 0.0;
  std::size_t hits = 0;
  for (const Episode& e : episodes) {
    hits += generate_instructed_answer(model, e.instruction, e.query, max_new) == e.answer;
  }
  return static_cast<double>(hits) / static_cast<double>(episodes.size());
}

std::vector<Episode> competence_episodes(std::size_t count) {
  const Fact f = scenario_fact();
  const Fact a = anchor_fact();
  return fresh_open_book_episodes(kCompetenceSeed, count,
                                  {f.company, f.founder, f.place, a.company, a.founder, a.place});
}

}  // namespace qf
