#pragma once

// The default desk-scale recipe: testbed shape, corpus, pretraining schedule
// and the two-round scenario (founder, then location of one new company)
// that the checked-in run file encodes.

#include <cstdint>

#include "qf/corpus.hpp"
#include "qf/model.hpp"
#include "qf/session.hpp"
#include "qf/train.hpp"

namespace qf {

struct Recipe {
  ModelConfig config;
  std::uint64_t init_seed = 0;
  std::uint64_t corpus_seed = 0;
  CorpusOptions corpus;
  PretrainOptions pretrain;
};

Recipe default_recipe();

/// The company the scenario teaches. Its names are reserved in the corpus.
Fact scenario_fact();
/// A fact every default corpus contains, used as the retention check.
Fact anchor_fact();

/// Session 1 teaches the founder, session 2 the location.
std::vector<Session> scenario_sessions(std::size_t founder_layer, std::size_t location_layer);

/// Unrelated probe prompts: fresh open-book episodes plus closed-book
/// episodes of known facts other than the anchor, alternating.
std::vector<std::string> unrelated_probes(const Corpus& corpus, std::size_t count);

/// Full run file for the scenario on a model pretrained with `corpus`.
RunSpec default_scenario(const Corpus& corpus);

Corpus default_corpus();

/// Fraction of episodes whose greedy answer matches exactly.
double exact_match_rate(const ModelWeights& model, const std::vector<Episode>& episodes,
                        std::size_t max_new = kDefaultMaxNew);

/// Held-out open-book episodes for the competence gate.
std::vector<Episode> competence_episodes(std::size_t count);

}  // namespace qf
