#pragma once

#include "qf/model.hpp"
#include "qf/solver.hpp"

namespace qf::testing {

// Random problem with T <= d_in so the Gram matrix is generically full rank.
inline QfProblem random_problem(Rng& rng, std::size_t d_out, std::size_t d_in, std::size_t t) {
  return {rng.normal_matrix(d_out, d_in), rng.normal_matrix(d_in, t), rng.normal_matrix(d_out, t),
          rng.normal_matrix(d_in, t), rng.normal_matrix(d_out, t)};
}

// u' with exactly `rank` independent columns out of t.
inline Matrix rank_deficient(Rng& rng, std::size_t d_in, std::size_t t, std::size_t rank) {
  return matmul(rng.normal_matrix(d_in, rank), rng.normal_matrix(rank, t));
}

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 12;
  c.max_seq = 64;
  return c;
}

inline ModelWeights tiny_model(std::uint64_t seed, double stddev = 0.3) {
  Rng rng(seed);
  return ModelWeights::random_init(tiny_config(), rng, stddev);
}

}  // namespace qf::testing
