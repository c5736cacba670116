#pragma once

// Gradient-based pretraining harness. This only manufactures a testbed that
// can follow instructions in context; consolidation itself never uses it.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "qf/corpus.hpp"
#include "qf/model.hpp"

namespace qf {

struct TrainingExample {
  TokenSeq tokens;
  /// Positions whose next-token prediction is scored; position p predicts
  /// tokens[p + 1].
  std::vector<std::size_t> scored_positions;
};

/// Scores the answer characters and the closing end marker, or every
/// position when `all_positions` is set.
TrainingExample make_training_example(const Episode& e, std::size_t max_seq,
                                      bool all_positions = false);

/// Mean cross-entropy over every scored position in the batch; gradients are
/// accumulated (added) into `grad`, which must share the model's config.
double loss_and_gradient(const ModelWeights& model, std::span<const TrainingExample> batch,
                         ModelWeights& grad);

double mean_loss(const ModelWeights& model, std::span<const TrainingExample> batch);

struct PretrainOptions {
  std::size_t steps = 0;
  double learning_rate = 0.1;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  /// Global gradient-norm clip; 0 disables clipping.
  double grad_clip = 1.0;
  /// Score every next-token prediction instead of only the answer span.
  bool all_positions = false;
};

struct PretrainLog {
  std::vector<double> losses;  // one per step, loss of that step's batch before the update
};

using StepCallback = std::function<void(std::size_t step, double loss)>;

/// Plain SGD: fixed learning rate, no momentum. Batches are drawn uniformly
/// with replacement from `episodes`. On a non-finite loss or gradient the
/// model is left at its last good state and a Divergence error is thrown.
PretrainLog pretrain(ModelWeights& model, const std::vector<Episode>& episodes,
                     const PretrainOptions& options, const StepCallback& on_step = {});

}  // namespace qf
