#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "selmask/model.hpp"
#include "selmask/optimizer.hpp"

namespace selmask {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  /// Step budget for step-driven loops (pre-training); 0 for epoch loops.
  std::size_t steps = 0;
  /// Per-class loss multipliers; empty means all ones.
  std::vector<double> label_weights;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;

  void validate() const;
};

/// One optimizer step on `batch` for `head`. Dropout masks derive from
/// (config.seed, optimizer step) so a run is reproducible and resumable.
/// Throws NumericError naming the batch if the loss is not finite.
double train_step(Parameters& params, OptimizerState& optimizer, const Batch& batch, Head head,
                  const TrainConfig& config);

/// Deterministic permutation of [0, n) for the given epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

/// Runs f(i) for i in [0, n) on up to `workers` threads. f must only write
/// to slot i of pre-sized outputs.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& f);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_accuracy = 0.0;
};

struct ClassifierFit {
  Parameters params;
  double best_dev_accuracy = 0.0;
  /// 1-based epoch whose parameters were kept.
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;
};

double accuracy(const Parameters& params, std::span<const SequenceExample> data, std::size_t workers = 1);

/// Epoch loop over shuffled training data, dev accuracy after every epoch,
/// keeping the best epoch (ties go to the earlier epoch).
ClassifierFit fit_sequence_classifier(Parameters init, std::span<const SequenceExample> train,
                                      std::span<const SequenceExample> dev, const TrainConfig& config,
                                      std::size_t workers = 1);

}  // namespace selmask
