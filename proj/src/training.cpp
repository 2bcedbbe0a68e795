#include "selmask/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include <spdlog/spdlog.h>

#include "selmask/error.hpp"
#include "selmask/rng.hpp"

namespace selmask {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  for (double w : label_weights)
    if (!(w > 0.0)) throw ConfigError("train: label weights must be strictly positive");
}

double train_step(Parameters& params, OptimizerState& optimizer, const Batch& batch, Head head,
                  const TrainConfig& config) {
  if (batch.size() == 0) throw std::invalid_argument("train_step: empty batch " + batch.tag);
  if (batch.head() != head)
    throw std::invalid_argument("train_step: batch " + batch.tag + " holds " + std::string(to_string(batch.head())) +
                                " examples but head is " + std::string(to_string(head)));
  Parameters grads = params.zeros_like();
  const std::uint64_t dropout_seed = derive_seed({config.seed, optimizer.step, 0xD80Fu});
  const double loss = loss_and_gradient(params, batch, config.label_weights, &grads, &dropout_seed);
  if (!std::isfinite(loss)) throw NumericError("non-finite loss " + std::to_string(loss) + " in batch " + batch.tag);
  adam_update(params, grads, optimizer, AdamConfig{.learning_rate = config.learning_rate});
  return loss;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed({seed, epoch, 0x5EEDu}));
  std::shuffle(order.begin(), order.end(), rng.engine());
  return order;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& f) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) f(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

double accuracy(const Parameters& params, std::span<const SequenceExample> data, std::size_t workers) {
  if (data.empty()) return 0.0;
  std::vector<char> correct(data.size(), 0);
  parallel_for(data.size(), workers, [&](std::size_t i) {
    auto probs = seq_classify(params, data[i].ids);
    auto best = std::max_element(probs.begin(), probs.end()) - probs.begin();
    correct[i] = best == data[i].label;
  });
  return static_cast<double>(std::count(correct.begin(), correct.end(), 1)) / static_cast<double>(data.size());
}

ClassifierFit fit_sequence_classifier(Parameters init, std::span<const SequenceExample> train,
                                      std::span<const SequenceExample> dev, const TrainConfig& config,
                                      std::size_t workers) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("fit_sequence_classifier: empty training set");
  ClassifierFit fit;
  fit.params = init;
  fit.best_dev_accuracy = -1.0;
  Parameters params = std::move(init);
  OptimizerState opt = make_optimizer_state(params);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto order = epoch_order(train.size(), config.seed, epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::vector<SequenceExample> items;
      for (std::size_t k = start; k < std::min(order.size(), start + config.batch_size); ++k)
        items.push_back(train[order[k]]);
      Batch batch{std::move(items), "epoch " + std::to_string(epoch) + " offset " + std::to_string(start)};
      loss_sum += train_step(params, opt, batch, Head::kSequence, config);
      ++batches;
    }
    const double dev_acc = accuracy(params, dev, workers);
    fit.history.push_back({epoch, loss_sum / static_cast<double>(batches), dev_acc});
    spdlog::debug("classifier epoch {} loss {:.4f} dev_acc {:.4f}", epoch, loss_sum / static_cast<double>(batches), dev_acc);
    if (dev_acc > fit.best_dev_accuracy) {
      fit.best_dev_accuracy = dev_acc;
      fit.best_epoch = epoch;
      fit.params = params;
    }
  }
  if (fit.best_epoch == 0) fit.best_dev_accuracy = 0.0;
  return fit;
}

}  // namespace selmask
