#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "faudit/models.hpp"

namespace faudit {

struct LabeledImage {
  Tensor image;
  std::size_t label = 0;
};

struct TrainConfig {
  std::size_t epochs = 20;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  /// Stop once this many consecutive epochs fail to improve validation
  /// balanced accuracy, plus one (patience 0 stops at the first miss).
  std::size_t early_stop_patience = 5;
  double weight_decay = 0.0;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 1.0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_balanced_accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;
  double best_val_balanced_accuracy = 0.0;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t epoch, const std::string& what)
      : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ": " + what),
        epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Trains `model` in place with Adam and restores the parameters of the
/// epoch with the best validation balanced accuracy.
TrainResult train(Classifier& model, std::span<const LabeledImage> train_set,
                  std::span<const LabeledImage> val_set, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// Predicted classes of `model` over a labelled set.
std::vector<std::size_t> predict_all(const Classifier& model, std::span<const LabeledImage> set);

}  // namespace faudit
