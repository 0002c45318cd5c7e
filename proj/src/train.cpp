#include "faudit/train.hpp"

#include <cmath>
#include <numeric>

#include "faudit/ops.hpp"
#include "faudit/optim.hpp"
#include "faudit/rng.hpp"
#include "faudit/stats.hpp"

namespace faudit {

std::vector<std::size_t> predict_all(const Classifier& model, std::span<const LabeledImage> set) {
  std::vector<std::size_t> out;
  out.reserve(set.size());
  for (const auto& s : set) out.push_back(predict_class(model, s.image));
  return out;
}

namespace {

double val_balanced_accuracy(const Classifier& model, std::span<const LabeledImage> val) {
  std::vector<std::size_t> truth;
  truth.reserve(val.size());
  for (const auto& s : val) truth.push_back(s.label);
  return stats::balanced_accuracy(truth, predict_all(model, val), model.n_classes());
}

std::vector<std::vector<double>> snapshot(const Classifier& model) {
  std::vector<std::vector<double>> out;
  for (const auto& p : model.parameters()) out.emplace_back(p.value.data().begin(), p.value.data().end());
  return out;
}

void restore(Classifier& model, const std::vector<std::vector<double>>& values) {
  auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].value.mutable_data();
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

}  // namespace

TrainResult train(Classifier& model, std::span<const LabeledImage> train_set,
                  std::span<const LabeledImage> val_set, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  if (train_set.empty()) throw std::invalid_argument("train: empty training split");
  if (val_set.empty()) throw std::invalid_argument("train: empty validation split");
  if (config.batch_size == 0) throw std::invalid_argument("train: batch size must be positive");

  auto params = model.parameter_tensors();
  AdamConfig adam_cfg;
  adam_cfg.lr = config.lr;
  adam_cfg.weight_decay = config.weight_decay;
  Adam optimizer(params, adam_cfg);
  optimizer.zero_grad();

  TrainResult result;
  auto best = snapshot(model);
  double best_score = -1.0;
  std::size_t misses = 0;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng(mix_seed(config.seed, epoch));
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    try {
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        const double inv_batch = 1.0 / static_cast<double>(end - start);
        for (std::size_t i = start; i < end; ++i) {
          const auto& sample = train_set[order[i]];
          auto logits = model.forward(sample.image).logits;
          auto loss = ops::cross_entropy(logits, sample.label);
          if (!std::isfinite(loss.item())) throw NumericError("non-finite loss");
          loss_sum += loss.item();
          backward(ops::scale(loss, inv_batch));
        }
        if (config.grad_clip > 0.0) clip_grad_norm(params, config.grad_clip);
        optimizer.step();
        optimizer.zero_grad();
      }
    } catch (const NumericError& e) {
      Tape::current().clear();
      throw TrainingError(epoch, e.what());
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(order.size());
    stats.val_balanced_accuracy = val_balanced_accuracy(model, val_set);
    result.history.push_back(stats);
    if (on_epoch) on_epoch(stats);

    if (stats.val_balanced_accuracy > best_score) {
      best_score = stats.val_balanced_accuracy;
      result.best_epoch = epoch;
      best = snapshot(model);
      misses = 0;
    } else if (++misses > config.early_stop_patience) {
      break;
    }
  }
  restore(model, best);
  result.best_val_balanced_accuracy = best_score;
  return result;
}

}  // namespace faudit
