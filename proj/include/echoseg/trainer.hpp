#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "echoseg/augmentation.hpp"
#include "echoseg/error.hpp"
#include "echoseg/losses.hpp"
#include "echoseg/metrics.hpp"
#include "echoseg/model.hpp"
#include "echoseg/optim.hpp"
#include "echoseg/parallel.hpp"
#include "echoseg/sample.hpp"

namespace echoseg {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t patience = 50;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::optional<PlateauOptions> plateau;  // nullopt: constant learning rate
  LossKind loss = LossKind::dice_ce_avg;
  AugmentationConfig augmentation;
  bool deep_supervision = true;  // use aux heads when the model has them
  double ds_lambda = kDeepSupervisionWeight;
  std::uint64_t seed = 1;
  int threads = 1;
  /// Stop once the mean foreground Dice on the (unaugmented) training set
  /// reaches this value. Measured after every epoch when set.
  std::optional<double> target_train_dice;

  void validate(bool batch_norm) const {
    if (epochs == 0) throw InvalidConfigError("train: epochs must be >= 1");
    if (patience == 0 || patience > epochs) throw InvalidConfigError("train: patience must lie in [1, epochs]");
    if (!(lr > 0)) throw InvalidConfigError("train: lr must be positive");
    if (batch_size == 0) throw InvalidConfigError("train: batch size must be >= 1");
    if (batch_norm && batch_size < 2) throw InvalidConfigError("train: batch norm needs batch size >= 2");
    if (!(ds_lambda >= 0)) throw InvalidConfigError("train: ds_lambda must be >= 0");
    if (threads < 1) throw InvalidConfigError("train: threads must be >= 1");
    augmentation.validate();
  }

  bool operator==(const TrainConfig&) const = default;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double val_dice = 0;
  double lr = 0;
  std::optional<double> train_dice;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 before the first epoch
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::string stop_reason;

  bool operator==(const TrainHistory&) const = default;
};

/// Stacks samples into a model batch: images scaled to [0,1] as [N,1,H,W],
/// labels as [N,H,W].
template <class T>
std::pair<Tensor<T>, LabelMap> make_batch(std::span<const SegmentationSample* const> samples) {
  if (samples.empty()) throw InvalidInputError("empty batch");
  const std::size_t H = samples[0]->image.dim(0), W = samples[0]->image.dim(1);
  Tensor<T> x({samples.size(), 1, H, W});
  LabelMap y({samples.size(), H, W});
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const SegmentationSample& s = *samples[n];
    if (s.image.dim(0) != H || s.image.dim(1) != W) throw InvalidInputError("batch mixes image sizes");
    for (std::size_t i = 0; i < H * W; ++i) {
      x[n * H * W + i] = static_cast<T>(s.image[i] / 255.0f);
      y[n * H * W + i] = s.label[i];
    }
  }
  return {std::move(x), std::move(y)};
}

template <class T>
std::pair<Tensor<T>, LabelMap> make_batch(const std::vector<SegmentationSample>& samples, std::size_t begin,
                                          std::size_t end) {
  std::vector<const SegmentationSample*> ptrs;
  for (std::size_t i = begin; i < end; ++i) ptrs.push_back(&samples[i]);
  return make_batch<T>(ptrs);
}

/// Base loss on the final head plus, when enabled, the weighted aux terms.
template <class T>
ag::LossTerm<T> training_loss(const ModelOutput<T>& out, const LabelMap& target, LossKind kind, bool use_ds,
                              double lambda) {
  ag::LossTerm<T> final_loss = ag::segmentation_loss<T>(kind, out.logits, std::nullopt, target);
  if (!use_ds || out.aux_logits.empty()) return final_loss;
  std::vector<ag::LossTerm<T>> aux;
  for (std::size_t i = 0; i < out.aux_logits.size(); ++i) {
    aux.push_back(ag::segmentation_loss<T>(kind, out.aux_logits[i], out.aux_probs[i], target));
  }
  return ag::deep_supervision_loss<T>(final_loss, aux, lambda);
}

struct Evaluation {
  double loss = 0;       // final-head base loss, averaged over samples
  double mean_dice = 0;  // hard foreground Dice, averaged over samples and classes
};

/// Eval-mode pass over a dataset in chunks of `batch` samples.
template <class T>
Evaluation evaluate(BasicUNet<T>& model, const std::vector<SegmentationSample>& samples, LossKind kind,
                    std::size_t batch) {
  if (samples.empty()) throw InvalidInputError("evaluate: empty dataset");
  Evaluation e;
  for (std::size_t b = 0; b < samples.size(); b += batch) {
    const std::size_t end = std::min(samples.size(), b + batch);
    auto [x, y] = make_batch<T>(samples, b, end);
    const Tensor<T> logits = model.infer_logits(x);
    e.loss += segmentation_loss(kind, logits, y).value * static_cast<double>(end - b);
    const LabelMap pred = argmax_channels(logits);
    const std::size_t plane = y.dim(1) * y.dim(2);
    for (std::size_t n = 0; n < end - b; ++n) {
      const Shape frame{y.dim(1), y.dim(2)};
      const LabelMap p(frame, std::vector<std::uint8_t>(pred.values().begin() + static_cast<std::ptrdiff_t>(n * plane),
                                                        pred.values().begin() + static_cast<std::ptrdiff_t>((n + 1) * plane)));
      const LabelMap g(frame, std::vector<std::uint8_t>(y.values().begin() + static_cast<std::ptrdiff_t>(n * plane),
                                                        y.values().begin() + static_cast<std::ptrdiff_t>((n + 1) * plane)));
      for (std::uint8_t c = 1; c < kNumClasses; ++c) e.mean_dice += dice_score(p, g, c);
    }
  }
  e.loss /= static_cast<double>(samples.size());
  e.mean_dice /= static_cast<double>(samples.size() * (kNumClasses - 1));
  return e;
}

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}
}  // namespace detail

/// Seed for augmenting dataset item `index` in `epoch`.
inline std::uint64_t augmentation_seed(std::uint64_t seed, std::size_t epoch, std::size_t index) {
  const std::uint64_t base = detail::splitmix64(seed ^ detail::splitmix64(0xA5A5A5A5ull + epoch));
  return base ^ static_cast<std::uint64_t>(index);
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam training with per-epoch validation, early stopping on validation
/// loss and optional plateau scheduling. On return the model holds the
/// weights of the best epoch.
template <class T>
TrainHistory train(BasicUNet<T>& model, const std::vector<SegmentationSample>& train_set,
                   const std::vector<SegmentationSample>& val_set, const TrainConfig& cfg,
                   const EpochCallback& on_epoch = {}) {
  const bool batch_norm = model.config().normalization == Normalization::batch;
  cfg.validate(batch_norm);
  if (train_set.empty() || val_set.empty()) throw InvalidInputError("train: datasets must be nonempty");
  const std::size_t batch = std::min(cfg.batch_size, train_set.size());
  if (batch_norm && batch < 2) throw InvalidConfigError("train: batch norm needs at least 2 training samples");
  for (const auto& s : train_set) validate_sample(s);

  const int saved_threads = num_threads();
  set_num_threads(cfg.threads);
  struct Restore {
    int n;
    ~Restore() { set_num_threads(n); }
  } restore{saved_threads};

  std::mt19937_64 shuffle_rng(detail::splitmix64(cfg.seed));
  Adam<T> adam;
  std::optional<ReduceOnPlateau> plateau;
  if (cfg.plateau) plateau.emplace(cfg.lr, *cfg.plateau);
  double lr = cfg.lr;

  TrainHistory history;
  std::vector<Tensor<T>> best = model.snapshot();
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[std::uniform_int_distribution<std::size_t>(0, i - 1)(shuffle_rng)]);
    }
    // Drop the incomplete tail batch when batch norm would see a tiny batch.
    const std::size_t usable = batch_norm ? order.size() / batch * batch : order.size();
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < usable; b += batch) {
      const std::size_t end = std::min(usable, b + batch);
      std::vector<SegmentationSample> items(end - b);
      parallel_for(end - b, [&](std::size_t k) {
        const std::size_t idx = order[b + k];
        items[k] = cfg.augmentation.empty()
                       ? train_set[idx]
                       : augment(train_set[idx], cfg.augmentation, augmentation_seed(cfg.seed, epoch, idx)).sample;
      });
      auto [x, y] = make_batch<T>(items, 0, items.size());
      Graph<T> g;
      ModelOutput<T> out = model.forward(g, x, Mode::train);
      ag::LossTerm<T> loss = training_loss(out, y, cfg.loss, cfg.deep_supervision, cfg.ds_lambda);
      const double value = loss.scalar();
      if (!std::isfinite(value)) {
        throw NonFiniteError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batches + 1));
      }
      model.zero_grad();
      g.backward(loss.value);
      adam.step(model.parameters(), lr);
      loss_sum += value;
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    rec.lr = lr;
    const Evaluation val = evaluate(model, val_set, cfg.loss, batch);
    rec.val_loss = val.loss;
    rec.val_dice = val.mean_dice;
    if (!std::isfinite(rec.val_loss)) throw NonFiniteError("non-finite validation loss at epoch " + std::to_string(epoch));
    if (cfg.target_train_dice) {
      rec.train_dice = &val_set == &train_set ? val.mean_dice : evaluate(model, train_set, cfg.loss, batch).mean_dice;
    }
    history.epochs.push_back(rec);

    if (rec.val_loss < history.best_val_loss) {
      history.best_val_loss = rec.val_loss;
      history.best_epoch = epoch;
      best = model.snapshot();
      since_best = 0;
    } else {
      ++since_best;
    }
    if (plateau) lr = plateau->step(rec.val_loss);
    if (on_epoch) on_epoch(rec);

    if (rec.train_dice && *rec.train_dice >= *cfg.target_train_dice) {
      history.stop_reason = "target-dice";
      break;
    }
    if (since_best >= cfg.patience) {
      history.stop_reason = "early-stop";
      break;
    }
  }
  if (history.stop_reason.empty()) history.stop_reason = "max-epochs";
  model.restore(best);
  return history;
}

}  // namespace echoseg
