#pragma once

// Mini-batch SGD over labelled clouds, evaluation and per-epoch metrics.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "fkaconv/autodiff.hpp"
#include "fkaconv/netzoo.hpp"
#include "fkaconv/synthdata.hpp"

namespace fkac {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  std::size_t eval_votes = 1;
  std::string lr_schedule = "constant";  // or "cosine": lr·(1 + cos(π·epoch/epochs))/2

  double lr_at(std::size_t epoch) const {
    if (lr_schedule == "cosine")
      return lr * 0.5 * (1.0 + std::cos(3.141592653589793 * static_cast<double>(epoch) / static_cast<double>(epochs)));
    return lr;
  }

  void validate() const {
    if (epochs == 0) throw ConfigError("field 'epochs': must be positive");
    if (batch_size == 0) throw ConfigError("field 'batch_size': must be positive");
    if (!(lr >= 0)) throw ConfigError("field 'lr': must be non-negative");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("field 'momentum': must lie in [0, 1)");
    if (eval_votes == 0) throw ConfigError("field 'eval_votes': must be positive");
    if (lr_schedule != "constant" && lr_schedule != "cosine")
      throw ConfigError("field 'lr_schedule': expected 'constant' or 'cosine', got '" + lr_schedule + "'");
  }
};

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = detail::json_field(j, "epochs", c.epochs);
  c.batch_size = detail::json_field(j, "batch_size", c.batch_size);
  c.lr = detail::json_field(j, "lr", c.lr);
  c.momentum = detail::json_field(j, "momentum", c.momentum);
  c.seed = detail::json_field(j, "seed", c.seed);
  c.eval_votes = detail::json_field(j, "eval_votes", c.eval_votes);
  c.lr_schedule = detail::json_field(j, "lr_schedule", c.lr_schedule);
  c.validate();
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr},
          {"momentum", c.momentum}, {"seed", c.seed}, {"eval_votes", c.eval_votes},
          {"lr_schedule", c.lr_schedule}};
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_accuracy = 0;
  double test_accuracy = -1;  // −1 when there is no test split
  double seconds = 0;
};

namespace detail {

template <class T>
std::vector<const PointCloud*> batch_clouds(const std::vector<LabeledCloud>& data, std::span<const std::size_t> ids) {
  std::vector<const PointCloud*> out;
  for (auto i : ids) out.push_back(&data[i].cloud);
  return out;
}

// Targets: one label per cloud (classification) or per input point (segmentation).
inline std::vector<int> batch_targets(Task task, const std::vector<LabeledCloud>& data, std::span<const std::size_t> ids) {
  std::vector<int> out;
  for (auto i : ids) {
    if (task == Task::kClassification) {
      out.push_back(data[i].label);
    } else {
      if (!data[i].cloud.has_labels()) throw LabelError("segmentation sample without point labels");
      out.insert(out.end(), data[i].cloud.labels.begin(), data[i].cloud.labels.end());
    }
  }
  return out;
}

template <class T>
std::size_t count_correct(const ad::Var<T>& scores, const std::vector<int>& targets) {
  const std::size_t C = scores.shape()[1];
  std::size_t ok = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const T* row = scores.value().data() + r * C;
    ok += static_cast<int>(std::max_element(row, row + C) - row) == targets[r];
  }
  return ok;
}

}  // namespace detail

/// One pass over `data` in a seeded shuffled order. Returns mean loss and accuracy.
template <class T>
EpochMetrics train_epoch(Network<T>& net, const std::vector<LabeledCloud>& data, const TrainConfig& cfg,
                         std::size_t epoch) {
  if (data.empty()) throw EmptyInputError("empty training set");
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(detail::mix_seed(cfg.seed, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  net.set_frozen(false);
  double loss_sum = 0;
  std::size_t correct = 0, targets = 0, batches = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    std::span<const std::size_t> ids(order.data() + start, end - start);
    const auto y = detail::batch_targets(net.config().task, data, ids);
    const auto pass = net.forward(detail::batch_clouds<T>(data, ids), true, detail::mix_seed(rng(), start));
    const auto loss = ad::cross_entropy(pass.scores, y);
    ad::backward(loss);
    net.registry().sgd_step(static_cast<T>(cfg.lr_at(epoch)), static_cast<T>(cfg.momentum));
    loss_sum += static_cast<double>(loss.item());
    correct += detail::count_correct(pass.scores, y);
    targets += y.size();
    ++batches;
  }
  EpochMetrics m;
  m.epoch = epoch;
  m.lr = cfg.lr_at(epoch);
  m.train_loss = loss_sum / static_cast<double>(batches);
  m.train_accuracy = static_cast<double>(correct) / static_cast<double>(targets);
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

/// Mean cross-entropy over `data` in eval mode, without updating anything.
template <class T>
double evaluate_loss(Network<T>& net, const std::vector<LabeledCloud>& data, std::size_t batch, std::uint64_t seed) {
  double sum = 0;
  std::size_t n = 0;
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t start = 0; start < all.size(); start += batch) {
    std::span<const std::size_t> ids(all.data() + start, std::min(batch, all.size() - start));
    const auto pass = net.forward(detail::batch_clouds<T>(data, ids), false, seed + start);
    sum += static_cast<double>(ad::cross_entropy(pass.scores, detail::batch_targets(net.config().task, data, ids)).item()) *
           static_cast<double>(ids.size());
    n += ids.size();
  }
  return sum / static_cast<double>(n);
}

/// Accuracy in eval mode: per cloud with vote aggregation for classification,
/// per point for segmentation.
template <class T>
double evaluate_accuracy(Network<T>& net, const std::vector<LabeledCloud>& data, std::size_t votes, std::uint64_t seed,
                         std::size_t batch = 16) {
  if (data.empty()) throw EmptyInputError("empty evaluation set");
  const Task task = net.config().task;
  const std::size_t C = net.config().num_classes;
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::size_t correct = 0, total = 0;
  if (task == Task::kSegmentation || votes == 1) {
    for (std::size_t start = 0; start < all.size(); start += batch) {
      std::span<const std::size_t> ids(all.data() + start, std::min(batch, all.size() - start));
      const auto y = detail::batch_targets(task, data, ids);
      std::vector<const PointCloud*> clouds = detail::batch_clouds<T>(data, ids);
      const auto pass = net.forward(clouds, false, seed);
      correct += detail::count_correct(pass.scores, y);
      total += y.size();
    }
  } else {
    for (const auto& s : data) {
      correct += classify(net, s.cloud, votes, seed).label == s.label;
      ++total;
    }
  }
  (void)C;
  return static_cast<double>(correct) / static_cast<double>(total);
}

/// Runs epochs [first_epoch, cfg.epochs) and reports each through `on_epoch`.
template <class T>
std::vector<EpochMetrics> fit(Network<T>& net, const std::vector<LabeledCloud>& train,
                              const std::vector<LabeledCloud>& test, const TrainConfig& cfg, std::size_t first_epoch = 0,
                              const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.validate();
  std::vector<EpochMetrics> out;
  for (std::size_t e = first_epoch; e < cfg.epochs; ++e) {
    auto m = train_epoch(net, train, cfg, e);
    if (!test.empty()) m.test_accuracy = evaluate_accuracy(net, test, cfg.eval_votes, cfg.seed);
    out.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return out;
}

}  // namespace fkac
