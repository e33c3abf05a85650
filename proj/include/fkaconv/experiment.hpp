#pragma once

// Run configuration shared by the CLI and the acceptance suite: network,
// optimizer and synthetic dataset in one JSON document.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fkaconv/netzoo.hpp"
#include "fkaconv/synthdata.hpp"
#include "fkaconv/train.hpp"

namespace fkac {

struct DataConfig {
  std::string kind = "toy_shapes";  // or "planar_rooms" (per-point face labels)
  std::size_t train_size = 300;
  std::size_t test_size = 150;
  std::size_t n_points = 256;
  std::uint64_t train_seed = 1;
  std::uint64_t test_seed = 2;

  void validate() const {
    if (kind != "toy_shapes" && kind != "planar_rooms")
      throw ConfigError("field 'data.kind': expected 'toy_shapes' or 'planar_rooms', got '" + kind + "'");
    if (train_size == 0) throw ConfigError("field 'data.train_size': must be positive");
    if (kind == "toy_shapes" && (train_size % 3 || test_size % 3))
      throw ConfigError("field 'data.train_size': toy shapes need multiples of 3 (balanced classes)");
    if (n_points < 8) throw ConfigError("field 'data.n_points': must be at least 8");
    if (train_seed == test_seed) throw ConfigError("field 'data.test_seed': must differ from train_seed");
  }
};

struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
  DataConfig data;

  void validate() const {
    network.validate();
    train.validate();
    data.validate();
    if (network.support_schedule.front() != data.n_points)
      throw ConfigError("field 'network.support_schedule': first entry must equal data.n_points (" +
                        std::to_string(data.n_points) + ")");
    const bool seg = network.task == Task::kSegmentation;
    if (seg != (data.kind == "planar_rooms"))
      throw ConfigError("field 'network.task': " + task_name(network.task) + " does not match data.kind '" +
                        data.kind + "'");
    if (network.num_classes != 3) throw ConfigError("field 'network.num_classes': synthetic data has 3 classes");
  }
};

inline DataConfig data_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("field 'data': must be a JSON object");
  DataConfig d;
  d.kind = detail::json_field(j, "kind", d.kind);
  d.train_size = detail::json_field(j, "train_size", d.train_size);
  d.test_size = detail::json_field(j, "test_size", d.test_size);
  d.n_points = detail::json_field(j, "n_points", d.n_points);
  d.train_seed = detail::json_field(j, "train_seed", d.train_seed);
  d.test_seed = detail::json_field(j, "test_seed", d.test_seed);
  return d;
}

inline nlohmann::json to_json(const DataConfig& d) {
  return {{"kind", d.kind},       {"train_size", d.train_size}, {"test_size", d.test_size},
          {"n_points", d.n_points}, {"train_seed", d.train_seed}, {"test_seed", d.test_seed}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (key != "network" && key != "train" && key != "data") throw ConfigError("field '" + key + "': unknown section");
  RunConfig c;
  if (j.contains("network")) c.network = network_config_from_json(j["network"]);
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  if (j.contains("data")) c.data = data_config_from_json(j["data"]);
  c.validate();
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"network", to_json(c.network)}, {"train", to_json(c.train)}, {"data", to_json(c.data)}};
}

inline std::vector<LabeledCloud> make_split(const DataConfig& d, std::size_t size, std::uint64_t seed) {
  if (size == 0) return {};
  if (d.kind == "toy_shapes") return make_toy_classification(size / 3, d.n_points, seed);
  return make_planar_rooms(size, d.n_points, seed);
}

/// (train, test) splits drawn from disjoint seeds.
inline std::pair<std::vector<LabeledCloud>, std::vector<LabeledCloud>> make_datasets(const DataConfig& d) {
  d.validate();
  return {make_split(d, d.train_size, d.train_seed), make_split(d, d.test_size, d.test_seed)};
}

/// The toy classification setup: 300/150 clouds of 256 points, widths
/// 32-64-128-128, cosine schedule from lr 0.01 over 12 epochs.
inline RunConfig toy_run_config(std::uint64_t seed = 0, NeighborhoodMode mode = NeighborhoodMode::kLearned) {
  RunConfig c;
  c.network.support_schedule = {256, 64, 16, 4};
  c.network.widths = {32, 64, 128, 128};
  c.network.mode = mode;
  c.network.seed = seed;
  c.train.epochs = 12;
  c.train.batch_size = 16;
  c.train.lr = 0.01;
  c.train.lr_schedule = "cosine";
  c.train.seed = seed;
  c.data.train_seed = 2 * seed + 1;
  c.data.test_seed = 2 * seed + 2;
  return c;
}

}  // namespace fkac
