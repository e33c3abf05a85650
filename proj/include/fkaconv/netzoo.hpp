#pragma once

// Residual FKAConv networks: a classification encoder and a segmentation
// encoder-decoder over a schedule of quantized support sets.
//
// Encoder for a schedule [s0, s1, ..., sL] and widths [w0, ..., wL]:
//   stem   FKAConv(in → w0) + BN + ReLU on the s0 input points
//   block  keep@0, keep@0, then for l = 1..L: down→l, and keep@l while l < L
// which gives the 9 residual blocks of the reference design for L = 4.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fkaconv/autodiff.hpp"
#include "fkaconv/checkpoint.hpp"
#include "fkaconv/error.hpp"
#include "fkaconv/fkaconv.hpp"
#include "fkaconv/geometry.hpp"
#include "fkaconv/parallel.hpp"
#include "fkaconv/sampling.hpp"

namespace fkac {

using json = nlohmann::json;

enum class Task { kClassification, kSegmentation };

inline std::string task_name(Task t) { return t == Task::kClassification ? "classification" : "segmentation"; }

struct NetworkConfig {
  Task task = Task::kClassification;
  std::size_t input_channels = 1;
  std::vector<std::size_t> support_schedule{256, 64, 16, 4};
  std::vector<std::size_t> widths{32, 64, 128, 128};
  std::size_t k = 16;
  std::size_t k_kernel = 16;
  std::size_t num_classes = 3;
  double ema_momentum = 0.1;
  NeighborhoodMode mode = NeighborhoodMode::kLearned;
  std::uint64_t seed = 0;

  std::size_t levels() const noexcept { return support_schedule.size() - 1; }
  std::size_t min_points() const noexcept { return support_schedule.front(); }

  void validate() const {
    const auto& s = support_schedule;
    if (s.size() < 2) throw ConfigError("field 'support_schedule': needs at least two entries");
    if (std::find(s.begin(), s.end(), std::size_t{0}) != s.end())
      throw ConfigError("field 'support_schedule': entries must be positive");
    if (s[1] > s[0]) throw ConfigError("field 'support_schedule': first support count exceeds the input size");
    for (std::size_t i = 2; i < s.size(); ++i)
      if (s[i] >= s[i - 1]) throw ConfigError("field 'support_schedule': must be strictly decreasing after its first entry");
    if (widths.size() != s.size())
      throw ConfigError("field 'widths': expected " + std::to_string(s.size()) + " entries (one per schedule level)");
    for (auto w : widths)
      if (w < 2 || w % 2) throw ConfigError("field 'widths': entries must be even and at least 2");
    if (k == 0) throw ConfigError("field 'k': must be positive");
    if (k_kernel == 0) throw ConfigError("field 'k_kernel': must be positive");
    if (num_classes < 2) throw ConfigError("field 'num_classes': must be at least 2");
    if (input_channels == 0) throw ConfigError("field 'input_channels': must be positive");
    if (!(ema_momentum > 0 && ema_momentum <= 1)) throw ConfigError("field 'ema_momentum': must lie in (0, 1]");
  }
};

/// Input size followed by the reference tail 512, 128, 32, 8, scaled by n/8192
/// for smaller inputs. Entries that collapse below 1 or stop decreasing are dropped.
inline std::vector<std::size_t> default_schedule(std::size_t n) {
  std::vector<std::size_t> out{n};
  const double scale = n >= 8192 ? 1.0 : static_cast<double>(n) / 8192.0;
  for (double base : {512.0, 128.0, 32.0, 8.0}) {
    const auto v = static_cast<std::size_t>(std::max(1.0, std::round(base * scale)));
    if (v < out.back() || (out.size() == 1 && v <= out.back())) out.push_back(v);
  }
  return out;
}

namespace detail {

template <class V>
V json_field(const json& j, const char* name, V fallback) {
  if (!j.contains(name)) return fallback;
  try {
    return j.at(name).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("field '") + name + "': " + e.what());
  }
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

inline NetworkConfig network_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("network config must be a JSON object");
  NetworkConfig c;
  const auto task = detail::json_field<std::string>(j, "task", "classification");
  if (task == "classification") c.task = Task::kClassification;
  else if (task == "segmentation") c.task = Task::kSegmentation;
  else throw ConfigError("field 'task': unknown task '" + task + "'");
  c.input_channels = detail::json_field(j, "input_channels", c.input_channels);
  if (j.contains("support_schedule")) {
    c.support_schedule = detail::json_field(j, "support_schedule", c.support_schedule);
  } else if (j.contains("input_points")) {
    c.support_schedule = default_schedule(detail::json_field<std::size_t>(j, "input_points", 0));
  }
  c.widths = detail::json_field(j, "widths", c.widths);
  c.k = detail::json_field(j, "k", c.k);
  c.k_kernel = detail::json_field(j, "k_kernel", c.k_kernel);
  c.num_classes = detail::json_field(j, "num_classes", c.num_classes);
  c.ema_momentum = detail::json_field(j, "ema_momentum", c.ema_momentum);
  try {
    c.mode = parse_mode(detail::json_field<std::string>(j, "mode", "learned"));
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("field 'mode': ") + e.what());
  }
  c.seed = detail::json_field(j, "seed", c.seed);
  c.validate();
  return c;
}

inline json to_json(const NetworkConfig& c) {
  return json{{"task", task_name(c.task)},
              {"input_channels", c.input_channels},
              {"support_schedule", c.support_schedule},
              {"widths", c.widths},
              {"k", c.k},
              {"k_kernel", c.k_kernel},
              {"num_classes", c.num_classes},
              {"ema_momentum", c.ema_momentum},
              {"mode", std::string(mode_name(c.mode))},
              {"seed", c.seed}};
}

// ---------------------------------------------------------------------------
// Batched point sets
// ---------------------------------------------------------------------------

/// Points of several clouds stored back to back; cloud b owns [offsets[b], offsets[b+1]).
struct Level {
  std::vector<Vec3> coords;
  std::vector<std::size_t> offsets{0};

  std::size_t clouds() const noexcept { return offsets.size() - 1; }
  std::size_t size() const noexcept { return coords.size(); }
  std::span<const Vec3> cloud(std::size_t b) const {
    return std::span<const Vec3>(coords).subspan(offsets[b], offsets[b + 1] - offsets[b]);
  }
};

/// Support sets and neighborhoods of a batch for one schedule.
struct Pyramid {
  Level input;
  std::vector<Level> levels;                    // 0..L
  std::vector<std::vector<std::size_t>> picks;  // picks[0] into input, picks[l] into level l−1
  std::vector<NeighborIndex> same;              // same[l]: k-NN of level-l points within level l
  std::vector<NeighborIndex> down;              // down[l], l ≥ 1: k-NN of level-l points within level l−1
  std::vector<std::vector<std::size_t>> up;     // up[l], l < L: nearest level-(l+1) point of each level-l point
  std::vector<std::size_t> input_up;            // nearest level-0 point of each input point
};

namespace detail {

struct CloudPyramid {
  std::vector<std::vector<std::size_t>> picks;
  std::vector<std::vector<Vec3>> coords;
  std::vector<NeighborIndex> same, down;
  std::vector<std::vector<std::size_t>> up;
  std::vector<std::size_t> input_up;
};

inline std::vector<Vec3> gather_points(std::span<const Vec3> pts, const std::vector<std::size_t>& ids) {
  std::vector<Vec3> out;
  out.reserve(ids.size());
  for (auto i : ids) out.push_back(pts[i]);
  return out;
}

inline std::vector<std::size_t> nearest_ids(std::span<const Vec3> coarse, std::span<const Vec3> fine) {
  return knn_grid_points(coarse, fine, 1).indices;
}

inline CloudPyramid build_cloud_pyramid(std::span<const Vec3> input, const std::vector<std::size_t>& schedule,
                                        std::size_t k, std::uint64_t seed) {
  if (input.size() < schedule[0])
    throw CardinalityError("cloud has " + std::to_string(input.size()) + " points, the network needs at least " +
                           std::to_string(schedule[0]));
  const std::size_t L = schedule.size() - 1;
  CloudPyramid c;
  c.picks.resize(L + 1);
  c.coords.resize(L + 1);
  if (input.size() == schedule[0]) {
    c.picks[0].resize(input.size());
    std::iota(c.picks[0].begin(), c.picks[0].end(), std::size_t{0});
  } else {
    c.picks[0] = quantized_sampling(input, schedule[0], mix_seed(seed, 0)).selected;
  }
  c.coords[0] = gather_points(input, c.picks[0]);
  for (std::size_t l = 1; l <= L; ++l) {
    c.picks[l] = quantized_sampling(c.coords[l - 1], schedule[l], mix_seed(seed, l)).selected;
    c.coords[l] = gather_points(c.coords[l - 1], c.picks[l]);
  }
  c.same.resize(L + 1);
  c.down.resize(L + 1);
  c.up.resize(L);
  for (std::size_t l = 0; l <= L; ++l) {
    std::vector<std::size_t> all(c.coords[l].size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    c.same[l] = knn_grid(c.coords[l], all, k);
    if (l > 0) c.down[l] = knn_grid(c.coords[l - 1], c.picks[l], k);
    if (l < L) c.up[l] = nearest_ids(c.coords[l + 1], c.coords[l]);
  }
  c.input_up = nearest_ids(c.coords[0], input);
  return c;
}

inline void append_shifted(std::vector<std::size_t>& dst, const std::vector<std::size_t>& src, std::size_t shift) {
  for (auto i : src) dst.push_back(i + shift);
}

}  // namespace detail

/// Samples every level of every cloud (seeded per cloud) and precomputes all
/// neighborhoods, then merges them with global indices.
inline Pyramid build_pyramid(const std::vector<std::span<const Vec3>>& clouds, const std::vector<std::size_t>& schedule,
                             std::size_t k, std::uint64_t seed) {
  if (clouds.empty()) throw EmptyInputError("empty batch");
  const std::size_t B = clouds.size(), L = schedule.size() - 1;
  std::vector<detail::CloudPyramid> parts(B);
  parallel_for(B, [&](std::size_t b) {
    parts[b] = detail::build_cloud_pyramid(clouds[b], schedule, k, detail::mix_seed(seed, 1000 + b));
  });
  Pyramid p;
  p.levels.resize(L + 1);
  p.picks.resize(L + 1);
  p.same.resize(L + 1);
  p.down.resize(L + 1);
  p.up.resize(L);
  for (std::size_t l = 0; l <= L; ++l) {
    p.same[l].k = k;
    p.down[l].k = k;
  }
  for (std::size_t b = 0; b < B; ++b) {
    const auto& c = parts[b];
    const std::size_t in_off = p.input.size();
    p.input.coords.insert(p.input.coords.end(), clouds[b].begin(), clouds[b].end());
    p.input.offsets.push_back(p.input.size());
    std::vector<std::size_t> off(L + 1);
    for (std::size_t l = 0; l <= L; ++l) {
      off[l] = p.levels[l].size();
      p.levels[l].coords.insert(p.levels[l].coords.end(), c.coords[l].begin(), c.coords[l].end());
      p.levels[l].offsets.push_back(p.levels[l].size());
    }
    for (std::size_t l = 0; l <= L; ++l) {
      const std::size_t parent_off = l == 0 ? in_off : off[l - 1];
      detail::append_shifted(p.picks[l], c.picks[l], parent_off);
      detail::append_shifted(p.same[l].support_ids, c.same[l].support_ids, off[l]);
      detail::append_shifted(p.same[l].indices, c.same[l].indices, off[l]);
      if (l > 0) {
        detail::append_shifted(p.down[l].support_ids, c.down[l].support_ids, off[l - 1]);
        detail::append_shifted(p.down[l].indices, c.down[l].indices, off[l - 1]);
      }
      if (l < L) detail::append_shifted(p.up[l], c.up[l], off[l + 1]);
    }
    detail::append_shifted(p.input_up, c.input_up, off[0]);
  }
  return p;
}

/// Each fine point copies the row of its nearest coarse point (ties → lowest index).
template <class T>
ad::Var<T> nearest_upsample(std::span<const Vec3> coarse, const ad::Var<T>& coarse_feats, std::span<const Vec3> fine) {
  if (coarse.empty()) throw EmptyInputError("nearest_upsample needs at least one coarse point");
  if (coarse_feats.shape().rank() != 2 || coarse_feats.shape()[0] != coarse.size())
    throw DimensionError("coarse features " + coarse_feats.shape().str() + " do not match " +
                         std::to_string(coarse.size()) + " coarse points");
  return ad::gather_rows(coarse_feats, detail::nearest_ids(coarse, fine));
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <class T>
struct Linear {
  ad::Var<T> W, b;

  Linear() = default;
  template <class Rng>
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : W(ad::parameter(ad::uniform_init<T>(Shape{in, out}, in, out, rng))), b(ad::parameter(Tensor<T>(Shape{out}))) {}

  ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::linear(x, W, b); }
};

template <class T>
struct BatchNorm {
  ad::Var<T> gamma, beta;
  ad::BatchNormState<T> state;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t f)
      : gamma(ad::parameter(Tensor<T>(Shape{f}, T(1)))), beta(ad::parameter(Tensor<T>(Shape{f}))), state(f) {}

  ad::Var<T> operator()(const ad::Var<T>& x, bool training) { return ad::batch_norm(x, state, gamma, beta, training); }
};

template <class T>
using NamedVars = std::vector<std::pair<std::string, ad::Var<T>>>;
template <class T>
using NamedBuffers = std::vector<std::pair<std::string, Tensor<T>*>>;

template <class T>
void collect(NamedVars<T>& out, const std::string& p, const Linear<T>& l) {
  out.emplace_back(p + "W", l.W);
  out.emplace_back(p + "b", l.b);
}

template <class T>
void collect(NamedVars<T>& out, const std::string& p, const BatchNorm<T>& l) {
  out.emplace_back(p + "gamma", l.gamma);
  out.emplace_back(p + "beta", l.beta);
}

template <class T>
void collect_buffers(NamedBuffers<T>& out, const std::string& p, BatchNorm<T>& l) {
  out.emplace_back(p + "running_mean", &l.state.running_mean);
  out.emplace_back(p + "running_var", &l.state.running_var);
}

/// linear(in → out/2) → FKAConv(out/2 → out/2) → linear(out/2 → out), each
/// followed by BN (ReLU on the first two). The shortcut max-pools over the
/// neighborhood when the support set shrinks and is projected by linear + BN
/// when the width changes. Output = ReLU(main + shortcut).
template <class T>
class ResidualBlock {
 public:
  ResidualBlock() = default;

  template <class Rng>
  ResidualBlock(std::size_t in, std::size_t out, bool downsample, FKAConvOptions conv, Rng& rng)
      : in_(in), out_(out), downsample_(downsample) {
    if (in == 0 || out < 2 || out % 2) throw ConfigError("residual block needs an even output width");
    const std::size_t mid = out / 2;
    lin1_ = Linear<T>(in, mid, rng);
    bn1_ = BatchNorm<T>(mid);
    conv.in_channels = mid;
    conv.out_channels = mid;
    conv_ = FKAConv<T>(conv, rng);
    bn2_ = BatchNorm<T>(mid);
    lin2_ = Linear<T>(mid, out, rng);
    bn3_ = BatchNorm<T>(out);
    if (in != out) {
      short_ = Linear<T>(in, out, rng);
      bn_short_ = BatchNorm<T>(out);
    }
  }

  std::size_t in_channels() const noexcept { return in_; }
  std::size_t out_channels() const noexcept { return out_; }
  bool downsamples() const noexcept { return downsample_; }
  FKAConv<T>& conv() noexcept { return conv_; }
  Linear<T>& lin2() noexcept { return lin2_; }
  BatchNorm<T>& bn3() noexcept { return bn3_; }

  /// `x` holds features of every point of `source`; the output has one row per support of `nbrs`.
  ad::Var<T> forward(const ad::Var<T>& x, std::span<const Vec3> source, const NeighborIndex& nbrs, bool training) {
    if (x.shape().rank() != 2 || x.shape()[1] != in_ || x.shape()[0] != source.size())
      throw ConfigError("residual block expects " + std::to_string(in_) + " channels on " +
                        std::to_string(source.size()) + " points, got " + x.shape().str());
    const bool shrinks = nbrs.rows() != source.size();
    if (shrinks != downsample_)
      throw ConfigError("residual block support count does not match its schedule position");
    auto h = ad::relu(bn1_(lin1_(x), training));
    h = ad::relu(bn2_(conv_.forward(source, nbrs, h, training), training));
    h = bn3_(lin2_(h), training);
    ad::Var<T> sc = x;
    if (downsample_) {
      const auto g = ad::reshape(ad::gather_rows(x, nbrs.indices), Shape{nbrs.rows(), nbrs.k, in_});
      sc = ad::max_over_axis(g, 1).values;
    }
    if (in_ != out_) sc = bn_short_(short_(sc), training);
    return ad::relu(ad::add(h, sc));
  }

  void parameters(NamedVars<T>& out, const std::string& p) const {
    collect(out, p + "lin1.", lin1_);
    collect(out, p + "bn1.", bn1_);
    for (auto& e : conv_.named_parameters(p + "conv.")) out.push_back(e);
    collect(out, p + "bn2.", bn2_);
    collect(out, p + "lin2.", lin2_);
    collect(out, p + "bn3.", bn3_);
    if (in_ != out_) {
      collect(out, p + "short.", short_);
      collect(out, p + "bn_short.", bn_short_);
    }
  }

  void buffers(NamedBuffers<T>& out, const std::string& p) {
    collect_buffers(out, p + "bn1.", bn1_);
    for (auto& e : conv_.named_buffers(p + "conv.")) out.push_back(e);
    collect_buffers(out, p + "bn2.", bn2_);
    collect_buffers(out, p + "bn3.", bn3_);
    if (in_ != out_) collect_buffers(out, p + "bn_short.", bn_short_);
  }

 private:
  std::size_t in_ = 0, out_ = 0;
  bool downsample_ = false;
  Linear<T> lin1_, lin2_, short_;
  BatchNorm<T> bn1_, bn2_, bn3_, bn_short_;
  FKAConv<T> conv_;
};

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

struct BlockSpec {
  std::size_t src_level = 0;
  std::size_t dst_level = 0;
  std::size_t in = 0;
  std::size_t out = 0;
};

inline std::vector<BlockSpec> block_layout(const NetworkConfig& c) {
  const std::size_t L = c.levels();
  std::vector<BlockSpec> out{{0, 0, c.widths[0], c.widths[0]}, {0, 0, c.widths[0], c.widths[0]}};
  for (std::size_t l = 1; l <= L; ++l) {
    out.push_back({l - 1, l, c.widths[l - 1], c.widths[l]});
    if (l < L) out.push_back({l, l, c.widths[l], c.widths[l]});
  }
  return out;
}

template <class T>
class Network {
 public:
  struct Pass {
    ad::Var<T> scores;  // [B × C] for classification, [input points × C] for segmentation
    std::vector<ad::Var<T>> layer_outputs;  // 0: stem, i: block i
    std::vector<std::size_t> layer_levels;
    Pyramid pyramid;
  };

  explicit Network(NetworkConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    FKAConvOptions conv;
    conv.k = cfg_.k;
    conv.k_kernel = cfg_.k_kernel;
    conv.momentum = cfg_.ema_momentum;
    conv.mode = cfg_.mode;
    FKAConvOptions stem = conv;
    stem.in_channels = cfg_.input_channels;
    stem.out_channels = cfg_.widths[0];
    stem_ = FKAConv<T>(stem, rng);
    stem_bn_ = BatchNorm<T>(cfg_.widths[0]);
    layout_ = block_layout(cfg_);
    blocks_.reserve(layout_.size());
    for (const auto& b : layout_) blocks_.emplace_back(b.in, b.out, b.src_level != b.dst_level, conv, rng);
    const std::size_t L = cfg_.levels();
    if (cfg_.task == Task::kClassification) {
      head_ = Linear<T>(cfg_.widths[L], cfg_.num_classes, rng);
    } else {
      for (std::size_t l = L; l-- > 0;) {
        decoder_.emplace_back(cfg_.widths[l + 1] + cfg_.widths[l], cfg_.widths[l], rng);
        decoder_bn_.emplace_back(cfg_.widths[l]);
      }
      head_ = Linear<T>(cfg_.widths[0], cfg_.num_classes, rng);
    }
    for (auto& [name, v] : named_parameters()) registry_.add(name, v);
  }

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  const NetworkConfig& config() const noexcept { return cfg_; }
  ad::ParamRegistry<T>& registry() noexcept { return registry_; }
  std::size_t num_layers() const noexcept { return blocks_.size() + 1; }
  std::vector<ResidualBlock<T>>& blocks() noexcept { return blocks_; }
  const std::vector<BlockSpec>& layout() const noexcept { return layout_; }
  FKAConv<T>& stem() noexcept { return stem_; }

  std::size_t layer_width(std::size_t layer) const {
    if (layer >= num_layers()) throw ParameterError("layer index " + std::to_string(layer) + " out of range");
    return layer == 0 ? cfg_.widths[0] : layout_[layer - 1].out;
  }

  void set_frozen(bool f) {
    stem_.set_frozen(f);
    for (auto& b : blocks_) b.conv().set_frozen(f);
  }

  /// Full pass over a batch. Sampling is seeded by `sample_seed`; training mode
  /// uses batch statistics and refreshes every layer's radius EMA.
  Pass forward_points(const std::vector<std::span<const Vec3>>& clouds, bool training, std::uint64_t sample_seed,
                      const std::vector<std::span<const double>>& features = {}) {
    Pass pass;
    pass.pyramid = build_pyramid(clouds, cfg_.support_schedule, cfg_.k, sample_seed);
    const auto& P = pass.pyramid;
    const std::size_t L = cfg_.levels();

    auto x = ad::gather_rows(input_features(P.input, features), P.picks[0]);
    x = ad::relu(stem_bn_(stem_.forward(P.levels[0].coords, P.same[0], x, training), training));
    pass.layer_outputs.push_back(x);
    pass.layer_levels.push_back(0);

    std::vector<ad::Var<T>> skips(L + 1);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& spec = layout_[i];
      const auto& nb = spec.src_level == spec.dst_level ? P.same[spec.dst_level] : P.down[spec.dst_level];
      x = blocks_[i].forward(x, P.levels[spec.src_level].coords, nb, training);
      skips[spec.dst_level] = x;
      pass.layer_outputs.push_back(x);
      pass.layer_levels.push_back(spec.dst_level);
    }

    const std::size_t B = clouds.size();
    if (cfg_.task == Task::kClassification) {
      const std::size_t S = cfg_.support_schedule[L];
      const auto per_point = head_(x);
      pass.scores = ad::mean_over_axis(ad::reshape(per_point, Shape{B, S, cfg_.num_classes}), 1);
    } else {
      auto cur = x;
      for (std::size_t d = 0; d < decoder_.size(); ++d) {
        const std::size_t l = L - 1 - d;
        auto up = ad::gather_rows(cur, P.up[l]);
        cur = ad::relu(decoder_bn_[d](decoder_[d](ad::concat<T>({up, skips[l]}, 1)), training));
      }
      pass.scores = ad::gather_rows(head_(cur), P.input_up);
    }
    return pass;
  }

  Pass forward(const std::vector<const PointCloud*>& clouds, bool training, std::uint64_t sample_seed) {
    std::vector<std::span<const Vec3>> spans;
    std::vector<std::span<const double>> feats;
    for (auto* c : clouds) {
      spans.emplace_back(c->coords);
      if (c->feature_dim == cfg_.input_channels) feats.emplace_back(c->features);
    }
    if (feats.size() != clouds.size()) feats.clear();
    return forward_points(spans, training, sample_seed, feats);
  }

  NamedVars<T> named_parameters() const {
    NamedVars<T> out;
    for (auto& e : stem_.named_parameters("stem.conv.")) out.push_back(e);
    collect(out, "stem.bn.", stem_bn_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].parameters(out, "blocks." + std::to_string(i + 1) + ".");
    for (std::size_t d = 0; d < decoder_.size(); ++d) {
      collect(out, "decoder." + std::to_string(d) + ".lin.", decoder_[d]);
      collect(out, "decoder." + std::to_string(d) + ".bn.", decoder_bn_[d]);
    }
    collect(out, "head.", head_);
    return out;
  }

  NamedBuffers<T> named_buffers() {
    NamedBuffers<T> out;
    for (auto& e : stem_.named_buffers("stem.conv.")) out.push_back(e);
    collect_buffers(out, "stem.bn.", stem_bn_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].buffers(out, "blocks." + std::to_string(i + 1) + ".");
    for (std::size_t d = 0; d < decoder_bn_.size(); ++d)
      collect_buffers(out, "decoder." + std::to_string(d) + ".bn.", decoder_bn_[d]);
    return out;
  }

  /// Parameters, buffers and optimizer velocities, plus `extra` metadata next
  /// to the config echo.
  std::string encode(json extra = json::object()) {
    std::vector<TensorRef<T>> refs;
    for (const auto& e : registry_.entries()) refs.push_back({e.name, &e.var.value()});
    for (auto& [name, t] : named_buffers()) refs.push_back({name, t});
    for (std::size_t i = 0; i < registry_.size(); ++i)
      refs.push_back({"optimizer.velocity." + registry_.entries()[i].name, &registry_.velocity(i)});
    extra["config"] = to_json(cfg_);
    extra["iteration"] = registry_.iteration();
    return encode_checkpoint(refs, extra.dump());
  }

  void save(const std::filesystem::path& path, json extra = json::object()) {
    write_file_atomic(path, encode(std::move(extra)));
  }

  /// Restores every tensor by name; the checkpoint must match this network's layout.
  json restore(const Checkpoint& ck) {
    auto copy = [&](const std::string& name, Tensor<T>& dst) {
      const auto& e = ck.at(name);
      if (e.shape != dst.shape())
        throw ConfigError("checkpoint entry '" + name + "' has shape " + e.shape.str() + ", expected " +
                          dst.shape().str());
      for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] = static_cast<T>(e.values[i]);
    };
    for (std::size_t i = 0; i < registry_.size(); ++i) {
      auto var = registry_.entries()[i].var;
      copy(registry_.entries()[i].name, var.mutable_value());
      const std::string vname = "optimizer.velocity." + registry_.entries()[i].name;
      if (ck.contains(vname)) copy(vname, registry_.velocity(i));
    }
    for (auto& [name, t] : named_buffers()) copy(name, *t);
    json meta = ck.metadata.empty() ? json::object() : json::parse(ck.metadata);
    if (meta.contains("iteration")) registry_.set_iteration(meta["iteration"].get<std::uint64_t>());
    return meta;
  }

  /// Builds a network from a checkpoint's config echo and restores its tensors.
  static Network load(const std::filesystem::path& path, json* meta_out = nullptr) {
    const auto ck = load_checkpoint(path);
    const json meta = json::parse(ck.metadata);
    if (!meta.contains("config")) throw ConfigError("checkpoint metadata lacks a network config");
    Network net(network_config_from_json(meta["config"]));
    auto m = net.restore(ck);
    if (meta_out) *meta_out = std::move(m);
    return net;
  }

 private:
  ad::Var<T> input_features(const Level& input, const std::vector<std::span<const double>>& features) const {
    const std::size_t F = cfg_.input_channels;
    Tensor<T> f(Shape{input.size(), F});
    if (features.empty()) {
      if (F != 1) throw DimensionError("network expects " + std::to_string(F) + " input channels but clouds carry none");
      f.fill(T(1));
    } else {
      for (std::size_t b = 0; b < input.clouds(); ++b) {
        const std::size_t n = input.offsets[b + 1] - input.offsets[b];
        if (features[b].size() != n * F) throw DimensionError("cloud feature array does not match the input channels");
        for (std::size_t i = 0; i < n * F; ++i) f[input.offsets[b] * F + i] = static_cast<T>(features[b][i]);
      }
    }
    return ad::constant(std::move(f));
  }

  NetworkConfig cfg_;
  FKAConv<T> stem_;
  BatchNorm<T> stem_bn_;
  std::vector<BlockSpec> layout_;
  std::vector<ResidualBlock<T>> blocks_;
  std::vector<Linear<T>> decoder_;
  std::vector<BatchNorm<T>> decoder_bn_;
  Linear<T> head_;
  ad::ParamRegistry<T> registry_;
};

// ---------------------------------------------------------------------------
// Inference helpers
// ---------------------------------------------------------------------------

inline std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

inline std::vector<double> min_max_scale(std::vector<double> v) {
  if (v.empty()) return v;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, range = *hi - *lo;
  for (auto& x : v) x = range > 0 ? (x - a) / range : 0.0;
  return v;
}

struct VoteResult {
  int label = 0;
  std::vector<double> mean_scores;  // average logits over votes
  std::vector<int> votes;           // argmax of every pass
};

/// n_votes evaluation passes with sampling seeds seed, seed+1, ...; the label
/// is the most frequent argmax (ties → lowest class).
template <class T>
VoteResult classify(Network<T>& net, const PointCloud& cloud, std::size_t n_votes, std::uint64_t seed) {
  if (net.config().task != Task::kClassification) throw ConfigError("classify needs a classification network");
  if (n_votes == 0) throw ParameterError("n_votes must be at least 1");
  const std::size_t C = net.config().num_classes;
  VoteResult r;
  r.mean_scores.assign(C, 0.0);
  std::vector<std::size_t> counts(C, 0);
  for (std::size_t v = 0; v < n_votes; ++v) {
    const auto pass = net.forward({&cloud}, false, seed + v);
    std::vector<double> row(C);
    for (std::size_t c = 0; c < C; ++c) row[c] = static_cast<double>(pass.scores.value()[c]);
    for (std::size_t c = 0; c < C; ++c) r.mean_scores[c] += row[c] / static_cast<double>(n_votes);
    const auto a = argmax_row(row);
    r.votes.push_back(static_cast<int>(a));
    ++counts[a];
  }
  r.label = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  return r;
}

/// Per-point labels of one cloud.
template <class T>
std::vector<int> segment(Network<T>& net, const PointCloud& cloud, std::uint64_t seed) {
  if (net.config().task != Task::kSegmentation) throw ConfigError("segment needs a segmentation network");
  const auto pass = net.forward({&cloud}, false, seed);
  const std::size_t C = net.config().num_classes;
  std::vector<int> out(cloud.size());
  std::vector<double> row(C);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t c = 0; c < C; ++c) row[c] = static_cast<double>(pass.scores.value()[i * C + c]);
    out[i] = static_cast<int>(argmax_row(row));
  }
  return out;
}

/// Activation of one channel of one layer (0: stem, i: residual block i),
/// copied to every input point from its nearest support and min-max scaled to
/// [0, 1]. A constant channel maps to all zeros.
template <class T>
std::vector<double> filter_response(Network<T>& net, const PointCloud& cloud, std::size_t layer, std::size_t filter,
                                    std::uint64_t seed) {
  if (layer >= net.num_layers())
    throw ParameterError("layer " + std::to_string(layer) + " out of range [0, " + std::to_string(net.num_layers()) + ")");
  const std::size_t width = net.layer_width(layer);
  if (filter >= width)
    throw ParameterError("filter " + std::to_string(filter) + " out of range [0, " + std::to_string(width) + ")");
  const auto pass = net.forward({&cloud}, false, seed);
  const auto& act = pass.layer_outputs[layer];
  const auto& level = pass.pyramid.levels[pass.layer_levels[layer]];
  const auto nearest = detail::nearest_ids(level.coords, cloud.coords);
  std::vector<double> out(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) out[i] = static_cast<double>(act.value()[nearest[i] * width + filter]);
  return min_max_scale(out);
}

}  // namespace fkac
