#pragma once

// Support-point selection: space-quantization sampling with the diag/√|Q|
// voxel rule, plus farthest-point, random and rejection baselines.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fkaconv/error.hpp"
#include "fkaconv/geometry.hpp"

namespace fkac {

enum class Strategy { kQuantized, kFarthest, kRandom, kRejection };

inline std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kQuantized: return "quantized";
    case Strategy::kFarthest: return "fps";
    case Strategy::kRandom: return "random";
    case Strategy::kRejection: return "rejection";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view name) {
  if (name == "quantized") return Strategy::kQuantized;
  if (name == "fps") return Strategy::kFarthest;
  if (name == "random") return Strategy::kRandom;
  if (name == "rejection") return Strategy::kRejection;
  throw ConfigError("unknown sampling strategy '" + std::string(name) + "'");
}

struct SamplerReport {
  std::vector<std::size_t> selected;
  std::size_t iterations = 1;
  double elapsed = 0;  // seconds
  Strategy strategy = Strategy::kQuantized;
};

struct VoxelKey {
  std::int64_t ix = 0, iy = 0, iz = 0;
  bool operator==(const VoxelKey&) const = default;
};

inline VoxelKey voxel_key(const Vec3& p, const Vec3& origin, double v) {
  auto cell = [v](double x) {
    const double f = std::floor(x / v);
    return static_cast<std::int64_t>(std::clamp(f, -4e18, 4e18));
  };
  return {cell(p[0] - origin[0]), cell(p[1] - origin[1]), cell(p[2] - origin[2])};
}

/// v = diag / √|Q|
inline double voxel_size_rule(double diag, std::size_t q_count) {
  if (!(diag > 0)) throw ParameterError("voxel size rule needs a positive diagonal");
  if (q_count == 0) throw ParameterError("voxel size rule needs |Q| >= 1");
  return diag / std::sqrt(static_cast<double>(q_count));
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline void check_q(std::size_t n, std::size_t q) {
  if (n == 0) throw EmptyInputError("sampling an empty cloud");
  if (q == 0) throw CardinalityError("requested zero support points");
  if (q > n)
    throw CardinalityError("requested " + std::to_string(q) + " support points from " + std::to_string(n));
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// Open-addressing map VoxelKey → slot, rebuilt for every quantization pass.
class VoxelTable {
 public:
  explicit VoxelTable(std::size_t expected) {
    std::size_t cap = 16;
    while (cap < 2 * expected) cap <<= 1;
    keys_.resize(cap);
    slot_.assign(cap, kEmpty);
    mask_ = cap - 1;
  }

  // Returns the slot for `key`, inserting `fresh` when the key is new.
  std::size_t find_or_insert(const VoxelKey& key, std::size_t fresh, bool& inserted) {
    std::size_t h = hash(key) & mask_;
    while (slot_[h] != kEmpty) {
      if (keys_[h] == key) {
        inserted = false;
        return slot_[h];
      }
      h = (h + 1) & mask_;
    }
    keys_[h] = key;
    slot_[h] = fresh;
    inserted = true;
    return fresh;
  }

 private:
  static constexpr std::size_t kEmpty = std::numeric_limits<std::size_t>::max();

  static std::size_t hash(const VoxelKey& k) {
    std::uint64_t h = static_cast<std::uint64_t>(k.ix) * 0x9E3779B97F4A7C15ULL;
    h ^= static_cast<std::uint64_t>(k.iy) * 0xC2B2AE3D27D4EB4FULL + (h << 6) + (h >> 2);
    h ^= static_cast<std::uint64_t>(k.iz) * 0x165667B19E3779F9ULL + (h << 6) + (h >> 2);
    h ^= h >> 29;
    return static_cast<std::size_t>(h);
  }

  std::vector<VoxelKey> keys_;
  std::vector<std::size_t> slot_;
  std::size_t mask_ = 0;
};

struct VoxelWinner {
  std::size_t idx;
  double d2;  // squared distance to the voxel center
};

// One quantization pass over `candidates`: for each occupied voxel, the point
// nearest the voxel center (then lowest index). Winners come back sorted by index.
inline std::vector<std::size_t> quantize_pass(std::span<const Vec3> pts, std::span<const std::size_t> candidates,
                                              const Vec3& origin, double v) {
  VoxelTable table(candidates.size());
  std::vector<VoxelWinner> winners;
  winners.reserve(candidates.size());
  for (auto i : candidates) {
    const VoxelKey key = voxel_key(pts[i], origin, v);
    const Vec3 center{origin[0] + (static_cast<double>(key.ix) + 0.5) * v,
                      origin[1] + (static_cast<double>(key.iy) + 0.5) * v,
                      origin[2] + (static_cast<double>(key.iz) + 0.5) * v};
    const double d2 = squared_distance(pts[i], center);
    bool inserted = false;
    const std::size_t slot = table.find_or_insert(key, winners.size(), inserted);
    if (inserted) {
      winners.push_back({i, d2});
    } else {
      auto& w = winners[slot];
      if (d2 < w.d2 || (d2 == w.d2 && i < w.idx)) w = {i, d2};
    }
  }
  std::vector<std::size_t> out;
  out.reserve(winners.size());
  for (const auto& w : winners) out.push_back(w.idx);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Number of distinct voxels of edge v (grid anchored at `origin`) hit by `pts`.
inline std::size_t occupied_voxels(std::span<const Vec3> pts, const Vec3& origin, double v) {
  detail::VoxelTable table(pts.size());
  std::size_t count = 0;
  for (const auto& p : pts) {
    bool inserted = false;
    table.find_or_insert(voxel_key(p, origin, v), count, inserted);
    if (inserted) ++count;
  }
  return count;
}

inline std::size_t occupied_voxels(std::span<const Vec3> pts, double v) {
  return occupied_voxels(pts, bounding_box(pts).min, v);
}

/// Iterative space-quantization sampling. Pass 1 uses v = diag/√q on a grid
/// anchored at the bounding-box minimum; every following pass runs on the
/// still-unselected points with v halved. Overshoot in the final pass is
/// trimmed by a seeded uniform draw among that pass's selections.
inline SamplerReport quantized_sampling(std::span<const Vec3> pts, std::size_t q_count, std::uint64_t seed) {
  const auto t0 = detail::Clock::now();
  detail::check_q(pts.size(), q_count);
  SamplerReport rep;
  rep.strategy = Strategy::kQuantized;
  rep.iterations = 0;
  const BoundingBox box = bounding_box(pts);
  const double diag = box.diag();
  if (!(diag > 0)) {
    // Every point coincides; any subset is equivalent.
    rep.selected.resize(q_count);
    std::iota(rep.selected.begin(), rep.selected.end(), std::size_t{0});
    rep.iterations = 1;
    rep.elapsed = detail::seconds_since(t0);
    return rep;
  }
  std::mt19937_64 rng(seed);
  double v = voxel_size_rule(diag, q_count);
  std::vector<std::size_t> remaining(pts.size());
  std::iota(remaining.begin(), remaining.end(), std::size_t{0});
  std::vector<char> taken(pts.size(), 0);
  rep.selected.reserve(q_count);
  while (rep.selected.size() < q_count) {
    ++rep.iterations;
    auto winners = detail::quantize_pass(pts, remaining, box.min, v);
    const std::size_t need = q_count - rep.selected.size();
    if (winners.size() > need) {
      for (std::size_t i = 0; i < need; ++i) std::swap(winners[i], winners[i + detail::uniform_index(rng, winners.size() - i)]);
      winners.resize(need);
      std::sort(winners.begin(), winners.end());
    }
    for (auto w : winners) {
      taken[w] = 1;
      rep.selected.push_back(w);
    }
    std::erase_if(remaining, [&](std::size_t i) { return taken[i] != 0; });
    v *= 0.5;
  }
  rep.elapsed = detail::seconds_since(t0);
  return rep;
}

inline SamplerReport quantized_sampling(const PointCloud& cloud, std::size_t q_count, std::uint64_t seed) {
  return quantized_sampling(cloud.coords, q_count, seed);
}

/// Greedy farthest-point sampling from a given first point. Ties pick the lowest index.
inline SamplerReport farthest_point_sampling_from(std::span<const Vec3> pts, std::size_t q_count, std::size_t first) {
  const auto t0 = detail::Clock::now();
  detail::check_q(pts.size(), q_count);
  if (first >= pts.size()) throw ParameterError("first FPS index out of range");
  SamplerReport rep;
  rep.strategy = Strategy::kFarthest;
  rep.selected.reserve(q_count);
  std::vector<double> mind(pts.size(), std::numeric_limits<double>::infinity());
  std::size_t cur = first;
  for (std::size_t it = 0; it < q_count; ++it) {
    rep.selected.push_back(cur);
    mind[cur] = -1.0;
    const Vec3 c = pts[cur];
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (mind[i] < 0) continue;
      const double d = squared_distance(pts[i], c);
      if (d < mind[i]) mind[i] = d;
      if (mind[i] > best_d) {
        best_d = mind[i];
        best = i;
      }
    }
    cur = best;
  }
  rep.elapsed = detail::seconds_since(t0);
  return rep;
}

/// The first point is drawn uniformly from `seed`.
inline SamplerReport farthest_point_sampling(std::span<const Vec3> pts, std::size_t q_count, std::uint64_t seed) {
  const auto t0 = detail::Clock::now();
  detail::check_q(pts.size(), q_count);
  std::mt19937_64 rng(seed);
  auto rep = farthest_point_sampling_from(pts, q_count, detail::uniform_index(rng, pts.size()));
  rep.elapsed = detail::seconds_since(t0);
  return rep;
}

inline SamplerReport farthest_point_sampling(const PointCloud& cloud, std::size_t q_count, std::uint64_t seed) {
  return farthest_point_sampling(cloud.coords, q_count, seed);
}

namespace detail {

// Index pool with O(1) uniform draw and O(1) removal of arbitrary members.
class IndexPool {
 public:
  explicit IndexPool(std::size_t n) : items_(n), pos_(n) {
    std::iota(items_.begin(), items_.end(), std::size_t{0});
    std::iota(pos_.begin(), pos_.end(), std::size_t{0});
  }

  bool empty() const noexcept { return items_.empty(); }
  bool contains(std::size_t i) const noexcept { return pos_[i] != kAbsent; }

  std::size_t draw(std::mt19937_64& rng) {
    const std::size_t v = items_[uniform_index(rng, items_.size())];
    remove(v);
    return v;
  }

  void remove(std::size_t v) {
    const std::size_t p = pos_[v];
    if (p == kAbsent) return;
    const std::size_t last = items_.back();
    items_[p] = last;
    pos_[last] = p;
    items_.pop_back();
    pos_[v] = kAbsent;
  }

  void reset(const std::vector<char>& excluded) {
    items_.clear();
    for (std::size_t i = 0; i < pos_.size(); ++i) {
      if (excluded[i]) {
        pos_[i] = kAbsent;
      } else {
        pos_[i] = items_.size();
        items_.push_back(i);
      }
    }
  }

 private:
  static constexpr std::size_t kAbsent = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> items_;
  std::vector<std::size_t> pos_;
};

}  // namespace detail

/// Uniform sampling without replacement.
inline SamplerReport random_sampling(std::span<const Vec3> pts, std::size_t q_count, std::uint64_t seed) {
  const auto t0 = detail::Clock::now();
  detail::check_q(pts.size(), q_count);
  SamplerReport rep;
  rep.strategy = Strategy::kRandom;
  std::mt19937_64 rng(seed);
  detail::IndexPool pool(pts.size());
  rep.selected.reserve(q_count);
  while (rep.selected.size() < q_count) rep.selected.push_back(pool.draw(rng));
  rep.elapsed = detail::seconds_since(t0);
  return rep;
}

inline SamplerReport random_sampling(const PointCloud& cloud, std::size_t q_count, std::uint64_t seed) {
  return random_sampling(cloud.coords, q_count, seed);
}

/// Picks uniformly among unseen points; each pick marks itself and its k
/// nearest neighbors as seen. When the unseen pool runs dry before q_count,
/// it is refilled with every point not yet selected.
inline SamplerReport rejection_sampling(std::span<const Vec3> pts, std::size_t q_count, std::size_t k,
                                        std::uint64_t seed) {
  const auto t0 = detail::Clock::now();
  detail::check_q(pts.size(), q_count);
  SamplerReport rep;
  rep.strategy = Strategy::kRejection;
  std::mt19937_64 rng(seed);
  detail::IndexPool pool(pts.size());
  std::vector<char> selected(pts.size(), 0);
  std::optional<KnnGrid> grid;
  if (k > 0) grid.emplace(pts);
  std::vector<std::size_t> nbrs(k);
  rep.selected.reserve(q_count);
  while (rep.selected.size() < q_count) {
    if (pool.empty()) pool.reset(selected);
    const std::size_t p = pool.draw(rng);
    selected[p] = 1;
    rep.selected.push_back(p);
    if (grid) {
      grid->query(pts[p], k, nbrs.data());
      for (auto nb : nbrs) pool.remove(nb);
    }
  }
  rep.elapsed = detail::seconds_since(t0);
  return rep;
}

inline SamplerReport rejection_sampling(const PointCloud& cloud, std::size_t q_count, std::size_t k,
                                        std::uint64_t seed) {
  return rejection_sampling(cloud.coords, q_count, k, seed);
}

inline SamplerReport run_sampler(Strategy s, std::span<const Vec3> pts, std::size_t q_count, std::size_t k,
                                 std::uint64_t seed) {
  switch (s) {
    case Strategy::kQuantized: return quantized_sampling(pts, q_count, seed);
    case Strategy::kFarthest: return farthest_point_sampling(pts, q_count, seed);
    case Strategy::kRandom: return random_sampling(pts, q_count, seed);
    case Strategy::kRejection: return rejection_sampling(pts, q_count, k, seed);
  }
  throw ParameterError("unknown sampling strategy");
}

/// Largest voxel edge (bisection on [diag/N, diag], tolerance relative to diag,
/// at most 40 halvings) whose single quantization pass occupies ≥ q_count voxels.
inline double dichotomic_optimal_voxel(std::span<const Vec3> pts, std::size_t q_count, double tolerance) {
  detail::check_q(pts.size(), q_count);
  if (!(tolerance > 0)) throw ParameterError("dichotomic search tolerance must be positive");
  const BoundingBox box = bounding_box(pts);
  const double diag = box.diag();
  if (!(diag > 0)) throw ParameterError("dichotomic search on a degenerate cloud");
  auto count = [&](double v) { return occupied_voxels(pts, box.min, v); };
  double lo = diag / static_cast<double>(pts.size());
  double hi = diag;
  if (count(lo) < q_count)
    throw SearchError("cannot reach " + std::to_string(q_count) + " occupied voxels at the lower bracket");
  if (count(hi) >= q_count) return hi;
  for (int it = 0; it < 40 && hi - lo > tolerance * diag; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (count(mid) >= q_count) lo = mid;
    else hi = mid;
  }
  return lo;
}

inline double dichotomic_optimal_voxel(const PointCloud& cloud, std::size_t q_count, double tolerance) {
  return dichotomic_optimal_voxel(cloud.coords, q_count, tolerance);
}

}  // namespace fkac
