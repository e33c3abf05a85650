#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include "fkaconv/error.hpp"
#include "fkaconv/parallel.hpp"

namespace fkac {

using Vec3 = std::array<double, 3>;

inline double squared_distance(const Vec3& a, const Vec3& b) noexcept {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// N points with optional N×F features and N labels.
struct PointCloud {
  std::vector<Vec3> coords;
  std::size_t feature_dim = 0;
  std::vector<double> features;  // row-major N×feature_dim
  std::vector<int> labels;       // empty or N entries

  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> c) : coords(std::move(c)) {}

  std::size_t size() const noexcept { return coords.size(); }
  bool has_features() const noexcept { return feature_dim > 0; }
  bool has_labels() const noexcept { return !labels.empty(); }

  void validate() const {
    if (coords.empty()) throw EmptyInputError("point cloud has no points");
    for (std::size_t i = 0; i < coords.size(); ++i)
      for (double v : coords[i])
        if (!std::isfinite(v)) throw ParameterError("non-finite coordinate at point " + std::to_string(i));
    if (features.size() != coords.size() * feature_dim)
      throw DimensionError("feature array does not have N x F entries");
    if (!labels.empty() && labels.size() != coords.size())
      throw DimensionError("label array length differs from point count");
  }

  /// Subset in the given order. Features and labels follow their points.
  PointCloud select(std::span<const std::size_t> ids) const {
    PointCloud out;
    out.coords.reserve(ids.size());
    out.feature_dim = feature_dim;
    for (auto i : ids) {
      out.coords.push_back(coords.at(i));
      if (feature_dim)
        out.features.insert(out.features.end(), features.begin() + static_cast<std::ptrdiff_t>(i * feature_dim),
                            features.begin() + static_cast<std::ptrdiff_t>((i + 1) * feature_dim));
      if (!labels.empty()) out.labels.push_back(labels[i]);
    }
    return out;
  }
};

struct BoundingBox {
  Vec3 min{0, 0, 0};
  Vec3 max{0, 0, 0};

  double diag() const noexcept {
    return std::sqrt(squared_distance(min, max));
  }
};

inline BoundingBox bounding_box(std::span<const Vec3> pts) {
  if (pts.empty()) throw EmptyInputError("bounding box of an empty point set");
  BoundingBox b{pts[0], pts[0]};
  for (const auto& p : pts)
    for (int a = 0; a < 3; ++a) {
      b.min[a] = std::min(b.min[a], p[a]);
      b.max[a] = std::max(b.max[a], p[a]);
    }
  return b;
}

/// Length of the axis-aligned bounding-box diagonal.
inline double bounding_diag(std::span<const Vec3> pts) { return bounding_box(pts).diag(); }
inline double bounding_diag(const PointCloud& cloud) { return bounding_diag(cloud.coords); }

/// Row s holds the k neighbors of query s, nearest first.
struct NeighborIndex {
  std::size_t k = 0;
  std::vector<std::size_t> support_ids;  // empty when queries were free coordinates
  std::vector<std::size_t> indices;      // rows × k

  std::size_t rows() const noexcept { return k ? indices.size() / k : 0; }
  std::span<const std::size_t> row(std::size_t s) const {
    return std::span<const std::size_t>(indices).subspan(s * k, k);
  }
  bool operator==(const NeighborIndex&) const = default;
};

namespace detail {

struct Candidate {
  double d2;
  std::size_t idx;
  bool operator<(const Candidate& o) const noexcept { return d2 < o.d2 || (d2 == o.d2 && idx < o.idx); }
};

// Writes min(k, n) nearest candidates then pads with the nearest one.
inline void emit_row(std::vector<Candidate>& best, std::size_t k, std::size_t* out) {
  std::sort(best.begin(), best.end());
  for (std::size_t j = 0; j < k; ++j) out[j] = best[j < best.size() ? j : 0].idx;
}

inline void check_knn_args(std::span<const Vec3> source, std::size_t k) {
  if (source.empty()) throw EmptyInputError("k-NN over an empty source cloud");
  if (k == 0) throw ParameterError("k-NN requires k >= 1");
}

}  // namespace detail

/// Exhaustive k-NN. Ties in distance go to the lower source index; when the
/// source has fewer than k points the row is padded with its nearest point.
inline NeighborIndex knn_points(std::span<const Vec3> source, std::span<const Vec3> queries, std::size_t k) {
  detail::check_knn_args(source, k);
  NeighborIndex out;
  out.k = k;
  out.indices.resize(queries.size() * k);
  const std::size_t keep = std::min(k, source.size());
  parallel_for(queries.size(), [&](std::size_t s) {
    std::vector<detail::Candidate> all(source.size());
    for (std::size_t i = 0; i < source.size(); ++i) all[i] = {squared_distance(queries[s], source[i]), i};
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end());
    all.resize(keep);
    detail::emit_row(all, k, out.indices.data() + s * k);
  });
  return out;
}

inline NeighborIndex knn(std::span<const Vec3> source, std::span<const std::size_t> support_ids, std::size_t k) {
  std::vector<Vec3> q;
  q.reserve(support_ids.size());
  for (auto id : support_ids) {
    if (id >= source.size()) throw DimensionError("support id " + std::to_string(id) + " out of range");
    q.push_back(source[id]);
  }
  auto out = knn_points(source, q, k);
  out.support_ids.assign(support_ids.begin(), support_ids.end());
  return out;
}

inline NeighborIndex knn(const PointCloud& source, std::span<const std::size_t> support_ids, std::size_t k) {
  return knn(source.coords, support_ids, k);
}

/// Uniform hash grid for exact k-NN. Cells have edge diag/∛N; a query visits
/// rings of cells around its own until the k-th best distance is below the
/// distance to any unvisited cell.
class KnnGrid {
 public:
  explicit KnnGrid(std::span<const Vec3> pts) : pts_(pts) {
    if (pts.empty()) throw EmptyInputError("k-NN over an empty source cloud");
    box_ = bounding_box(pts);
    double cell = box_.diag() / std::cbrt(static_cast<double>(pts.size()));
    if (!(cell > 0)) cell = 1.0;
    const std::size_t occupied = build(cell);
    // Aim for about two points per occupied cell; occupancy scales between the
    // square and the cube of the cell size, so split the difference.
    const double per_cell = static_cast<double>(pts.size()) / static_cast<double>(occupied);
    if (per_cell > 4.0) {
      double finer = cell * std::clamp(std::pow(2.0 / per_cell, 0.4), 0.25, 1.0);
      while (cell_count(finer) > 8 * pts.size() + 64) finer *= 1.25;
      if (finer < cell) build(finer);
    }
  }

  std::size_t size() const noexcept { return pts_.size(); }

  /// Writes exactly k indices to `out` (padding as in knn_points).
  void query(const Vec3& q, std::size_t k, std::size_t* out) const {
    const std::size_t keep = std::min(k, pts_.size());
    thread_local std::vector<detail::Candidate> heap;  // max-heap: worst candidate in front
    heap.clear();
    const auto c = cell_coords(q);
    const std::int64_t max_ring = std::max({dims_[0], dims_[1], dims_[2]});
    for (std::int64_t r = 0; r <= max_ring; ++r) {
      visit_ring(c, r, [&](std::size_t idx) {
        const detail::Candidate cand{squared_distance(q, pts_[idx]), idx};
        if (heap.size() < keep) {
          heap.push_back(cand);
          std::push_heap(heap.begin(), heap.end());
        } else if (cand < heap.front()) {
          std::pop_heap(heap.begin(), heap.end());
          heap.back() = cand;
          std::push_heap(heap.begin(), heap.end());
        }
      });
      if (heap.size() == keep) {
        const double bound = unvisited_bound(q, c, r);
        if (heap.front().d2 < bound * bound) break;
      }
    }
    std::sort_heap(heap.begin(), heap.end());
    std::reverse(heap.begin(), heap.end());  // emit_row expects worst first
    detail::emit_row(heap, k, out);
  }

 private:
  std::size_t cell_count(double cell) const {
    double n = 1;
    for (int a = 0; a < 3; ++a) n *= std::floor((box_.max[a] - box_.min[a]) / cell) + 1;
    return n > 1e18 ? std::numeric_limits<std::size_t>::max() : static_cast<std::size_t>(n);
  }

  // Buckets every point for the given cell size; returns the number of occupied cells.
  std::size_t build(double cell) {
    cell_ = cell;
    for (int a = 0; a < 3; ++a)
      dims_[a] = static_cast<std::int64_t>(std::floor((box_.max[a] - box_.min[a]) / cell_)) + 1;
    const std::size_t ncells = static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]);
    start_.assign(ncells + 1, 0);
    std::vector<std::size_t> cell_of(pts_.size());
    for (std::size_t i = 0; i < pts_.size(); ++i) {
      const auto c = cell_coords(pts_[i]);
      cell_of[i] = flat(c[0], c[1], c[2]);
      ++start_[cell_of[i] + 1];
    }
    std::size_t occupied = 0;
    for (std::size_t c = 0; c < ncells; ++c) {
      occupied += start_[c + 1] > 0;
      start_[c + 1] += start_[c];
    }
    ids_.resize(pts_.size());
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    for (std::size_t i = 0; i < pts_.size(); ++i) ids_[fill[cell_of[i]]++] = i;  // ascending within a cell
    return occupied;
  }

  std::array<std::int64_t, 3> cell_coords(const Vec3& p) const {
    std::array<std::int64_t, 3> c{};
    for (int a = 0; a < 3; ++a) {
      const double f = std::floor((p[a] - box_.min[a]) / cell_);
      c[a] = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::clamp(f, -1.0, 1e15)), 0, dims_[a] - 1);
    }
    return c;
  }

  std::size_t flat(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return static_cast<std::size_t>((z * dims_[1] + y) * dims_[0] + x);
  }

  template <class Fn>
  void visit_ring(const std::array<std::int64_t, 3>& c, std::int64_t r, Fn&& fn) const {
    std::array<std::int64_t, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max<std::int64_t>(0, c[a] - r);
      hi[a] = std::min<std::int64_t>(dims_[a] - 1, c[a] + r);
    }
    for (std::int64_t z = lo[2]; z <= hi[2]; ++z)
      for (std::int64_t y = lo[1]; y <= hi[1]; ++y) {
        const bool yz_inner = std::abs(z - c[2]) < r && std::abs(y - c[1]) < r;
        for (std::int64_t x = lo[0]; x <= hi[0]; ++x) {
          if (yz_inner && std::abs(x - c[0]) < r) {
            x = std::min(hi[0], c[0] + r - 1);  // skip interior run of the block
            continue;
          }
          const std::size_t cell = flat(x, y, z);
          for (std::size_t j = start_[cell]; j < start_[cell + 1]; ++j) fn(ids_[j]);
        }
      }
  }

  // Lower bound on the distance from q to any point outside the visited block.
  double unvisited_bound(const Vec3& q, const std::array<std::int64_t, 3>& c, std::int64_t r) const {
    double bound = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      if (c[a] - r > 0) bound = std::min(bound, q[a] - (box_.min[a] + static_cast<double>(c[a] - r) * cell_));
      if (c[a] + r < dims_[a] - 1)
        bound = std::min(bound, box_.min[a] + static_cast<double>(c[a] + r + 1) * cell_ - q[a]);
    }
    // Slack covers rounding in the floor() that assigned points to cells.
    return std::max(bound - 1e-9 * cell_, 0.0);
  }

  std::span<const Vec3> pts_;
  BoundingBox box_;
  double cell_ = 1.0;
  std::array<std::int64_t, 3> dims_{1, 1, 1};
  std::vector<std::size_t> start_;
  std::vector<std::size_t> ids_;
};

/// Same contract and results as knn_points, accelerated by KnnGrid.
inline NeighborIndex knn_grid_points(std::span<const Vec3> source, std::span<const Vec3> queries, std::size_t k) {
  detail::check_knn_args(source, k);
  KnnGrid grid(source);
  NeighborIndex out;
  out.k = k;
  out.indices.resize(queries.size() * k);
  parallel_for(queries.size(), [&](std::size_t s) { grid.query(queries[s], k, out.indices.data() + s * k); });
  return out;
}

inline NeighborIndex knn_grid(std::span<const Vec3> source, std::span<const std::size_t> support_ids, std::size_t k) {
  std::vector<Vec3> q;
  q.reserve(support_ids.size());
  for (auto id : support_ids) {
    if (id >= source.size()) throw DimensionError("support id " + std::to_string(id) + " out of range");
    q.push_back(source[id]);
  }
  auto out = knn_grid_points(source, q, k);
  out.support_ids.assign(support_ids.begin(), support_ids.end());
  return out;
}

inline NeighborIndex knn_grid(const PointCloud& source, std::span<const std::size_t> support_ids, std::size_t k) {
  return knn_grid(source.coords, support_ids, k);
}

/// Local neighbor coordinates (p_i − q) / r_t, S×k×3, plus the batch mean of
/// the per-support farthest-neighbor distance.
struct NormalizedNeighborhoods {
  std::vector<double> local_coords;
  std::size_t rows = 0;
  std::size_t k = 0;
  double batch_mean_radius = 0;
};

/// Farthest-neighbor distance of every support point.
inline std::vector<double> neighborhood_radii(std::span<const Vec3> source, const NeighborIndex& index) {
  std::vector<double> radii(index.rows(), 0.0);
  for (std::size_t s = 0; s < index.rows(); ++s) {
    const Vec3& q = source[index.support_ids.at(s)];
    double m = 0;
    for (auto i : index.row(s)) m = std::max(m, squared_distance(source[i], q));
    radii[s] = std::sqrt(m);
  }
  return radii;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline NormalizedNeighborhoods normalize_neighborhoods(std::span<const Vec3> source, const NeighborIndex& index,
                                                       double r_t) {
  if (!(r_t > 0)) throw ParameterError("normalization radius must be positive, got " + std::to_string(r_t));
  if (index.support_ids.size() != index.rows())
    throw DimensionError("neighbor index lacks support ids for normalization");
  NormalizedNeighborhoods out;
  out.rows = index.rows();
  out.k = index.k;
  out.local_coords.resize(out.rows * out.k * 3);
  for (std::size_t s = 0; s < out.rows; ++s) {
    const Vec3& q = source[index.support_ids[s]];
    auto row = index.row(s);
    for (std::size_t j = 0; j < index.k; ++j)
      for (int a = 0; a < 3; ++a) out.local_coords[(s * index.k + j) * 3 + a] = (source[row[j]][a] - q[a]) / r_t;
  }
  out.batch_mean_radius = mean_of(neighborhood_radii(source, index));
  return out;
}

inline NormalizedNeighborhoods normalize_neighborhoods(const PointCloud& source, const NeighborIndex& index,
                                                       double r_t) {
  return normalize_neighborhoods(source.coords, index, r_t);
}

}  // namespace fkac
