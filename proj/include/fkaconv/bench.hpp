#pragma once

// Sampling benchmarks and the voxel-size rule study.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "fkaconv/error.hpp"
#include "fkaconv/geometry.hpp"
#include "fkaconv/sampling.hpp"
#include "fkaconv/synthdata.hpp"

namespace fkac {

inline double median(std::vector<double> v) {
  if (v.empty()) throw EmptyInputError("median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Least-squares slope of log y against log x.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ParameterError("slope fit needs two or more paired samples");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0 && y[i] > 0)) throw ParameterError("slope fit needs positive samples");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0) throw ParameterError("slope fit needs distinct x values");
  return sxy / sxx;
}

struct BenchRow {
  std::string strategy;
  std::size_t n_points = 0;
  std::size_t q_count = 0;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  double elapsed_ms = 0;  // median
  std::size_t iterations = 0;
};

struct BenchOptions {
  std::vector<std::size_t> sizes{10000};
  std::vector<Strategy> strategies{Strategy::kRandom, Strategy::kQuantized, Strategy::kFarthest, Strategy::kRejection};
  std::size_t repeats = 20;
  std::size_t warmup = 3;
  std::size_t k = 16;
  std::uint64_t seed = 0;
};

/// One timed run: support selection of q = n/2 points plus the k-NN of every
/// support, which is what a layer consumes.
inline SamplerReport timed_support_build(std::span<const Vec3> pts, Strategy s, std::size_t q, std::size_t k,
                                         std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  auto r = run_sampler(s, pts, q, k, seed);
  const auto nb = knn_grid(pts, r.selected, k);
  r.elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (nb.rows() != q) throw StateError("support neighborhoods do not match the selection");
  return r;
}

/// Uniform unit-cube clouds of each size; per (size, strategy) the median of
/// `repeats` timings after `warmup` untimed runs.
inline std::vector<BenchRow> bench_sampling(const BenchOptions& opt) {
  if (opt.sizes.empty()) throw ParameterError("sample-bench needs at least one size");
  if (opt.strategies.empty()) throw ParameterError("sample-bench needs at least one strategy");
  if (opt.repeats == 0) throw ParameterError("repeats must be at least 1");
  std::vector<BenchRow> rows;
  for (auto n : opt.sizes) {
    if (n < 2) throw ParameterError("benchmark clouds need at least 2 points");
    SceneSpec spec;
    spec.kind = SceneKind::kUniformCube;
    spec.n_points = std::max<std::size_t>(n, 8);
    spec.seed = opt.seed;
    auto cloud = generate(spec);
    cloud.coords.resize(n);
    const std::size_t q = n / 2;
    for (auto s : opt.strategies) {
      for (std::size_t w = 0; w < opt.warmup; ++w) timed_support_build(cloud.coords, s, q, opt.k, opt.seed + w);
      std::vector<double> ms;
      std::size_t iters = 0;
      for (std::size_t r = 0; r < opt.repeats; ++r) {
        const auto rep = timed_support_build(cloud.coords, s, q, opt.k, opt.seed + r);
        ms.push_back(rep.elapsed * 1e3);
        iters = std::max(iters, rep.iterations);
      }
      rows.push_back({std::string(strategy_name(s)), n, q, opt.k, opt.seed, median(ms), iters});
    }
  }
  return rows;
}

inline std::string sample_bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "strategy,n_points,q_count,k,seed,elapsed_ms,iterations\n" << std::setprecision(6);
  for (const auto& r : rows)
    os << r.strategy << ',' << r.n_points << ',' << r.q_count << ',' << r.k << ',' << r.seed << ',' << r.elapsed_ms
       << ',' << r.iterations << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Voxel-size rule study
// ---------------------------------------------------------------------------

struct VoxelRuleRow {
  std::size_t scene_id = 0;
  double diag = 0;
  std::size_t q_count = 0;
  double v_rule = 0;
  double v_optimal = 0;
  std::size_t iterations = 0;
};

struct VoxelRuleOptions {
  std::size_t n_scenes = 50;
  std::vector<std::size_t> q_counts{64, 256, 1024};
  std::size_t n_points = 8192;
  SceneKind kind = SceneKind::kPlanarRoom;
  bool random_yaw = true;
  double tolerance = 1e-4;  // relative to the diagonal
  std::uint64_t seed = 0;
};

/// Scene i is drawn from seed·7919 + i. Sphere and other kinds are admitted;
/// only planar rooms carry the rule-adequacy expectation.
inline std::vector<VoxelRuleRow> voxel_rule_study(const VoxelRuleOptions& opt) {
  if (opt.q_counts.empty()) throw ParameterError("voxel-rule needs at least one q_count");
  if (opt.n_scenes == 0) throw ParameterError("voxel-rule needs at least one scene");
  for (auto q : opt.q_counts)
    if (q == 0 || q > opt.n_points)
      throw CardinalityError("q_count " + std::to_string(q) + " outside [1, " + std::to_string(opt.n_points) + "]");
  std::vector<VoxelRuleRow> rows;
  for (std::size_t i = 0; i < opt.n_scenes; ++i) {
    SceneSpec spec = planar_room_spec(opt.n_points, opt.seed * 7919 + i);
    spec.kind = opt.kind;
    if (!opt.random_yaw) spec.rotation = kIdentity3;
    const auto cloud = generate(spec);
    const double diag = bounding_diag(cloud.coords);
    for (auto q : opt.q_counts) {
      VoxelRuleRow r;
      r.scene_id = i;
      r.diag = diag;
      r.q_count = q;
      r.v_rule = voxel_size_rule(diag, q);
      r.v_optimal = dichotomic_optimal_voxel(cloud.coords, q, opt.tolerance);
      r.iterations = quantized_sampling(cloud.coords, q, opt.seed + i).iterations;
      rows.push_back(r);
    }
  }
  return rows;
}

inline std::string voxel_rule_csv(const std::vector<VoxelRuleRow>& rows) {
  std::ostringstream os;
  os << "scene_id,diag,q_count,v_rule,v_optimal,iterations\n" << std::setprecision(8);
  for (const auto& r : rows)
    os << r.scene_id << ',' << r.diag << ',' << r.q_count << ',' << r.v_rule << ',' << r.v_optimal << ','
       << r.iterations << '\n';
  return os.str();
}

struct VoxelRuleSummary {
  double rule_at_least_optimal = 0;  // fraction of rows with v_rule ≥ v_optimal
  double at_most_two_iterations = 0;
};

inline VoxelRuleSummary summarize(const std::vector<VoxelRuleRow>& rows) {
  if (rows.empty()) throw EmptyInputError("no voxel-rule rows");
  VoxelRuleSummary s;
  for (const auto& r : rows) {
    s.rule_at_least_optimal += r.v_rule >= r.v_optimal;
    s.at_most_two_iterations += r.iterations <= 2;
  }
  s.rule_at_least_optimal /= static_cast<double>(rows.size());
  s.at_most_two_iterations /= static_cast<double>(rows.size());
  return s;
}

}  // namespace fkac
