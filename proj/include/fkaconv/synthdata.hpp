#pragma once

// Seeded synthetic scenes: surface samples of simple primitives with Gaussian
// noise and a rigid transform, a planar room with labelled faces, and a
// uniform volume cloud for benchmarks.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fkaconv/error.hpp"
#include "fkaconv/geometry.hpp"

namespace fkac {

enum class SceneKind { kPlane, kSphere, kCube, kPlanarRoom, kUniformCube };

inline std::string_view scene_kind_name(SceneKind k) {
  switch (k) {
    case SceneKind::kPlane: return "plane";
    case SceneKind::kSphere: return "sphere";
    case SceneKind::kCube: return "cube";
    case SceneKind::kPlanarRoom: return "planar_room";
    case SceneKind::kUniformCube: return "uniform_cube";
  }
  return "?";
}

inline SceneKind parse_scene_kind(std::string_view s) {
  for (auto k : {SceneKind::kPlane, SceneKind::kSphere, SceneKind::kCube, SceneKind::kPlanarRoom, SceneKind::kUniformCube})
    if (scene_kind_name(k) == s) return k;
  throw ParameterError("unknown scene kind '" + std::string(s) + "'");
}

using Mat3 = std::array<double, 9>;  // row-major

inline constexpr Mat3 kIdentity3{1, 0, 0, 0, 1, 0, 0, 0, 1};

inline Vec3 rotate(const Mat3& R, const Vec3& p) {
  return {R[0] * p[0] + R[1] * p[1] + R[2] * p[2], R[3] * p[0] + R[4] * p[1] + R[5] * p[2],
          R[6] * p[0] + R[7] * p[1] + R[8] * p[2]};
}

/// Uniform random rotation from a normalized Gaussian quaternion.
template <class Rng>
Mat3 random_rotation(Rng& rng) {
  std::normal_distribution<double> g;
  double w = g(rng), x = g(rng), y = g(rng), z = g(rng);
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  w /= n, x /= n, y /= n, z /= n;
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
          2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

/// Primitive geometry before noise and transform:
///   plane         square [−e/2, e/2]² at z = 0
///   sphere        radius e about the origin
///   cube          surface of the cube [−e/2, e/2]³
///   planar_room   floor [0,e]² (label 0), walls x = 0 (label 1) and y = 0 (label 2), height e/2
///   uniform_cube  volume [0, e]³
struct SceneSpec {
  SceneKind kind = SceneKind::kPlane;
  std::size_t n_points = 1024;
  double noise = 0.0;
  std::uint64_t seed = 0;
  double extent = 1.0;
  Mat3 rotation = kIdentity3;
  Vec3 translation{0, 0, 0};

  void validate() const {
    if (n_points < 8) throw ParameterError("scene needs at least 8 points");
    if (!(noise >= 0)) throw ParameterError("scene noise must be non-negative");
    if (!(extent > 0)) throw ParameterError("scene extent must be positive");
  }
};

inline PointCloud generate(const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  // noise has its own stream so a noise-free twin shares the clean points
  std::mt19937_64 noise_rng(spec.seed ^ 0x6a09e667f3bcc909ULL);
  std::normal_distribution<double> noise_g(0.0, spec.noise > 0 ? spec.noise : 1.0);
  const double e = spec.extent;
  PointCloud cloud;
  cloud.coords.reserve(spec.n_points);
  const bool labelled = spec.kind == SceneKind::kPlanarRoom;
  for (std::size_t i = 0; i < spec.n_points; ++i) {
    Vec3 p{};
    int label = 0;
    switch (spec.kind) {
      case SceneKind::kPlane:
        p = {(u(rng) - 0.5) * e, (u(rng) - 0.5) * e, 0.0};
        break;
      case SceneKind::kSphere: {
        Vec3 d{g(rng), g(rng), g(rng)};
        const double n = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        p = {e * d[0] / n, e * d[1] / n, e * d[2] / n};
        break;
      }
      case SceneKind::kCube: {
        const auto face = static_cast<int>(u(rng) * 6.0) % 6;
        const double a = (u(rng) - 0.5) * e, b = (u(rng) - 0.5) * e, c = (face % 2 ? 0.5 : -0.5) * e;
        const int axis = face / 2;
        p[axis] = c;
        p[(axis + 1) % 3] = a;
        p[(axis + 2) % 3] = b;
        break;
      }
      case SceneKind::kPlanarRoom: {
        // floor area e², each wall e²/2: pick a face in proportion to its area
        const double r = u(rng) * 2.0;
        const double a = u(rng) * e, b = u(rng) * e * 0.5;
        if (r < 1.0) {
          p = {u(rng) * e, a, 0.0};
        } else if (r < 1.5) {
          p = {0.0, a, b};
          label = 1;
        } else {
          p = {a, 0.0, b};
          label = 2;
        }
        break;
      }
      case SceneKind::kUniformCube:
        p = {u(rng) * e, u(rng) * e, u(rng) * e};
        break;
    }
    if (spec.noise > 0)
      for (auto& c : p) c += noise_g(noise_rng);
    p = rotate(spec.rotation, p);
    for (int a = 0; a < 3; ++a) p[a] += spec.translation[a];
    cloud.coords.push_back(p);
    if (labelled) cloud.labels.push_back(label);
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct LabeledCloud {
  PointCloud cloud;
  int label = 0;
};

inline constexpr std::array<SceneKind, 3> kToyClasses{SceneKind::kSphere, SceneKind::kCube, SceneKind::kPlane};

/// Spec of toy sample i of class c: random rotation, translation in [−1, 1]³,
/// scale in [0.8, 1.2] and noise 0.01 × scale.
inline SceneSpec toy_spec(std::size_t cls, std::size_t i, std::size_t n_points, std::uint64_t seed) {
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + cls * 1000003ULL + i);
  std::uniform_real_distribution<double> u(-1.0, 1.0), scale(0.8, 1.2);
  SceneSpec s;
  s.kind = kToyClasses.at(cls);
  s.n_points = n_points;
  s.extent = scale(rng);
  s.noise = 0.01 * s.extent;
  s.rotation = random_rotation(rng);
  s.translation = {u(rng), u(rng), u(rng)};
  s.seed = rng();
  return s;
}

/// Balanced spheres (label 0), cubes (1) and planes (2), class-major order.
inline std::vector<LabeledCloud> make_toy_classification(std::size_t n_per_class, std::size_t n_points,
                                                         std::uint64_t seed) {
  if (n_per_class == 0) throw ParameterError("n_per_class must be at least 1");
  std::vector<LabeledCloud> out;
  out.reserve(3 * n_per_class);
  for (std::size_t c = 0; c < kToyClasses.size(); ++c)
    for (std::size_t i = 0; i < n_per_class; ++i)
      out.push_back({generate(toy_spec(c, i, n_points, seed)), static_cast<int>(c)});
  return out;
}

/// Planar rooms with random extent in [1, 4], small noise and a random yaw.
inline SceneSpec planar_room_spec(std::size_t n_points, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ext(1.0, 4.0), yaw(0.0, 2.0 * 3.141592653589793);
  SceneSpec s;
  s.kind = SceneKind::kPlanarRoom;
  s.n_points = n_points;
  s.extent = ext(rng);
  s.noise = 0.002 * s.extent;
  const double t = yaw(rng);
  s.rotation = {std::cos(t), -std::sin(t), 0, std::sin(t), std::cos(t), 0, 0, 0, 1};
  s.seed = rng();
  return s;
}

inline std::vector<LabeledCloud> make_planar_rooms(std::size_t count, std::size_t n_points, std::uint64_t seed) {
  std::vector<LabeledCloud> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back({generate(planar_room_spec(n_points, seed * 7919 + i)), 0});
  return out;
}

/// Flattened raw coordinates, one centroid per class, nearest centroid wins.
inline double nearest_centroid_accuracy(const std::vector<LabeledCloud>& train, const std::vector<LabeledCloud>& test,
                                        std::size_t num_classes) {
  if (train.empty() || test.empty()) throw EmptyInputError("nearest-centroid baseline needs data");
  const std::size_t dim = train.front().cloud.size() * 3;
  std::vector<std::vector<double>> centroid(num_classes, std::vector<double>(dim, 0.0));
  std::vector<std::size_t> count(num_classes, 0);
  auto flat = [dim](const PointCloud& c, std::size_t j) {
    if (c.size() * 3 != dim) throw DimensionError("nearest-centroid baseline needs equal cloud sizes");
    return c.coords[j / 3][j % 3];
  };
  for (const auto& s : train) {
    ++count.at(static_cast<std::size_t>(s.label));
    for (std::size_t j = 0; j < dim; ++j) centroid[s.label][j] += flat(s.cloud, j);
  }
  for (std::size_t c = 0; c < num_classes; ++c)
    for (auto& v : centroid[c]) v /= static_cast<double>(std::max<std::size_t>(count[c], 1));
  std::size_t correct = 0;
  for (const auto& s : test) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (!count[c]) continue;
      double d = 0;
      for (std::size_t j = 0; j < dim; ++j) d += (flat(s.cloud, j) - centroid[c][j]) * (flat(s.cloud, j) - centroid[c][j]);
      if (d < best_d) best_d = d, best = c;
    }
    correct += static_cast<int>(best) == s.label;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const SceneSpec& s) {
  return {{"kind", std::string(scene_kind_name(s.kind))},
          {"n_points", s.n_points},
          {"noise", s.noise},
          {"seed", s.seed},
          {"extent", s.extent},
          {"rotation", s.rotation},
          {"translation", s.translation}};
}

inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  SceneSpec s;
  try {
    s.kind = parse_scene_kind(j.at("kind").get<std::string>());
    s.n_points = j.value("n_points", s.n_points);
    s.noise = j.value("noise", s.noise);
    s.seed = j.value("seed", s.seed);
    s.extent = j.value("extent", s.extent);
    if (j.contains("rotation")) s.rotation = j.at("rotation").get<Mat3>();
    if (j.contains("translation")) s.translation = j.at("translation").get<Vec3>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scene spec: ") + e.what());
  }
  s.validate();
  return s;
}

inline nlohmann::json manifest_json(const std::vector<SceneSpec>& specs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : specs) arr.push_back(to_json(s));
  return arr;
}

inline std::vector<SceneSpec> manifest_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ConfigError("scene manifest must be a JSON array");
  std::vector<SceneSpec> out;
  for (const auto& e : j) out.push_back(scene_spec_from_json(e));
  return out;
}

}  // namespace fkac
