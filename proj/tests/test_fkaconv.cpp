#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fkaconv/fkaconv.hpp"
#include "support/finite_diff.hpp"

using namespace fkac;
using fkac::testing::compare_gradients;
using fkac::testing::make_projector;
using fkac::testing::random_tensor;

namespace {

std::vector<Vec3> random_points(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> d(0.0, scale);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = {d(rng), d(rng), d(rng)};
  return pts;
}

std::vector<std::size_t> iota_ids(std::size_t n) {
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return ids;
}

template <class T>
ad::Var<T> random_feats(std::size_t n, std::size_t f, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  Tensor<T> t(Shape{n, f});
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return ad::constant(std::move(t));
}

FKAConvOptions opts(std::size_t in, std::size_t out, std::size_t k = 16, std::size_t kk = 16) {
  FKAConvOptions o;
  o.in_channels = in;
  o.out_channels = out;
  o.k = k;
  o.k_kernel = kk;
  return o;
}

ad::Var<double> local_var(Shape s, std::vector<double> v) { return ad::constant(Tensor<double>(std::move(s), std::move(v))); }

}  // namespace

TEST(Ema, FirstBatchAndUpdateRule) {
  std::mt19937_64 rng(0);
  auto o = opts(1, 1);
  FKAConv<double> layer(o, rng);
  EXPECT_FALSE(layer.radius_initialized());
  EXPECT_EQ(layer.ema_update(2.0), 2.0);

  o.momentum = 0.9;
  FKAConv<double> l2(o, rng);
  l2.set_ema_radius(1.0);
  EXPECT_NEAR(l2.ema_update(2.0), 1.9, 1e-15);
}

TEST(Ema, GeometricConvergenceToConstantInput) {
  std::mt19937_64 rng(0);
  FKAConv<double> layer(opts(1, 1), rng);
  layer.set_ema_radius(5.0);
  const double c = 2.0;
  for (int t = 1; t <= 50; ++t) {
    layer.ema_update(c);
    EXPECT_NEAR(layer.ema_radius() - c, std::pow(0.9, t) * 3.0, 1e-12);
  }
}

TEST(Ema, FrozenLayerRejectsUpdates) {
  std::mt19937_64 rng(0);
  FKAConv<double> layer(opts(1, 1), rng);
  layer.set_frozen(true);
  EXPECT_THROW(layer.ema_update(1.0), StateError);
  EXPECT_THROW(layer.ema_update(-1.0), StateError);
  layer.set_frozen(false);
  EXPECT_THROW(layer.ema_update(0.0), ParameterError);
}

TEST(Ema, FrozenForwardKeepsRadius) {
  std::mt19937_64 rng(1);
  FKAConv<double> layer(opts(2, 3), rng);
  const auto pts = random_points(40, rng);
  const auto feats = random_feats<double>(40, 2, rng);
  layer.forward(pts, iota_ids(10), feats, true);
  const double r = layer.ema_radius();
  layer.set_frozen(true);
  const auto scaled = [&] {
    auto p = pts;
    for (auto& x : p) x = {x[0] * 3, x[1] * 3, x[2] * 3};
    return p;
  }();
  layer.forward(scaled, iota_ids(10), feats, false);
  EXPECT_EQ(layer.ema_radius(), r);
}

TEST(Gate, Examples) {
  std::mt19937_64 rng(0);
  FKAConv<double> layer(opts(1, 1, 2, 2), rng);
  const auto s = layer.gate(local_var({1, 2, 3}, {1, 0, 0, 0, 0, 0}));
  EXPECT_DOUBLE_EQ(s.value()[0], 0.5);
  EXPECT_NEAR(s.value()[1], 0.7310585786300049, 1e-15);
}

TEST(Gate, AlphaBetaGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(2);
  FKAConv<double> layer(opts(1, 1, 5, 4), rng);
  auto local = ad::parameter(random_tensor({3, 5, 3}, rng));
  auto proj = make_projector({3, 5}, rng);
  auto cmp = compare_gradients({layer.alpha(), layer.beta()}, [&] { return proj(layer.gate(local)); });
  EXPECT_LT(cmp.relative_error(), 1e-5);
  auto cmp2 = compare_gradients({local}, [&] { return proj(layer.gate(local)); });
  EXPECT_LT(cmp2.relative_error(), 1e-5);
}

TEST(Alignment, ContextLinearMatchesConcatenation) {
  std::mt19937_64 rng(12);
  const std::size_t S = 3, k = 5, H = 4, G = 4, O = 6;
  auto h = ad::parameter(random_tensor({S, k, H}, rng));
  auto g = ad::parameter(random_tensor({S, G}, rng));
  auto W = ad::parameter(random_tensor({H + G, O}, rng));
  auto b = ad::parameter(random_tensor({O}, rng));
  const auto fused = detail::context_linear(h, g, W, b);
  const auto spread = ad::broadcast_to(ad::reshape(g, Shape{S, 1, G}), Shape{S, k, G});
  const auto ref = ad::linear(ad::concat<double>({h, spread}, 2), W, b);
  ASSERT_EQ(fused.shape(), ref.shape());
  for (std::size_t i = 0; i < ref.value().numel(); ++i) EXPECT_NEAR(fused.value()[i], ref.value()[i], 1e-12);
  const auto proj = make_projector(ref.shape(), rng);
  auto cmp = compare_gradients({h, g, W, b}, [&] { return proj(detail::context_linear(h, g, W, b)); });
  EXPECT_LT(cmp.relative_error(), 1e-6);
  EXPECT_THROW(detail::context_linear(h, g, b, b), DimensionError);
}

TEST(Alignment, PermutingNeighborsPermutesColumns) {
  std::mt19937_64 rng(3);
  const std::size_t S = 4, k = 7, kk = 5;
  FKAConv<double> layer(opts(3, 2, k, kk), rng);
  const auto local = ad::constant(random_tensor({S, k, 3}, rng));
  const auto A = layer.estimate_alignment(local, layer.gate(local));
  ASSERT_EQ(A.shape(), (Shape{S, kk, k}));
  std::vector<std::size_t> perm(k);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor<double> pl(Shape{S, k, 3});
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t j = 0; j < k; ++j)
      for (int a = 0; a < 3; ++a) pl[(s * k + j) * 3 + a] = local.value()[(s * k + perm[j]) * 3 + a];
  const auto plocal = ad::constant(pl);
  const auto B = layer.estimate_alignment(plocal, layer.gate(plocal));
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t m = 0; m < kk; ++m)
      for (std::size_t j = 0; j < k; ++j)
        EXPECT_NEAR(B.value()[(s * kk + m) * k + j], A.value()[(s * kk + m) * k + perm[j]], 1e-12);

  // A·f unchanged when the features follow the same permutation.
  const auto f = ad::constant(random_tensor({S, k, 3}, rng));
  Tensor<double> pf(Shape{S, k, 3});
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t j = 0; j < k; ++j)
      for (int c = 0; c < 3; ++c) pf[(s * k + j) * 3 + c] = f.value()[(s * k + perm[j]) * 3 + c];
  const auto af = ad::bmm(A, f).value();
  const auto bf = ad::bmm(B, ad::constant(pf)).value();
  for (std::size_t i = 0; i < af.numel(); ++i) EXPECT_NEAR(af[i], bf[i], 1e-6);
}

TEST(Alignment, ZeroGateGivesPerPointTerms) {
  std::mt19937_64 rng(4);
  const std::size_t S = 2, k = 6, kk = 4;
  FKAConv<double> layer(opts(1, 1, k, kk), rng);
  const auto local = ad::constant(random_tensor({S, k, 3}, rng));
  const auto zero = ad::constant(Tensor<double>(Shape{S, k}));
  const auto A = layer.estimate_alignment(local, zero);
  for (double v : A.value().values()) EXPECT_TRUE(std::isfinite(v));
  // Column j depends on neighbor j alone: changing another neighbor leaves it fixed.
  auto moved = local.value();
  moved[(0 * k + 3) * 3 + 1] += 0.5;
  const auto B = layer.estimate_alignment(ad::constant(moved), zero);
  for (std::size_t m = 0; m < kk; ++m)
    for (std::size_t j = 0; j < k; ++j)
      if (j != 3) { EXPECT_DOUBLE_EQ(A.value()[m * k + j], B.value()[m * k + j]); }
}

TEST(Alignment, MlpGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  const std::size_t S = 3, k = 5, kk = 4;
  FKAConv<double> layer(opts(1, 1, k, kk), rng);
  const auto local = ad::constant(random_tensor({S, k, 3}, rng, -1.5, 1.5));
  std::vector<ad::Var<double>> params;
  for (auto& [name, v] : layer.named_parameters(""))
    if (name.starts_with("mlp") || name == "alpha" || name == "beta") params.push_back(v);
  ASSERT_EQ(params.size(), 8u);
  auto cmp = compare_gradients(params, [&] {
    const auto A = layer.estimate_alignment(local, layer.gate(local));
    return ad::sum_all(ad::mul(A, A));
  });
  EXPECT_LT(cmp.relative_error(), 1e-4);
}

TEST(Alignment, ShapeErrors) {
  std::mt19937_64 rng(6);
  FKAConv<double> layer(opts(1, 1, 4, 4), rng);
  const auto local = ad::constant(random_tensor({2, 4, 3}, rng));
  EXPECT_THROW(layer.estimate_alignment(local, ad::constant(Tensor<double>(Shape{2, 3}))), DimensionError);
  EXPECT_THROW(layer.gate(ad::constant(Tensor<double>(Shape{2, 4, 2}))), DimensionError);
}

TEST(ApplyKernel, ZeroFeaturesGiveBias) {
  std::mt19937_64 rng(7);
  FKAConv<double> layer(opts(3, 2, 4, 5), rng);
  auto b = layer.bias();
  b.mutable_value()[0] = 0.25;
  b.mutable_value()[1] = -1.5;
  const auto A = ad::constant(random_tensor({6, 5, 4}, rng));
  const auto out = layer.apply_kernel(A, ad::constant(Tensor<double>(Shape{6, 4, 3})));
  for (std::size_t s = 0; s < 6; ++s) {
    EXPECT_EQ(out.value()[s * 2], 0.25);
    EXPECT_EQ(out.value()[s * 2 + 1], -1.5);
  }
}

TEST(ApplyKernel, OnesAlignmentSumsNeighbors) {
  std::mt19937_64 rng(8);
  FKAConv<double> layer(opts(1, 1, 5, 1), rng);
  auto K = layer.kernel();
  K.mutable_value()[0] = 1.0;
  const auto A = ad::constant(Tensor<double>(Shape{2, 1, 5}, 1.0));
  const auto f = ad::constant(Tensor<double>(Shape{2, 5, 1}, {1, 2, 3, 4, 5, -1, 0, 1, 2, 10}));
  EXPECT_EQ(layer.apply_kernel(A, f).value().storage(), (std::vector<double>{15, 12}));
  EXPECT_THROW(layer.apply_kernel(A, ad::constant(Tensor<double>(Shape{2, 4, 1}))), DimensionError);
}

TEST(ApplyKernel, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  FKAConv<double> layer(opts(3, 2, 4, 5), rng);
  auto A = ad::parameter(random_tensor({3, 5, 4}, rng));
  auto f = ad::parameter(random_tensor({3, 4, 3}, rng));
  auto proj = make_projector({3, 2}, rng);
  auto cmp = compare_gradients({A, f, layer.kernel(), layer.bias()}, [&] { return proj(layer.apply_kernel(A, f)); });
  EXPECT_LT(cmp.relative_error(), 1e-4);
}

// Regular grid with a 3×3×3 stencil: neighbor slot m of interior point n is
// n + offset_m, so A = I turns the layer into a dense discrete convolution.
TEST(ApplyKernel, IdentityAlignmentIsDiscreteConvolution) {
  constexpr int G = 5;
  constexpr std::size_t kStencil = 27;
  std::mt19937_64 rng(10);
  const std::size_t Fin = 2, Fout = 3;
  FKAConv<double> layer(opts(Fin, Fout, kStencil, kStencil), rng);
  auto idx3 = [](int x, int y, int z) { return static_cast<std::size_t>((z * G + y) * G + x); };
  std::vector<Vec3> pts;
  for (int z = 0; z < G; ++z)
    for (int y = 0; y < G; ++y)
      for (int x = 0; x < G; ++x) pts.push_back({double(x), double(y), double(z)});
  NeighborIndex nb;
  nb.k = kStencil;
  for (int z = 1; z < G - 1; ++z)
    for (int y = 1; y < G - 1; ++y)
      for (int x = 1; x < G - 1; ++x) {
        nb.support_ids.push_back(idx3(x, y, z));
        for (int m = 0; m < 27; ++m) nb.indices.push_back(idx3(x + m % 3 - 1, y + (m / 3) % 3 - 1, z + m / 9 - 1));
      }
  const std::size_t S = nb.rows();
  Tensor<double> eye(Shape{S, kStencil, kStencil});
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t m = 0; m < kStencil; ++m) eye[(s * kStencil + m) * kStencil + m] = 1.0;
  const auto A = ad::constant(eye);
  const auto feats = random_feats<double>(pts.size(), Fin, rng);
  const auto out = layer.forward_with_alignment(pts, nb, feats, A);
  const auto& K = layer.kernel().value();
  const auto& b = layer.bias().value();
  const auto& f = feats.value();
  std::size_t s = 0;
  for (int z = 1; z < G - 1; ++z)
    for (int y = 1; y < G - 1; ++y)
      for (int x = 1; x < G - 1; ++x, ++s)
        for (std::size_t o = 0; o < Fout; ++o) {
          double h = b[o];
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const std::size_t m = static_cast<std::size_t>((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1));
                for (std::size_t c = 0; c < Fin; ++c)
                  h += K[(o * Fin + c) * kStencil + m] * f[idx3(x + dx, y + dy, z + dz) * Fin + c];
              }
          EXPECT_NEAR(out.value()[s * Fout + o], h, 1e-12);
        }
}

TEST(Forward, TranslationInvariance32Bit) {
  std::mt19937_64 rng(11);
  FKAConv<float> layer(opts(3, 4, 8, 8), rng);
  const auto pts = random_points(60, rng);
  const auto feats = random_feats<float>(60, 3, rng);
  const auto ids = iota_ids(20);
  const auto a = layer.forward(pts, ids, feats, true).features.value();
  auto moved = pts;
  for (auto& p : moved) p = {p[0] + 10, p[1] - 3, p[2] + 7};
  layer.set_frozen(true);
  const auto b = layer.forward(moved, ids, feats, false).features.value();
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(Forward, SourceOrderInvariance) {
  std::mt19937_64 rng(12);
  FKAConv<float> layer(opts(2, 3, 10, 6), rng);
  layer.set_ema_radius(0.3f);
  const std::size_t n = 50;
  const auto pts = random_points(n, rng);
  const auto feats = random_feats<float>(n, 2, rng);
  std::vector<std::size_t> perm = iota_ids(n);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Vec3> ppts(n);
  Tensor<float> pf(Shape{n, 2});
  std::vector<std::size_t> inv(n);
  for (std::size_t i = 0; i < n; ++i) {
    ppts[i] = pts[perm[i]];
    pf[i * 2] = feats.value()[perm[i] * 2];
    pf[i * 2 + 1] = feats.value()[perm[i] * 2 + 1];
    inv[perm[i]] = i;
  }
  const auto ids = iota_ids(n);
  const auto a = layer.forward(pts, ids, feats, false).features.value();
  const auto b = layer.forward(ppts, ids, ad::constant(pf), false).features.value();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < 3; ++o) EXPECT_NEAR(a[s * 3 + o], b[inv[s] * 3 + o], 1e-6);
}

TEST(Forward, EmaDrivesMeanNormalizedRadiusToOne) {
  std::mt19937_64 rng(13);
  FKAConv<double> layer(opts(1, 2, 16, 16), rng);
  const auto pts = random_points(200, rng, 4.0);
  const auto feats = random_feats<double>(200, 1, rng);
  const auto ids = iota_ids(50);
  layer.set_ema_radius(7.5);  // far from the batch radius
  double ratio = 0;
  for (int step = 0; step < 200; ++step) {
    const auto nb = knn_grid(pts, ids, 16);
    layer.forward(pts, nb, feats, true);
    ratio = mean_of(neighborhood_radii(pts, nb)) / layer.ema_radius();
  }
  EXPECT_NEAR(ratio, 1.0, 0.01);
}

TEST(Forward, TwoLayerStackGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(14);
  const std::size_t n = 32;
  FKAConv<double> l1(opts(2, 3, 6, 4), rng), l2(opts(3, 2, 4, 4), rng);
  const auto pts = random_points(n, rng);
  auto feats = ad::parameter(random_tensor({n, 2}, rng));
  const auto ids1 = iota_ids(n);
  const std::vector<std::size_t> ids2{0, 5, 9, 14, 20, 27};
  const auto nb1 = knn(pts, ids1, 6);
  const auto nb2 = knn(pts, ids2, 4);
  // initialize the radii, then evaluate with a fixed state
  l1.forward(pts, nb1, feats, true);
  l2.forward(pts, nb2, random_feats<double>(n, 3, rng), true);
  auto proj = make_projector({ids2.size(), 2}, rng);
  auto f = [&] {
    auto h = ad::sigmoid(l1.forward(pts, nb1, feats, false));
    return proj(l2.forward(pts, nb2, h, false));
  };
  std::vector<ad::Var<double>> inputs{feats};
  for (auto* l : {&l1, &l2})
    for (auto& [name, v] : l->named_parameters("")) {
      // The self-neighbor has p̂ = 0, so zero biases would put the first ReLU exactly on its kink.
      if (name.ends_with(".b") || name == "bias")
        for (auto& x : v.mutable_value().values()) x = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
      inputs.push_back(v);
    }
  const auto cmp = compare_gradients(inputs, f);
  EXPECT_LT(cmp.relative_error(), 1e-3);
}

TEST(Forward, EveryParameterGetsGradient) {
  std::mt19937_64 rng(15);
  FKAConv<double> layer(opts(2, 3, 8, 8), rng);
  const auto pts = random_points(64, rng);
  const auto feats = random_feats<double>(64, 2, rng);
  auto out = layer.forward(pts, iota_ids(64), feats, true).features;
  auto proj = make_projector(out.shape(), rng);
  ad::backward(proj(out));
  for (auto& [name, v] : layer.named_parameters("")) {
    double norm = 0;
    for (double g : v.grad().values()) norm += g * g;
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(Modes, HardGateAndNormalizationVariants) {
  std::mt19937_64 rng(16);
  std::vector<Vec3> pts{{0, 0, 0}, {1, 0, 0}, {0, 3, 0}};
  NeighborIndex nb;
  nb.k = 3;
  nb.support_ids = {0};
  nb.indices = {0, 1, 2};
  auto o = opts(1, 1, 3, 2);
  o.mode = NeighborhoodMode::kHardGateR;
  FKAConv<double> hard(o, rng);
  hard.set_ema_radius(2.0);
  auto g = hard.neighborhood_geometry(pts, nb, false);
  EXPECT_EQ(g.gate.value().storage(), (std::vector<double>{1, 1, 0}));
  EXPECT_EQ(hard.named_parameters("").size(), 8u);
  o.mode = NeighborhoodMode::kHardGate2R;
  FKAConv<double> hard2(o, rng);
  hard2.set_ema_radius(2.0);
  EXPECT_EQ(hard2.neighborhood_geometry(pts, nb, false).gate.value().storage(), (std::vector<double>{1, 1, 1}));
  o.mode = NeighborhoodMode::kUnitBall;
  FKAConv<double> ball(o, rng);
  ball.set_ema_radius(2.0);
  EXPECT_DOUBLE_EQ(ball.neighborhood_geometry(pts, nb, false).local.value()[7], 1.0);
  o.mode = NeighborhoodMode::kNoNormalization;
  FKAConv<double> raw(o, rng);
  raw.set_ema_radius(2.0);
  EXPECT_DOUBLE_EQ(raw.neighborhood_geometry(pts, nb, false).local.value()[7], 3.0);
  o.mode = NeighborhoodMode::kLearned;
  FKAConv<double> learned(o, rng);
  learned.set_ema_radius(2.0);
  EXPECT_DOUBLE_EQ(learned.neighborhood_geometry(pts, nb, false).local.value()[7], 1.5);
  EXPECT_EQ(learned.named_parameters("").size(), 10u);
  for (auto m : {NeighborhoodMode::kLearned, NeighborhoodMode::kNoNormalization, NeighborhoodMode::kUnitBall,
                 NeighborhoodMode::kHardGateR, NeighborhoodMode::kHardGate2R})
    EXPECT_EQ(parse_mode(mode_name(m)), m);
  EXPECT_THROW(parse_mode("soft"), ConfigError);
}

TEST(Forward, FeatureShapeErrors) {
  std::mt19937_64 rng(17);
  FKAConv<double> layer(opts(2, 3, 4, 4), rng);
  const auto pts = random_points(10, rng);
  EXPECT_THROW(layer.forward(pts, iota_ids(3), random_feats<double>(9, 2, rng), true), DimensionError);
  EXPECT_THROW(layer.forward(pts, iota_ids(3), random_feats<double>(10, 3, rng), true), DimensionError);
  auto bad = opts(0, 3);
  EXPECT_THROW(FKAConv<double>(bad, rng), ConfigError);
}
