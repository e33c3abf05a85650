#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fkaconv/autodiff.hpp"
#include "fkaconv/checkpoint.hpp"
#include "support/finite_diff.hpp"

namespace ad = fkac::ad;
using fkac::Shape;
using fkac::Tensor;
using fkac::testing::compare_gradients;
using fkac::testing::make_projector;
using fkac::testing::random_tensor;
using VarD = ad::Var<double>;

namespace {

VarD param(Shape s, std::vector<double> v) { return ad::parameter(Tensor<double>(std::move(s), std::move(v))); }

}  // namespace

TEST(Matmul, IdentityAndSelection) {
  auto eye = param({2, 2}, {1, 0, 0, 1});
  auto m = param({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(ad::matmul(eye, m).value().storage(), (std::vector<double>{1, 2, 3, 4}));
  auto row = param({1, 2}, {1, 0});
  auto col = param({2, 1}, {0, 5});
  EXPECT_EQ(ad::matmul(row, col).item(), 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  auto a = param({2, 3}, std::vector<double>(6, 1));
  auto b = param({2, 3}, std::vector<double>(6, 1));
  try {
    ad::matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const fkac::DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfEntrySumMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  auto a = ad::parameter(random_tensor({3, 4}, rng));
  auto b = ad::parameter(random_tensor({4, 2}, rng));
  auto cmp = compare_gradients({a, b}, [&] { return ad::sum_all(ad::matmul(a, b)); });
  EXPECT_LT(cmp.relative_error(), 1e-4);
}

TEST(Pointwise, ScalarExamples) {
  EXPECT_DOUBLE_EQ(ad::sigmoid(param({1}, {0})).item(), 0.5);
  EXPECT_EQ(ad::relu(param({1}, {-3})).item(), 0.0);
  EXPECT_EQ(ad::relu(param({1}, {2})).item(), 2.0);
  EXPECT_EQ(ad::scale(param({1}, {2}), 3.0).item(), 6.0);
}

TEST(Pointwise, SigmoidGradientAtOne) {
  auto x = param({1}, {1.0});
  auto cmp = compare_gradients({x}, [&] { return ad::sigmoid(x); });
  EXPECT_LT(cmp.relative_error(), 1e-6);
}

TEST(Pointwise, BroadcastRulesAndErrors) {
  auto a = param({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = param({3}, {10, 20, 30});
  EXPECT_EQ(ad::add(a, b).value().storage(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  auto col = param({2, 1}, {1, 2});
  EXPECT_EQ(ad::mul(a, col).value().storage(), (std::vector<double>{1, 2, 3, 8, 10, 12}));
  auto bad = param({2}, {1, 2});
  EXPECT_THROW(ad::add(a, bad), fkac::DimensionError);
}

TEST(Pointwise, BroadcastGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  auto a = ad::parameter(random_tensor({2, 3, 4}, rng));
  auto b = ad::parameter(random_tensor({2, 3, 1}, rng));
  auto c = ad::parameter(random_tensor({4}, rng));
  auto proj = make_projector({2, 3, 4}, rng);
  auto cmp = compare_gradients({a, b, c}, [&] {
    return proj(ad::sub(ad::mul(ad::sigmoid(a), b), ad::scale(ad::relu(ad::add(a, c)), 0.5)));
  });
  EXPECT_LT(cmp.relative_error(), 1e-4);
}

TEST(MaxOverAxis, ValuesAndArgmax) {
  auto x = param({2, 2}, {1, 5, 7, 2});
  auto r = ad::max_over_axis(x, 1);
  EXPECT_EQ(r.values.value().storage(), (std::vector<double>{5, 7}));
  EXPECT_EQ(r.argmax, (std::vector<std::size_t>{1, 0}));
}

TEST(MaxOverAxis, TiesGoToLowestIndex) {
  auto x = param({3}, {3, 3, 3});
  auto r = ad::max_over_axis(x, 0);
  EXPECT_EQ(r.values.item(), 3.0);
  EXPECT_EQ(r.argmax[0], 0u);
  ad::backward(r.values);
  EXPECT_EQ(x.grad().storage(), (std::vector<double>{1, 0, 0}));
}

TEST(MaxOverAxis, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  auto x = ad::parameter(random_tensor({4, 6}, rng));
  auto proj = make_projector({4}, rng);
  auto cmp = compare_gradients({x}, [&] { return proj(ad::max_over_axis(x, 1).values); });
  EXPECT_LT(cmp.relative_error(), 1e-4);
  EXPECT_THROW(ad::max_over_axis(x, 2), fkac::DimensionError);
}

TEST(Concat, Examples) {
  auto a = param({2}, {1, 2});
  auto b = param({1}, {3});
  auto c = ad::concat<double>({a, b}, 0);
  EXPECT_EQ(c.value().storage(), (std::vector<double>{1, 2, 3}));
  ad::backward(ad::sum_all(c));
  EXPECT_EQ(a.grad().storage(), (std::vector<double>{1, 1}));
  EXPECT_EQ(b.grad().storage(), (std::vector<double>{1}));

  auto m = ad::parameter(Tensor<double>(Shape{2, 3}, 1.0));
  auto n = ad::parameter(Tensor<double>(Shape{2, 5}, 2.0));
  auto mn = ad::concat<double>({m, n}, 1);
  EXPECT_EQ(mn.shape(), (Shape{2, 8}));
  EXPECT_EQ(mn.value()[3], 2.0);
  EXPECT_EQ(mn.value()[8], 1.0);
  EXPECT_THROW(ad::concat<double>({m, param({3, 5}, std::vector<double>(15))}, 1), fkac::DimensionError);
}

TEST(Linear, Examples) {
  auto y = ad::linear(param({2}, {1, 1}), param({2, 2}, {1, 0, 0, 1}), param({2}, {0, 0}));
  EXPECT_EQ(y.value().storage(), (std::vector<double>{1, 1}));
  EXPECT_EQ(ad::linear(param({1}, {2}), param({1, 1}, {3}), param({1}, {1})).item(), 7.0);
  EXPECT_THROW(ad::linear(param({3}, {1, 2, 3}), param({2, 2}, {1, 0, 0, 1}), param({2}, {0, 0})),
               fkac::DimensionError);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  auto x = ad::parameter(random_tensor({2, 3}, rng));
  auto W = ad::parameter(random_tensor({3, 4}, rng));
  auto b = ad::parameter(random_tensor({4}, rng));
  auto proj = make_projector({2, 4}, rng);
  auto cmp = compare_gradients({x, W, b}, [&] { return proj(ad::linear(x, W, b)); });
  EXPECT_LT(cmp.relative_error(), 1e-4);
}

TEST(ShapeOps, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto a = ad::parameter(random_tensor({2, 3, 4}, rng));
  auto b = ad::parameter(random_tensor({2, 4, 2}, rng));
  auto r = ad::parameter(random_tensor({3, 1, 2}, rng));
  auto t = ad::parameter(random_tensor({5, 3}, rng));
  auto proj = make_projector({2, 2, 3}, rng);
  auto proj2 = make_projector({3, 4, 2}, rng);
  auto proj3 = make_projector({4}, rng);
  auto proj4 = make_projector({2}, rng);
  auto cmp = compare_gradients({a, b, r, t}, [&] {
    auto prod = ad::transpose_last2(ad::bmm(a, b));                 // [2,2,3]
    auto spread = ad::broadcast_to(r, Shape{3, 4, 2});              // [3,4,2]
    auto rows = ad::gather_rows(t, {4, 0, 4, 2});                   // [4,3]
    auto norms = ad::norm_last(rows);                               // [4]
    auto means = ad::mean_over_axis(ad::reshape(rows, Shape{2, 6}), 1);  // [2]
    return ad::add(ad::add(proj(prod), proj2(spread)), ad::add(proj3(norms), proj4(means)));
  });
  EXPECT_LT(cmp.relative_error(), 1e-4);
}

TEST(BatchNorm, TrainingOnStandardizedInputIsIdentity) {
  // per-feature mean 0, biased variance 1
  auto x = param({4, 2}, {1, -1, -1, 1, 1, 1, -1, -1});
  ad::BatchNormState<double> st(2);
  auto y = ad::batch_norm(x, st, param({2}, {1, 1}), param({2}, {0, 0}), true);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(y.value()[i], x.value()[i], 1e-5);
  EXPECT_NEAR(st.running_mean[0], 0.0, 1e-12);
  // unbiased batch variance 4/3 folded in with momentum 0.1
  EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * 4.0 / 3.0, 1e-12);
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
  ad::BatchNormState<double> st(1);
  st.running_mean[0] = 5;
  st.running_var[0] = 4;
  auto y = ad::batch_norm(param({1, 1}, {7}), st, param({1}, {1}), param({1}, {0}), false);
  EXPECT_NEAR(y.item(), 1.0, 1e-5);
}

TEST(BatchNorm, DegenerateBatchInTraining) {
  ad::BatchNormState<double> st(2);
  EXPECT_THROW(ad::batch_norm(param({1, 2}, {1, 2}), st, param({2}, {1, 1}), param({2}, {0, 0}), true),
               fkac::DimensionError);
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  auto x = ad::parameter(random_tensor({5, 3}, rng));
  auto g = ad::parameter(random_tensor({3}, rng, 0.5, 1.5));
  auto b = ad::parameter(random_tensor({3}, rng));
  auto proj = make_projector({5, 3}, rng);
  for (bool training : {true, false}) {
    ad::BatchNormState<double> st(3);
    st.running_var.fill(2.0);
    const auto snapshot = st;
    auto cmp = compare_gradients({x, g, b}, [&] {
      st = snapshot;  // keep the running statistics fixed between evaluations
      return proj(ad::batch_norm(x, st, g, b, training));
    });
    EXPECT_LT(cmp.relative_error(), 1e-3) << "training=" << training;
  }
}

TEST(CrossEntropy, Examples) {
  std::vector<int> l0{0};
  EXPECT_NEAR(ad::cross_entropy(param({1, 4}, {0, 0, 0, 0}), l0).item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(ad::cross_entropy(param({1, 3}, {30, 0, 0}), l0).item(), 0.0, 1e-12);
  std::vector<int> bad{3};
  EXPECT_THROW(ad::cross_entropy(param({1, 3}, {1, 2, 3}), bad), fkac::LabelError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
  std::mt19937_64 rng(17);
  auto z = ad::parameter(random_tensor({3, 4}, rng, -2, 2));
  std::vector<int> labels{2, 0, 3};
  auto cmp = compare_gradients({z}, [&] { return ad::cross_entropy(z, labels); });
  EXPECT_LT(cmp.relative_error(), 1e-4);
  for (std::size_t b = 0; b < 3; ++b) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) s += std::exp(z.value()[b * 4 + c]);
    for (std::size_t c = 0; c < 4; ++c) {
      const double expect = (std::exp(z.value()[b * 4 + c]) / s - (static_cast<int>(c) == labels[b])) / 3.0;
      EXPECT_NEAR(z.grad()[b * 4 + c], expect, 1e-12);
    }
  }
}

TEST(Backward, SquareAndAccumulation) {
  auto x = param({1}, {3});
  auto y = ad::mul(x, x);
  ad::backward(y);
  EXPECT_EQ(x.grad().item(), 6.0);
  ad::backward(y);
  EXPECT_EQ(x.grad().item(), 12.0);
}

TEST(Backward, ChainRuleThroughTwoLayers) {
  std::mt19937_64 rng(19);
  auto x = ad::parameter(random_tensor({4, 3}, rng));
  auto W1 = ad::parameter(random_tensor({3, 5}, rng));
  auto b1 = ad::parameter(random_tensor({5}, rng));
  auto W2 = ad::parameter(random_tensor({5, 2}, rng));
  auto b2 = ad::parameter(random_tensor({2}, rng));
  auto cmp = compare_gradients({x, W1, b1, W2, b2}, [&] {
    return ad::sum_all(ad::sigmoid(ad::linear(ad::sigmoid(ad::linear(x, W1, b1)), W2, b2)));
  });
  EXPECT_LT(cmp.relative_error(), 1e-4);
}

TEST(Backward, RejectsNonScalarRoot) {
  auto x = param({2}, {1, 2});
  EXPECT_THROW(ad::backward(ad::relu(x)), fkac::DimensionError);
}

TEST(Backward, GraphPurity) {
  std::mt19937_64 rng(23);
  auto a = ad::parameter(random_tensor({3, 3}, rng));
  auto b = ad::parameter(random_tensor({3, 3}, rng));
  const auto a0 = a.value().storage(), b0 = b.value().storage();
  auto out = ad::matmul(ad::relu(a), ad::sigmoid(b));
  const auto out0 = out.value().storage();
  ad::backward(ad::sum_all(out));
  EXPECT_EQ(a.value().storage(), a0);
  EXPECT_EQ(b.value().storage(), b0);
  EXPECT_EQ(out.value().storage(), out0);
}

TEST(Sgd, PlainStep) {
  ad::ParamRegistry<double> reg;
  auto p = param({1}, {1});
  reg.add("p", p);
  ad::backward(ad::scale(p, 2.0));
  ad::sgd_step(reg, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(p.item(), 0.8);
  EXPECT_EQ(p.grad().item(), 0.0);
  EXPECT_EQ(reg.iteration(), 1u);
}

TEST(Sgd, MomentumRecurrence) {
  ad::ParamRegistry<double> reg;
  auto p = param({1}, {0});
  reg.add("p", p);
  ad::backward(p);
  ad::sgd_step(reg, 1.0, 0.9);
  EXPECT_DOUBLE_EQ(p.item(), -1.0);
  ad::backward(p);
  ad::sgd_step(reg, 1.0, 0.9);
  EXPECT_DOUBLE_EQ(p.item(), -2.9);
}

TEST(Sgd, MissingGradientAndRegistryErrors) {
  ad::ParamRegistry<double> reg;
  reg.add("w", param({2}, {1, 2}));
  EXPECT_THROW(ad::sgd_step(reg, 0.1, 0.0), fkac::GradientError);
  EXPECT_THROW(reg.add("w", param({1}, {0})), fkac::ParameterError);
  EXPECT_THROW(reg.add("c", ad::constant(Tensor<double>::scalar(1))), fkac::ParameterError);
}

TEST(Determinism, IdenticalSeedsGiveIdenticalValues) {
  auto run = [] {
    std::mt19937_64 rng(99);
    auto W = ad::parameter(ad::uniform_init<float>(Shape{8, 4}, 8, 4, rng));
    auto x = ad::constant(Tensor<float>(Shape{3, 8}, 0.5f));
    return ad::relu(ad::linear(x, W, ad::constant(Tensor<float>(Shape{4})))).value().storage();
  };
  EXPECT_EQ(run(), run());
}

TEST(Init, FanBasedBound) {
  std::mt19937_64 rng(1);
  auto t = ad::uniform_init<double>(Shape{10, 6}, 10, 6, rng);
  const double bound = std::sqrt(6.0 / 16.0);
  for (double v : t.values()) EXPECT_LE(std::abs(v), bound);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(4);
  auto a = ad::uniform_init<float>(Shape{3, 2, 2}, 3, 2, rng);
  auto b = Tensor<float>::scalar(0.1f);
  const auto bytes = fkac::encode_checkpoint<float>({{"a", &a}, {"b", &b}}, "{\"x\":1}");
  EXPECT_EQ(bytes.substr(0, 5), "FKAC1");
  const auto ck = fkac::decode_checkpoint(bytes);
  EXPECT_EQ(ck.metadata, "{\"x\":1}");
  ASSERT_EQ(ck.entries.size(), 2u);
  EXPECT_EQ(ck.entries[0].shape, a.shape());
  EXPECT_EQ(ck.at("a").as_tensor<float>().storage(), a.storage());
  EXPECT_EQ(ck.at("b").as_tensor<float>().item(), 0.1f);
  EXPECT_THROW(fkac::decode_checkpoint(bytes.substr(0, bytes.size() - 1)), fkac::Error);
  EXPECT_THROW(fkac::decode_checkpoint("FKAC2" + bytes.substr(5)), fkac::Error);
}
