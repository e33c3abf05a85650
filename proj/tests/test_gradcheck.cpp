#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>

#include "fkaconv/gradcheck.hpp"

using namespace fkac;

namespace {

bool has(const std::vector<std::string>& v, const std::string& s) { return std::find(v.begin(), v.end(), s) != v.end(); }

}  // namespace

TEST(GradCheck, FreshBuildPassesWithinOneMinute) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = run_gradcheck();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_TRUE(report.passed()) << report.format();
  EXPECT_LT(secs, 60.0);
  std::vector<std::string> names;
  for (const auto& e : report.entries) names.push_back(e.name);
  for (const char* n : {"sigmoid", "relu", "bmm", "batch_norm", "fkaconv.gate.alpha", "fkaconv.gate.beta",
                        "fkaconv.alignment", "fkaconv.apply_kernel", "fkaconv.stack2"})
    EXPECT_TRUE(has(names, n)) << n;
  for (const auto& e : report.entries) EXPECT_EQ(e.tolerance, e.name == "fkaconv.stack2" ? 1e-3 : 1e-4) << e.name;
}

TEST(GradCheck, CorruptedSigmoidIsNamed) {
  GradCheckOptions opt;
  opt.seeds = {0};
  opt.corrupt_op = "sigmoid";
  const auto report = run_gradcheck(opt);
  EXPECT_FALSE(report.passed());
  const auto failed = report.failures();
  EXPECT_TRUE(has(failed, "sigmoid"));
  EXPECT_TRUE(has(failed, "fkaconv.gate.alpha"));
  EXPECT_FALSE(has(failed, "matmul"));
  const auto text = report.format();
  EXPECT_NE(text.find("sigmoid"), std::string::npos);
  EXPECT_NE(text.find("FAIL"), std::string::npos);
}

TEST(GradCheck, Errors) {
  GradCheckOptions opt;
  opt.seeds.clear();
  EXPECT_THROW(run_gradcheck(opt), ParameterError);
  opt.seeds = {0};
  opt.corrupt_op = "matmul";
  EXPECT_THROW(run_gradcheck(opt), ParameterError);
}
