#pragma once

// Central finite-difference checks of every differentiable op, the FKAConv
// stages and a two-layer FKAConv stack, in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fkaconv/autodiff.hpp"
#include "fkaconv/fkaconv.hpp"
#include "fkaconv/geometry.hpp"

namespace fkac {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;  // worst seed
  double tolerance = 0;
  bool passed() const noexcept { return max_rel_error <= tolerance; }
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  std::vector<std::uint64_t> seeds;

  bool passed() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed(); });
  }

  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (!e.passed()) out.push_back(e.name);
    return out;
  }

  std::string format() const {
    std::ostringstream os;
    for (const auto& e : entries)
      os << std::left << std::setw(28) << e.name << " max_rel_error " << std::scientific << std::setprecision(3)
         << e.max_rel_error << "  tol " << e.tolerance << "  " << (e.passed() ? "ok" : "FAIL") << '\n';
    os << (passed() ? "gradcheck passed" : "gradcheck FAILED") << " (" << entries.size() << " checks, seeds";
    for (auto s : seeds) os << ' ' << s;
    os << ")\n";
    return os.str();
  }
};

struct GradCheckOptions {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  double op_tolerance = 1e-4;
  double stack_tolerance = 1e-3;
  double step = 1e-4;
  /// Test fixture: name of an op whose backward is replaced by a wrong one.
  std::string corrupt_op;
};

namespace detail {

using VarD = ad::Var<double>;

// sigmoid whose backward drops the (1 − y) factor
inline VarD corrupted_sigmoid(const VarD& x) {
  Tensor<double> out = x.value();
  for (auto& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  return ad::make_node<double>(std::move(out), "sigmoid", {x}, [](ad::Node<double>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

inline Tensor<double> uniform_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = d(rng);
  return t;
}

// Entries away from 0 by at least `gap`, so ReLU and |·| kinks are not straddled.
inline Tensor<double> off_zero_tensor(Shape s, std::mt19937_64& rng, double gap = 0.1) {
  auto t = uniform_tensor(std::move(s), rng, gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.values())
    if (sign(rng)) v = -v;
  return t;
}

// Norm-wise relative error of backward() against central differences over
// every entry of `inputs`, for the scalar Σ w ⊙ f().
inline double fd_relative_error(std::vector<VarD> inputs, const std::function<VarD()>& f, std::mt19937_64& rng,
                                double h) {
  const auto probe = f();
  const auto w = ad::constant(uniform_tensor(probe.shape(), rng));
  auto scalar = [&] { return ad::sum_all(ad::mul(f(), w)); };
  for (auto& in : inputs) in.zero_grad();
  ad::backward(scalar());
  double diff = 0, na = 0, nn = 0;
  for (auto& in : inputs) {
    const Tensor<double> analytic = in.grad();
    auto& val = in.mutable_value();
    for (std::size_t i = 0; i < val.numel(); ++i) {
      const double keep = val[i];
      val[i] = keep + h;
      const double fp = scalar().item();
      val[i] = keep - h;
      const double fm = scalar().item();
      val[i] = keep;
      const double num = (fp - fm) / (2 * h);
      diff += (analytic[i] - num) * (analytic[i] - num);
      na += analytic[i] * analytic[i];
      nn += num * num;
    }
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

inline std::vector<Vec3> random_cloud(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = {d(rng), d(rng), d(rng)};
  return pts;
}

struct Check {
  std::string name;
  bool end_to_end = false;
  std::function<double(std::mt19937_64&, double)> run;  // returns the relative error for one seed
};

inline std::vector<Check> build_checks(const std::function<VarD(const VarD&)>& sigmoid) {
  using P = VarD;
  auto p = [](Tensor<double> t) { return ad::parameter(std::move(t)); };
  auto U = [](Shape s, std::mt19937_64& r) { return uniform_tensor(std::move(s), r); };
  std::vector<Check> c;
  auto unary = [&](std::string name, std::function<P(const P&)> op, bool off_zero = false) {
    c.push_back({std::move(name), false, [=](std::mt19937_64& r, double h) {
                   P x = ad::parameter(off_zero ? off_zero_tensor({4, 5}, r) : uniform_tensor({4, 5}, r));
                   return fd_relative_error({x}, [&] { return op(x); }, r, h);
                 }});
  };
  auto binary = [&](std::string name, std::function<P(const P&, const P&)> op) {
    c.push_back({std::move(name), false, [=](std::mt19937_64& r, double h) {
                   P a = ad::parameter(uniform_tensor({3, 4, 5}, r)), b = ad::parameter(uniform_tensor({4, 1}, r));
                   return fd_relative_error({a, b}, [&] { return op(a, b); }, r, h);
                 }});
  };
  binary("add", [](const P& a, const P& b) { return ad::add(a, b); });
  binary("sub", [](const P& a, const P& b) { return ad::sub(a, b); });
  binary("mul", [](const P& a, const P& b) { return ad::mul(a, b); });
  unary("scale", [](const P& x) { return ad::scale(x, 2.5); });
  unary("relu", [](const P& x) { return ad::relu(x); }, true);
  unary("sigmoid", sigmoid);
  c.push_back({"norm_last", false, [=](std::mt19937_64& r, double h) {
                 P x = p(U({4, 3}, r));
                 return fd_relative_error({x}, [&] { return ad::norm_last(x); }, r, h);
               }});
  c.push_back({"matmul", false, [=](std::mt19937_64& r, double h) {
                 P a = p(U({3, 4}, r)), b = p(U({4, 5}, r));
                 return fd_relative_error({a, b}, [&] { return ad::matmul(a, b); }, r, h);
               }});
  c.push_back({"bmm", false, [=](std::mt19937_64& r, double h) {
                 P a = p(U({2, 3, 4}, r)), b = p(U({2, 4, 5}, r));
                 return fd_relative_error({a, b}, [&] { return ad::bmm(a, b); }, r, h);
               }});
  c.push_back({"transpose_last2", false, [=](std::mt19937_64& r, double h) {
                 P x = p(U({2, 3, 4}, r));
                 return fd_relative_error({x}, [&] { return ad::transpose_last2(x); }, r, h);
               }});
  c.push_back({"linear", false, [=](std::mt19937_64& r, double h) {
                 P x = p(U({2, 3, 4}, r)), W = p(U({4, 5}, r)), b = p(U({5}, r));
                 return fd_relative_error({x, W, b}, [&] { return ad::linear(x, W, b); }, r, h);
               }});
  c.push_back({"reshape", false, [=](std::mt19937_64& r, double h) {
                 P x = p(U({3, 4}, r));
                 return fd_relative_error({x}, [&] { return ad::reshape(x, Shape{2, 6}); }, r, h);
               }});
  c.push_back({"broadcast_to", false, [=](std::mt19937_64& r, double h) {
                 P x = p(U({3, 1}, r));
                 return fd_relative_error({x}, [&] { return ad::broadcast_to(x, Shape{2, 3, 4}); }, r, h);
               }});
  c.push_back({"concat", false, [=](std::mt19937_64& r, double h) {
                 P a = p(U({2, 3, 2}, r)), b = p(U({2, 3, 4}, r));
                 return fd_relative_error({a, b}, [&] { return ad::concat<double>({a, b}, 2); }, r, h);
               }});
  c.push_back({"gather_rows", false, [=](std::mt19937_64& r, double h) {
                 P x = p(U({5, 3}, r));
                 return fd_relative_error({x}, [&] { return ad::gather_rows(x, {4, 0, 4, 2, 1, 4}); }, r, h);
               }});
  c.push_back({"max_over_axis", false, [=](std::mt19937_64& r, double h) {
                 P x = p(U({3, 6, 4}, r));
                 return fd_relative_error({x}, [&] { return ad::max_over_axis(x, 1).values; }, r, h);
               }});
  c.push_back({"mean_over_axis", false, [=](std::mt19937_64& r, double h) {
                 P x = p(U({3, 6, 4}, r));
                 return fd_relative_error({x}, [&] { return ad::mean_over_axis(x, 1); }, r, h);
               }});
  c.push_back({"sum_all", false, [=](std::mt19937_64& r, double h) {
                 P x = p(U({3, 4}, r));
                 return fd_relative_error({x}, [&] { return ad::sum_all(x); }, r, h);
               }});
  c.push_back({"batch_norm", false, [=](std::mt19937_64& r, double h) {
                 P x = p(U({6, 4}, r)), gamma = p(U({4}, r)), beta = p(U({4}, r));
                 ad::BatchNormState<double> st(4);
                 return fd_relative_error({x, gamma, beta}, [&] { return ad::batch_norm(x, st, gamma, beta, true); }, r,
                                          h);
               }});
  c.push_back({"cross_entropy", false, [=](std::mt19937_64& r, double h) {
                 P z = p(U({4, 3}, r));
                 const std::vector<int> y{0, 2, 1, 2};
                 return fd_relative_error({z}, [&] { return ad::cross_entropy(z, y); }, r, h);
               }});
  c.push_back({"kernel_contract", false, [=](std::mt19937_64& r, double h) {
                 P G = p(U({3, 4, 2}, r)), K = p(U({5, 2, 4}, r));
                 return fd_relative_error({G, K}, [&] { return detail::kernel_contract(G, K); }, r, h);
               }});
  c.push_back({"context_linear", false, [=](std::mt19937_64& r, double h) {
                 P x = p(U({3, 4, 2}, r)), g = p(U({3, 2}, r)), W = p(U({4, 5}, r)), b = p(U({5}, r));
                 return fd_relative_error({x, g, W, b}, [&] { return detail::context_linear(x, g, W, b); }, r, h);
               }});

  // FKAConv stages on one random layer per seed
  auto layer_opts = [](std::size_t in, std::size_t out, std::size_t k, std::size_t kk) {
    FKAConvOptions o;
    o.in_channels = in;
    o.out_channels = out;
    o.k = k;
    o.k_kernel = kk;
    return o;
  };
  // gate with the configurable sigmoid: σ(β − α‖p̂‖)
  auto gate = [sigmoid](const FKAConv<double>& l, const P& local) {
    return sigmoid(ad::sub(l.beta(), ad::mul(ad::norm_last(local), l.alpha())));
  };
  for (const char* which : {"alpha", "beta"}) {
    c.push_back({std::string("fkaconv.gate.") + which, false, [=](std::mt19937_64& r, double h) {
                   FKAConv<double> l(layer_opts(2, 2, 5, 4), r);
                   const P local = ad::constant(uniform_tensor({3, 5, 3}, r));
                   const P param = std::string(which) == "alpha" ? l.alpha() : l.beta();
                   return fd_relative_error({param}, [&] { return gate(l, local); }, r, h);
                 }});
  }
  c.push_back({"fkaconv.gate.coords", false, [=](std::mt19937_64& r, double h) {
                 FKAConv<double> l(layer_opts(2, 2, 5, 4), r);
                 P local = p(uniform_tensor({3, 5, 3}, r));
                 return fd_relative_error({local}, [&] { return gate(l, local); }, r, h);
               }});
  c.push_back({"fkaconv.alignment", false, [=](std::mt19937_64& r, double h) {
                 FKAConv<double> l(layer_opts(2, 2, 5, 4), r);
                 std::vector<P> in;
                 for (auto& [name, v] : l.named_parameters(""))
                   if (name.starts_with("mlp")) {
                     v.mutable_value() = off_zero_tensor(v.shape(), r);
                     in.push_back(v);
                   }
                 P local = p(uniform_tensor({3, 5, 3}, r));
                 P s = p(uniform_tensor({3, 5}, r, 0.1, 1.0));
                 in.push_back(local);
                 in.push_back(s);
                 return fd_relative_error(in, [&] { return l.estimate_alignment(local, s); }, r, h);
               }});
  c.push_back({"fkaconv.apply_kernel", false, [=](std::mt19937_64& r, double h) {
                 FKAConv<double> l(layer_opts(3, 2, 5, 4), r);
                 P A = p(uniform_tensor({3, 4, 5}, r)), f = p(uniform_tensor({3, 5, 3}, r));
                 P bias = l.bias();
                 bias.mutable_value() = uniform_tensor({2}, r);
                 return fd_relative_error({A, f, l.kernel(), bias}, [&] { return l.apply_kernel(A, f); }, r, h);
               }});
  c.push_back({"fkaconv.stack2", true, [=](std::mt19937_64& r, double h) {
                 const std::size_t n = 32;
                 FKAConv<double> l1(layer_opts(2, 3, 6, 4), r), l2(layer_opts(3, 2, 4, 4), r);
                 const auto pts = random_cloud(n, r);
                 P feats = p(uniform_tensor({n, 2}, r));
                 std::vector<std::size_t> ids1(n);
                 std::iota(ids1.begin(), ids1.end(), std::size_t{0});
                 const std::vector<std::size_t> ids2{0, 5, 9, 14, 20, 27};
                 const auto nb1 = knn(pts, ids1, 6), nb2 = knn(pts, ids2, 4);
                 // one training pass sets the radii; the check then runs with a fixed state
                 l1.forward(pts, nb1, feats, true);
                 l2.forward(pts, nb2, ad::constant(uniform_tensor({n, 3}, r)), true);
                 std::vector<P> in{feats};
                 for (auto* l : {&l1, &l2})
                   for (auto& [name, v] : l->named_parameters("")) {
                     // the self-neighbor sits at p̂ = 0, which zero biases would place on the ReLU kink
                     if (name.ends_with(".b") || name == "bias") v.mutable_value() = uniform_tensor(v.shape(), r, -0.5, 0.5);
                     in.push_back(v);
                   }
                 return fd_relative_error(in, [&] { return l2.forward(pts, nb2, sigmoid(l1.forward(pts, nb1, feats, false)), false); },
                                          r, h);
               }});
  return c;
}

}  // namespace detail

inline GradCheckReport run_gradcheck(const GradCheckOptions& opt = {}) {
  if (opt.seeds.empty()) throw ParameterError("gradcheck needs at least one seed");
  if (!opt.corrupt_op.empty() && opt.corrupt_op != "sigmoid")
    throw ParameterError("only 'sigmoid' can be corrupted, got '" + opt.corrupt_op + "'");
  std::function<detail::VarD(const detail::VarD&)> sigmoid = [](const detail::VarD& x) { return ad::sigmoid(x); };
  if (opt.corrupt_op == "sigmoid") sigmoid = detail::corrupted_sigmoid;
  GradCheckReport report;
  report.seeds = opt.seeds;
  for (const auto& chk : detail::build_checks(sigmoid)) {
    GradCheckEntry e{chk.name, 0.0, chk.end_to_end ? opt.stack_tolerance : opt.op_tolerance};
    for (auto seed : opt.seeds) {
      std::uint64_t h = 1469598103934665603ULL;  // FNV-1a of the check name
      for (char ch : chk.name) h = (h ^ static_cast<unsigned char>(ch)) * 1099511628211ULL;
      std::mt19937_64 rng(h + seed);
      e.max_rel_error = std::max(e.max_rel_error, chk.run(rng, opt.step));
    }
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace fkac
