#pragma once

// Feature-kernel alignment convolution.
//
// For each support point q with k neighbors p_i and features f_i:
//   p̂_i = (p_i − q) / r_t              r_t: EMA of the batch mean neighborhood radius
//   s_i = σ(β − α‖p̂_i‖)                learned spatial gate
//   A   = MLP(p̂) with s-weighted max-pooled context after layers 1 and 2
//   h   = Σ_f K_fᵀ A f_f + bias
// A is k_kernel × k and distributes the k neighbor features over the kernel slots.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fkaconv/autodiff.hpp"
#include "fkaconv/checkpoint.hpp"
#include "fkaconv/error.hpp"
#include "fkaconv/geometry.hpp"

namespace fkac {

/// Neighborhood normalization / gating variants compared in the ablation.
enum class NeighborhoodMode {
  kLearned,          // EMA radius + learned sigmoid gate
  kNoNormalization,  // raw p − q, learned gate
  kUnitBall,         // each neighborhood scaled by its own radius, learned gate
  kHardGateR,        // EMA radius, s = [‖p − q‖ < r_t]
  kHardGate2R,       // EMA radius, s = [‖p − q‖ < 2 r_t]
};

inline std::string_view mode_name(NeighborhoodMode m) {
  switch (m) {
    case NeighborhoodMode::kLearned: return "learned";
    case NeighborhoodMode::kNoNormalization: return "no_normalization";
    case NeighborhoodMode::kUnitBall: return "unit_ball";
    case NeighborhoodMode::kHardGateR: return "hard_gate_r";
    case NeighborhoodMode::kHardGate2R: return "hard_gate_2r";
  }
  return "?";
}

inline NeighborhoodMode parse_mode(std::string_view s) {
  for (auto m : {NeighborhoodMode::kLearned, NeighborhoodMode::kNoNormalization, NeighborhoodMode::kUnitBall,
                 NeighborhoodMode::kHardGateR, NeighborhoodMode::kHardGate2R})
    if (mode_name(m) == s) return m;
  throw ConfigError("unknown neighborhood mode '" + std::string(s) + "'");
}

inline bool uses_learned_gate(NeighborhoodMode m) {
  return m != NeighborhoodMode::kHardGateR && m != NeighborhoodMode::kHardGate2R;
}

struct FKAConvOptions {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t k = 16;         // neighbors per support point
  std::size_t k_kernel = 16;  // kernel slots; also the MLP hidden width
  double momentum = 0.1;      // weight of the newest batch in the radius EMA
  NeighborhoodMode mode = NeighborhoodMode::kLearned;
};

namespace detail {

// out[s,o] = Σ_{m,f} G[s,m,f] · K[o,f,m]
template <class T>
ad::Var<T> kernel_contract(const ad::Var<T>& G, const ad::Var<T>& K) {
  const auto& gs = G.shape();
  const auto& ks = K.shape();
  if (gs.rank() != 3 || ks.rank() != 3 || gs[1] != ks[2] || gs[2] != ks[1])
    throw DimensionError("kernel contraction: " + gs.str() + " incompatible with kernel " + ks.str());
  const std::size_t S = gs[0], M = gs[1], F = gs[2], O = ks[0];
  // Kt[(m,f), o] = K[o,f,m]
  auto Kt = std::make_shared<std::vector<T>>(M * F * O);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t m = 0; m < M; ++m) (*Kt)[(m * F + f) * O + o] = K.value()[(o * F + f) * M + m];
  Tensor<T> out(Shape{S, O});
  ad::detail::gemm_nn(G.value().data(), Kt->data(), out.data(), S, M * F, O);
  return ad::make_node<T>(std::move(out), "kernel_contract", {G, K}, [Kt, S, M, F, O](ad::Node<T>& self) {
    auto& pg = *self.parents[0];
    auto& pk = *self.parents[1];
    if (pg.requires_grad) ad::detail::gemm_nt(self.grad.data(), Kt->data(), pg.ensure_grad().data(), S, O, M * F);
    if (pk.requires_grad) {
      std::vector<T> gkt(M * F * O, T(0));
      ad::detail::gemm_tn(pg.value.data(), self.grad.data(), gkt.data(), S, M * F, O);
      auto& gk = pk.ensure_grad();
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t f = 0; f < F; ++f)
          for (std::size_t m = 0; m < M; ++m) gk[(o * F + f) * M + m] += gkt[(m * F + f) * O + o];
    }
  });
}

// s-weighted max over the neighbors of each support: [S,k,H] → [S,H].
template <class T>
ad::Var<T> pooled_context(const ad::Var<T>& h, const ad::Var<T>& s3) {
  return ad::max_over_axis(ad::mul(h, s3), 1).values;
}

// linear(concat(h, g broadcast over k), W, b) without materializing the
// concatenation: h·W[:H] + g·W[H:] + b for h [S,k,H], g [S,G], W [(H+G)×O].
template <class T>
ad::Var<T> context_linear(const ad::Var<T>& h, const ad::Var<T>& g, const ad::Var<T>& W, const ad::Var<T>& b) {
  const auto& hs = h.shape();
  if (hs.rank() != 3 || g.shape().rank() != 2 || g.shape()[0] != hs[0] || W.shape().rank() != 2 ||
      W.shape()[0] != hs[2] + g.shape()[1] || b.numel() != W.shape()[1])
    throw DimensionError("context_linear: " + hs.str() + ", " + g.shape().str() + ", " + W.shape().str() +
                         " are incompatible");
  const std::size_t S = hs[0], k = hs[1], H = hs[2], G = g.shape()[1], O = W.shape()[1];
  Tensor<T> c(Shape{S, O});
  ad::detail::gemm_nn(g.value().data(), W.value().data() + H * O, c.data(), S, G, O);
  Tensor<T> out(Shape{S, k, O});
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t o = 0; o < O; ++o) out[(s * k + j) * O + o] = c[s * O + o] + b.value()[o];
  ad::detail::gemm_nn(h.value().data(), W.value().data(), out.data(), S * k, H, O);
  return ad::make_node<T>(std::move(out), "context_linear", {h, g, W, b}, [S, k, H, G, O](ad::Node<T>& self) {
    auto& ph = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pw = *self.parents[2];
    auto& pb = *self.parents[3];
    const T* d = self.grad.data();
    std::vector<T> dc(S * O, T(0));
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t o = 0; o < O; ++o) dc[s * O + o] += d[(s * k + j) * O + o];
    if (ph.requires_grad) ad::detail::gemm_nt(d, pw.value.data(), ph.ensure_grad().data(), S * k, O, H);
    if (pg.requires_grad) ad::detail::gemm_nt(dc.data(), pw.value.data() + H * O, pg.ensure_grad().data(), S, O, G);
    if (pw.requires_grad) {
      auto& gw = pw.ensure_grad();
      ad::detail::gemm_tn(ph.value.data(), d, gw.data(), S * k, H, O);
      ad::detail::gemm_tn(pg.value.data(), dc.data(), gw.data() + H * O, S, G, O);
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t o = 0; o < O; ++o) gb[o] += dc[s * O + o];
    }
  });
}

}  // namespace detail

template <class T>
class FKAConv {
 public:
  struct Output {
    ad::Var<T> features;
    NeighborIndex neighbors;
  };

  FKAConv() = default;

  template <class Rng>
  FKAConv(const FKAConvOptions& opt, Rng& rng) : opt_(opt) {
    if (opt.k == 0 || opt.k_kernel == 0 || opt.in_channels == 0 || opt.out_channels == 0)
      throw ConfigError("FKAConv extents must be positive");
    if (!(opt.momentum > 0 && opt.momentum <= 1)) throw ConfigError("FKAConv momentum must lie in (0, 1]");
    const std::size_t H = opt.k_kernel, KK = opt.k_kernel;
    kernel_ = ad::parameter(ad::uniform_init<T>(Shape{opt.out_channels, opt.in_channels, KK},
                                                opt.in_channels * KK, opt.out_channels, rng));
    bias_ = ad::parameter(Tensor<T>(Shape{opt.out_channels}));
    w1_ = ad::parameter(ad::uniform_init<T>(Shape{3, H}, 3, H, rng));
    b1_ = ad::parameter(Tensor<T>(Shape{H}));
    w2_ = ad::parameter(ad::uniform_init<T>(Shape{2 * H, H}, 2 * H, H, rng));
    b2_ = ad::parameter(Tensor<T>(Shape{H}));
    w3_ = ad::parameter(ad::uniform_init<T>(Shape{2 * H, KK}, 2 * H, KK, rng));
    b3_ = ad::parameter(Tensor<T>(Shape{KK}));
    alpha_ = ad::parameter(Tensor<T>::scalar(T(1)));
    beta_ = ad::parameter(Tensor<T>::scalar(T(1)));
  }

  const FKAConvOptions& options() const noexcept { return opt_; }

  // --- radius EMA -----------------------------------------------------------

  bool frozen() const noexcept { return frozen_; }
  void set_frozen(bool f) noexcept { frozen_ = f; }
  bool radius_initialized() const noexcept { return ema_radius_[0] > T(0); }
  T ema_radius() const noexcept { return ema_radius_[0]; }
  void set_ema_radius(T r) { ema_radius_[0] = r; }

  /// r_t ← r̂·m + r_{t−1}·(1 − m); the first batch sets r_t = r̂.
  T ema_update(double batch_mean_radius) {
    if (frozen_) throw StateError("radius EMA update on a frozen layer");
    if (!(batch_mean_radius > 0)) throw ParameterError("batch mean radius must be positive");
    const T r_hat = static_cast<T>(batch_mean_radius);
    const T m = static_cast<T>(opt_.momentum);
    ema_radius_[0] = radius_initialized() ? r_hat * m + ema_radius_[0] * (T(1) - m) : r_hat;
    return ema_radius_[0];
  }

  // --- stages ---------------------------------------------------------------

  /// s_i = σ(β − α‖p̂_i‖) for local coordinates [S×k×3]; returns [S×k].
  ad::Var<T> gate(const ad::Var<T>& local_coords) const {
    check_local(local_coords);
    const auto norms = ad::norm_last(local_coords);
    return ad::sigmoid(ad::sub(beta_, ad::mul(norms, alpha_)));
  }

  /// Three point-wise layers on p̂; the s-weighted max over neighbors of the
  /// first two layers' outputs is appended to each point before the next
  /// layer. Returns A as [S × k_kernel × k]: column i comes from neighbor i.
  ad::Var<T> estimate_alignment(const ad::Var<T>& local_coords, const ad::Var<T>& s) const {
    check_local(local_coords);
    const std::size_t S = local_coords.shape()[0], k = local_coords.shape()[1];
    if (s.shape() != Shape{S, k})
      throw DimensionError("gate weights " + s.shape().str() + " do not match neighborhoods " +
                           local_coords.shape().str());
    const auto s3 = ad::reshape(s, Shape{S, k, 1});
    auto h1 = ad::relu(ad::linear(local_coords, w1_, b1_));
    auto h2 = ad::relu(detail::context_linear(h1, detail::pooled_context(h1, s3), w2_, b2_));
    auto a = detail::context_linear(h2, detail::pooled_context(h2, s3), w3_, b3_);  // [S,k,KK]
    return ad::transpose_last2(a);
  }

  /// Σ_f K_fᵀ A f_f + bias for A [S×k_kernel×k] and neighbor features [S×k×F_in].
  ad::Var<T> apply_kernel(const ad::Var<T>& A, const ad::Var<T>& feats) const {
    const auto& as = A.shape();
    const auto& fs = feats.shape();
    if (as.rank() != 3 || fs.rank() != 3 || as[0] != fs[0] || as[2] != fs[1])
      throw DimensionError("alignment " + as.str() + " does not match neighbor features " + fs.str());
    if (as[1] != opt_.k_kernel || fs[2] != opt_.in_channels)
      throw DimensionError("alignment/features " + as.str() + ", " + fs.str() + " do not match the layer");
    const auto G = ad::bmm(A, feats);  // [S, KK, F_in]
    return ad::add(detail::kernel_contract(G, kernel_), bias_);
  }

  // --- full layer -----------------------------------------------------------

  /// Local coordinates, gate weights and r̂ for a neighbor index whose support
  /// ids address `source`. Updates the radius EMA first when `update_radius`.
  struct Geometry {
    ad::Var<T> local;
    ad::Var<T> gate;
    double batch_mean_radius = 0;
  };

  Geometry neighborhood_geometry(std::span<const Vec3> source, const NeighborIndex& nbrs, bool update_radius) {
    const auto radii = neighborhood_radii(source, nbrs);
    const double r_hat = mean_of(radii);
    if (update_radius && !frozen_ && r_hat > 0) ema_update(r_hat);
    const std::size_t S = nbrs.rows(), k = nbrs.k;
    Tensor<T> local(Shape{S, k, 3});
    double r_t = radius_initialized() ? static_cast<double>(ema_radius_[0]) : r_hat;
    if (!(r_t > 0)) r_t = 1.0;
    for (std::size_t s = 0; s < S; ++s) {
      double div = r_t;
      if (opt_.mode == NeighborhoodMode::kNoNormalization) div = 1.0;
      if (opt_.mode == NeighborhoodMode::kUnitBall) div = radii[s] > 0 ? radii[s] : 1.0;
      const Vec3& q = source[nbrs.support_ids[s]];
      auto row = nbrs.row(s);
      for (std::size_t j = 0; j < k; ++j)
        for (int a = 0; a < 3; ++a)
          local[(s * k + j) * 3 + a] = static_cast<T>((source[row[j]][a] - q[a]) / div);
    }
    Geometry g;
    g.local = ad::constant(std::move(local));
    g.batch_mean_radius = r_hat;
    if (uses_learned_gate(opt_.mode)) {
      g.gate = gate(g.local);
    } else {
      const T cut = opt_.mode == NeighborhoodMode::kHardGateR ? T(1) : T(2);
      const auto norms = ad::norm_last(g.local).value();
      Tensor<T> hard(Shape{S, k});
      for (std::size_t i = 0; i < hard.numel(); ++i) hard[i] = norms[i] < cut ? T(1) : T(0);
      g.gate = ad::constant(std::move(hard));
    }
    return g;
  }

  /// Layer output [S×F_out] for explicit neighborhoods. `feats` is [N×F_in]
  /// aligned with `source`. Training mode refreshes the radius EMA before the
  /// neighborhoods are normalized; otherwise r_t is read-only.
  ad::Var<T> forward(std::span<const Vec3> source, const NeighborIndex& nbrs, const ad::Var<T>& feats, bool training) {
    check_feats(source, feats);
    auto geo = neighborhood_geometry(source, nbrs, training);
    const auto A = estimate_alignment(geo.local, geo.gate);
    return apply_kernel(A, gather_neighbors(feats, nbrs));
  }

  /// Builds the k-NN neighborhoods of `support_ids` in `source` first.
  Output forward(std::span<const Vec3> source, std::span<const std::size_t> support_ids, const ad::Var<T>& feats,
                 bool training) {
    Output out;
    out.neighbors = knn_grid(source, support_ids, opt_.k);
    out.features = forward(source, out.neighbors, feats, training);
    return out;
  }

  /// Same as forward() but with a caller-supplied alignment matrix.
  ad::Var<T> forward_with_alignment(std::span<const Vec3> source, const NeighborIndex& nbrs, const ad::Var<T>& feats,
                                    const ad::Var<T>& A) const {
    check_feats(source, feats);
    return apply_kernel(A, gather_neighbors(feats, nbrs));
  }

  // --- parameters -------------------------------------------------------------

  const ad::Var<T>& kernel() const noexcept { return kernel_; }
  const ad::Var<T>& bias() const noexcept { return bias_; }
  const ad::Var<T>& alpha() const noexcept { return alpha_; }
  const ad::Var<T>& beta() const noexcept { return beta_; }

  /// Trainable parameters. α and β are omitted when the gate is hard-coded.
  std::vector<std::pair<std::string, ad::Var<T>>> named_parameters(const std::string& prefix) const {
    std::vector<std::pair<std::string, ad::Var<T>>> out{
        {prefix + "kernel", kernel_}, {prefix + "bias", bias_}, {prefix + "mlp1.W", w1_}, {prefix + "mlp1.b", b1_},
        {prefix + "mlp2.W", w2_},     {prefix + "mlp2.b", b2_}, {prefix + "mlp3.W", w3_}, {prefix + "mlp3.b", b3_}};
    if (uses_learned_gate(opt_.mode)) {
      out.emplace_back(prefix + "alpha", alpha_);
      out.emplace_back(prefix + "beta", beta_);
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_buffers(const std::string& prefix) {
    return {{prefix + "ema_radius", &ema_radius_}};
  }

 private:
  void check_local(const ad::Var<T>& local) const {
    if (local.shape().rank() != 3 || local.shape()[2] != 3)
      throw DimensionError("local coordinates must be [S x k x 3], got " + local.shape().str());
  }

  void check_feats(std::span<const Vec3> source, const ad::Var<T>& feats) const {
    if (feats.shape().rank() != 2 || feats.shape()[0] != source.size() || feats.shape()[1] != opt_.in_channels)
      throw DimensionError("features " + feats.shape().str() + " do not match " + std::to_string(source.size()) +
                           " points with " + std::to_string(opt_.in_channels) + " channels");
  }

  static ad::Var<T> gather_neighbors(const ad::Var<T>& feats, const NeighborIndex& nbrs) {
    const auto g = ad::gather_rows(feats, nbrs.indices);
    return ad::reshape(g, Shape{nbrs.rows(), nbrs.k, feats.shape()[1]});
  }

  FKAConvOptions opt_;
  ad::Var<T> kernel_, bias_, w1_, b1_, w2_, b2_, w3_, b3_, alpha_, beta_;
  Tensor<T> ema_radius_ = Tensor<T>::scalar(T(0));  // 0 until the first training batch
  bool frozen_ = false;
};

}  // namespace fkac
