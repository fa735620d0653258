#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "diffprune/error.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune {

/// Noise draws stay inside (eps, 1 - eps) so logit(u) is always finite.
inline constexpr double kUniformEps = 1e-6;

/// Location parameters and stretch interval of a stretched Hard-Concrete gate.
struct GateParams {
  std::vector<float> alpha;
  double l = -1.5;
  double r = 1.5;

  /// log(-l / r); the shift inside every closed-form gate probability.
  double log_ratio() const { return std::log(-l / r); }

  void validate() const {
    require(l < 0.0 && r > 1.0, ErrorCode::kInvalidArgument,
            "stretch interval requires l < 0 and r > 1");
    for (float a : alpha) require(std::isfinite(a), ErrorCode::kNonFinite, "gate alpha is not finite");
  }
};

struct GateSample {
  std::vector<float> u;
  std::vector<float> z;
};

inline std::vector<float> draw_uniform(Rng& rng, std::size_t n) {
  std::vector<float> u(n);
  for (float& v : u) v = static_cast<float>(rng.uniform_open(kUniformEps));
  return u;
}

namespace detail {

inline void check_noise(std::span<const float> u, std::size_t expected) {
  require(u.size() == expected, ErrorCode::kDimensionMismatch,
          "noise length " + std::to_string(u.size()) + " != gate count " + std::to_string(expected));
  for (float v : u) {
    require(v > 0.0f && v < 1.0f, ErrorCode::kInvalidArgument, "gate noise must lie strictly inside (0, 1)");
  }
}

template <std::floating_point T>
Tensor<T> logit_tensor(std::span<const float> u) {
  std::vector<T> out(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = static_cast<T>(ops::logit(u[i]));
  return Tensor<T>::vector(std::move(out));
}

}  // namespace detail

/// Differentiable gate chain
///   s = sigmoid(logit(u) + alpha),  s_bar = s (r - l) + l,  z = clamp(s_bar, 0, 1)
/// recorded on `graph`. `alpha` must be a vector node.
template <std::floating_point T>
Var sample_gate(Graph<T>& graph, Var alpha, std::span<const float> u, double l, double r) {
  detail::check_noise(u, graph.value(alpha).size());
  Var noise = graph.constant(detail::logit_tensor<T>(u));
  Var s = graph.sigmoid(graph.add(alpha, noise));
  Var stretched = graph.affine(s, static_cast<T>(r - l), static_cast<T>(l));
  return graph.clamp(stretched, T{0}, T{1});
}

/// Value-only evaluation of the same chain.
inline GateSample sample_gate(const GateParams& params, std::span<const float> u) {
  params.validate();
  Graph<float> graph;
  Var alpha = graph.constant(Tensor<float>::vector(params.alpha));
  Var z = sample_gate(graph, alpha, u, params.l, params.r);
  return GateSample{std::vector<float>(u.begin(), u.end()), graph.value(z).data};
}

/// Per-coordinate P(z_i != 0) = sigmoid(alpha_i - log(-l/r)).
inline std::vector<double> expected_l0(const GateParams& params) {
  params.validate();
  const double c = params.log_ratio();
  std::vector<double> p(params.alpha.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = ops::sigmoid(static_cast<double>(params.alpha[i]) - c);
  return p;
}

/// Differentiable per-coordinate probabilities.
template <std::floating_point T>
Var expected_l0(Graph<T>& graph, Var alpha, double l, double r) {
  const T c = static_cast<T>(std::log(-l / r));
  return graph.sigmoid(graph.affine(alpha, T{1}, -c));
}

/// One-shot gate used to fix the diff after training: a single noise draw
/// from a stream seeded by `seed`.
inline std::vector<float> finalize_gate(const GateParams& params, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> u = draw_uniform(rng, params.alpha.size());
  return sample_gate(params, u).z;
}

}  // namespace diffprune
