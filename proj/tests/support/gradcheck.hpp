#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "diffprune/diff.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune::testing {

// Central differences in double; agreement means
// |analytic - numeric| <= kGradRtol * max(|analytic|, |numeric|) + kGradAtol.
inline constexpr double kGradStep = 1e-6;
inline constexpr double kGradRtol = 1e-3;
inline constexpr double kGradAtol = 1e-7;

using Builder = std::function<Var(Graph<double>&, const std::vector<Var>&)>;

struct GradCheck {
  bool ok = true;
  double worst = 0.0;  // largest |a - n| / (max(|a|, |n|) + atol / rtol)
  std::string where;
};

/// Compares reverse-mode gradients of sum(f(inputs) * weights) against central
/// differences for every input element. Non-scalar outputs are reduced with
/// fixed random weights so that every output element matters.
inline GradCheck gradcheck(const Builder& f, const std::vector<Tensor<double>>& inputs, std::uint64_t seed = 1) {
  Rng rng(seed);
  std::vector<double> weights;
  auto evaluate = [&](const std::vector<Tensor<double>>& xs, Graph<double>& g, std::vector<Var>& leaves) {
    leaves.clear();
    for (const auto& x : xs) leaves.push_back(g.leaf(x));
    Var out = f(g, leaves);
    if (g.value(out).size() == 1 && g.shape(out).empty()) return out;
    const std::size_t n = g.value(out).size();
    if (weights.size() != n) {
      weights.resize(n);
      for (double& w : weights) w = rng.uniform(-1.0, 1.0);
    }
    Tensor<double> wt{g.shape(out), weights};
    return g.sum(g.mul(out, g.constant(wt)));
  };

  Graph<double> g;
  std::vector<Var> leaves;
  Var root = evaluate(inputs, g, leaves);
  g.backward(root);

  GradCheck result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::vector<double> analytic = g.grad(leaves[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto at = [&](double delta) {
        std::vector<Tensor<double>> xs = inputs;
        xs[k].data[i] += delta;
        Graph<double> gp;
        std::vector<Var> lp;
        return gp.value(evaluate(xs, gp, lp)).item();
      };
      const double numeric = (at(kGradStep) - at(-kGradStep)) / (2.0 * kGradStep);
      const double a = analytic[i];
      const double err = std::abs(a - numeric);
      const double allowed = kGradRtol * std::max(std::abs(a), std::abs(numeric)) + kGradAtol;
      const double score = err / allowed;
      if (score > result.worst) result.worst = score;
      if (err > allowed && result.ok) {
        result.ok = false;
        result.where = "input " + std::to_string(k) + " element " + std::to_string(i) + ": analytic " +
                       std::to_string(a) + " vs numeric " + std::to_string(numeric);
      }
    }
  }
  return result;
}

/// A random tensor with entries in [lo, hi], optionally kept at least `gap`
/// away from each of `kinks` so piecewise ops are differentiable there.
inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo, double hi, std::vector<double> kinks = {},
                                    double gap = 0.0) {
  Tensor<double> t = Tensor<double>::zeros(shape);
  for (double& v : t.data) {
    for (;;) {
      v = rng.uniform(lo, hi);
      if (std::all_of(kinks.begin(), kinks.end(), [&](double k) { return std::abs(v - k) >= gap; })) break;
    }
  }
  return t;
}

struct NamedCheck {
  std::string op;
  std::function<GradCheck(Rng&)> run;  // one random point per call
};

/// One entry per differentiable op, plus the expected-L0 penalty in both
/// variants.
inline std::vector<NamedCheck> gradient_suite() {
  using G = Graph<double>;
  using V = std::vector<Var>;
  std::vector<NamedCheck> s;
  auto unary = [&](std::string name, std::function<Var(G&, Var)> op, double lo, double hi,
                   std::vector<double> kinks = {}) {
    s.push_back({name, [=](Rng& rng) {
                   return gradcheck([=](G& g, const V& x) { return op(g, x[0]); },
                                    {random_tensor(rng, {3, 4}, lo, hi, kinks, 0.05)}, rng.next());
                 }});
  };
  s.push_back({"matmul", [](Rng& rng) {
                 return gradcheck([](G& g, const V& x) { return g.matmul(x[0], x[1]); },
                                  {random_tensor(rng, {3, 4}, -1, 1), random_tensor(rng, {4, 2}, -1, 1)}, rng.next());
               }});
  s.push_back({"add", [](Rng& rng) {
                 return gradcheck([](G& g, const V& x) { return g.add(x[0], x[1]); },
                                  {random_tensor(rng, {3, 4}, -1, 1), random_tensor(rng, {3, 4}, -1, 1)}, rng.next());
               }});
  s.push_back({"add_row_bias", [](Rng& rng) {
                 return gradcheck([](G& g, const V& x) { return g.add(x[0], x[1]); },
                                  {random_tensor(rng, {3, 4}, -1, 1), random_tensor(rng, {4}, -1, 1)}, rng.next());
               }});
  s.push_back({"mul", [](Rng& rng) {
                 return gradcheck([](G& g, const V& x) { return g.mul(x[0], x[1]); },
                                  {random_tensor(rng, {3, 4}, -1, 1), random_tensor(rng, {3, 4}, -1, 1)}, rng.next());
               }});
  unary("sigmoid", [](G& g, Var a) { return g.sigmoid(a); }, -4, 4);
  unary("log", [](G& g, Var a) { return g.log(a); }, 0.2, 3);
  unary("tanh", [](G& g, Var a) { return g.tanh(a); }, -2, 2);
  unary("relu", [](G& g, Var a) { return g.relu(a); }, -1, 1, {0.0});
  unary("clamp", [](G& g, Var a) { return g.clamp(a, -0.5, 0.7); }, -1, 1, {-0.5, 0.7});
  unary("affine", [](G& g, Var a) { return g.affine(a, 3.0, -1.5); }, -1, 1);
  unary("sum", [](G& g, Var a) { return g.sum(a); }, -1, 1);
  unary("transpose", [](G& g, Var a) { return g.transpose(a); }, -1, 1);
  unary("softmax_rows", [](G& g, Var a) { return g.softmax_rows(a); }, -2, 2);
  unary("mean_rows", [](G& g, Var a) { return g.mean_rows(a); }, -1, 1);
  unary("slice_cols", [](G& g, Var a) { return g.slice_cols(a, 1, 3); }, -1, 1);
  unary("slice", [](G& g, Var a) { return g.slice(a, 2, {2, 3}); }, -1, 1);
  s.push_back({"softmax_cross_entropy", [](Rng& rng) {
                 std::vector<std::uint32_t> labels(3);
                 for (auto& l : labels) l = static_cast<std::uint32_t>(rng.below(4));
                 return gradcheck([labels](G& g, const V& x) { return g.softmax_cross_entropy(x[0], labels); },
                                  {random_tensor(rng, {3, 4}, -2, 2)}, rng.next());
               }});
  s.push_back({"gather", [](Rng& rng) {
                 std::vector<std::uint32_t> idx(7);
                 for (auto& i : idx) i = static_cast<std::uint32_t>(rng.below(5));
                 return gradcheck([idx](G& g, const V& x) { return g.gather(x[0], idx); },
                                  {random_tensor(rng, {5}, -1, 1)}, rng.next());
               }});
  s.push_back({"scatter", [](Rng& rng) {
                 std::vector<std::uint32_t> idx{1, 4, 6};
                 return gradcheck([idx](G& g, const V& x) { return g.scatter(x[0], idx, 8); },
                                  {random_tensor(rng, {3}, -1, 1)}, rng.next());
               }});
  s.push_back({"gather_rows", [](Rng& rng) {
                 std::vector<std::uint32_t> ids(5);
                 for (auto& i : ids) i = static_cast<std::uint32_t>(rng.below(4));
                 return gradcheck([ids](G& g, const V& x) { return g.gather_rows(x[0], ids); },
                                  {random_tensor(rng, {4, 3}, -1, 1)}, rng.next());
               }});
  s.push_back({"concat_cols", [](Rng& rng) {
                 return gradcheck(
                     [](G& g, const V& x) {
                       const Var parts[] = {x[0], x[1]};
                       return g.concat_cols(parts);
                     },
                     {random_tensor(rng, {3, 2}, -1, 1), random_tensor(rng, {3, 4}, -1, 1)}, rng.next());
               }});
  s.push_back({"concat_rows", [](Rng& rng) {
                 return gradcheck(
                     [](G& g, const V& x) {
                       const Var parts[] = {x[0], x[1]};
                       return g.concat_rows(parts);
                     },
                     {random_tensor(rng, {2, 3}, -1, 1), random_tensor(rng, {1, 3}, -1, 1)}, rng.next());
               }});
  for (bool structured : {false, true}) {
    s.push_back({structured ? "expected_l0_total_structured" : "expected_l0_total", [structured](Rng& rng) {
                   auto space = std::make_shared<FlatParamSpace>();
                   space->add("a", {3, 2}, 0);
                   space->add("b", {4}, 0);
                   space->add("c", {2, 2}, 1);
                   space->add("head", {3}, 2, true);
                   const SpacePtr sp = space;
                   const GatedDiff diff = make_gated_diff(sp, structured);
                   std::vector<Tensor<double>> in{random_tensor(rng, {sp->total_dim()}, -3, 3)};
                   if (structured) in.push_back(random_tensor(rng, {diff.structure->size()}, -3, 3));
                   return gradcheck(
                       [diff, structured](G& g, const V& x) {
                         DiffLeaves leaves{x[0], Var{}, structured ? x[1] : Var{}};
                         return expected_l0_total(g, diff, leaves);
                       },
                       in, rng.next());
                 }});
  }
  return s;
}

}  // namespace diffprune::testing
