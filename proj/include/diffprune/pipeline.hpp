#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "diffprune/data.hpp"
#include "diffprune/diff.hpp"
#include "diffprune/error.hpp"
#include "diffprune/gates.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune {

/// Anything that maps a flat parameter node and a batch to logits.
template <class M>
concept DiffModel = requires(const M& m, Graph<float>& g, Var params, Batch batch) {
  { m.forward(g, params, batch) } -> std::same_as<Var>;
  { m.space() } -> std::convertible_to<SpacePtr>;
};

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double lambda = 1.25e-7;
  double l = -1.5;
  double r = 1.5;
  double target_sparsity = 0.005;
  int epochs_train = 3;
  int epochs_finetune = 3;
  double learning_rate = 0.5;
  double alpha_learning_rate = 0.5;
  double finetune_learning_rate = 0.5;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const {
    require(lambda >= 0.0, ErrorCode::kConfig, "lambda must be >= 0");
    require(l < 0.0 && r > 1.0, ErrorCode::kConfig, "stretch interval requires l < 0 and r > 1");
    require(target_sparsity > 0.0 && target_sparsity <= 1.0, ErrorCode::kConfig, "target_sparsity must be in (0, 1]");
    require(epochs_train >= 1, ErrorCode::kConfig, "epochs_train must be >= 1");
    require(epochs_finetune >= 0, ErrorCode::kConfig, "epochs_finetune must be >= 0");
    require(learning_rate > 0.0 && alpha_learning_rate > 0.0 && finetune_learning_rate > 0.0, ErrorCode::kConfig,
            "learning rates must be > 0");
    require(batch_size >= 1, ErrorCode::kConfig, "batch_size must be >= 1");
  }
};

/// One row of training telemetry.
struct EpochMetrics {
  std::string stage;
  int epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double expected_l0 = 0.0;
  double wall_seconds = 0.0;
};

using MetricsSink = std::function<void(const EpochMetrics&)>;

// ---- evaluation -----------------------------------------------------------

/// Mean cross-entropy of the model at `params` over `batch`.
template <DiffModel Model>
Var empirical_risk(Graph<float>& g, const Model& model, Var params, Batch batch) {
  require(!batch.empty(), ErrorCode::kInvalidArgument, "empirical risk of an empty batch");
  const std::vector<std::uint32_t> labels = labels_of(batch);
  return g.softmax_cross_entropy(model.forward(g, params, batch), labels);
}

template <DiffModel Model>
double mean_loss(const Model& model, std::span<const float> params, std::span<const Example> examples,
                 std::size_t chunk = 256) {
  double total = 0.0;
  for (std::size_t begin = 0; begin < examples.size(); begin += chunk) {
    const Batch batch = examples.subspan(begin, std::min(chunk, examples.size() - begin));
    Graph<float> g;
    Var p = g.constant(Tensor<float>::vector(std::vector<float>(params.begin(), params.end())));
    total += static_cast<double>(g.value(empirical_risk(g, model, p, batch)).item()) * batch.size();
  }
  return examples.empty() ? 0.0 : total / static_cast<double>(examples.size());
}

template <DiffModel Model>
double accuracy(const Model& model, std::span<const float> params, std::span<const Example> examples,
                std::size_t chunk = 256) {
  if (examples.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < examples.size(); begin += chunk) {
    const Batch batch = examples.subspan(begin, std::min(chunk, examples.size() - begin));
    Graph<float> g;
    Var p = g.constant(Tensor<float>::vector(std::vector<float>(params.begin(), params.end())));
    const Tensor<float>& logits = g.value(model.forward(g, p, batch));
    const std::size_t classes = logits.cols();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const float* row = &logits.data[i * classes];
      const auto pred = static_cast<std::uint32_t>(std::max_element(row, row + classes) - row);
      correct += pred == batch[i].label ? 1 : 0;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

template <DiffModel Model>
double diff_accuracy(const Model& model, std::span<const float> theta, const DiffVector& delta,
                     std::span<const Example> examples) {
  const std::vector<float> params = compose(theta, delta);
  return accuracy(model, params, examples);
}

// ---- training plumbing ----------------------------------------------------

namespace detail {

/// Shuffled minibatches for one epoch.
inline std::vector<std::vector<Example>> epoch_batches(const std::vector<Example>& data, std::size_t batch_size,
                                                       Rng& rng) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<Example>> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    std::vector<Example> batch;
    for (std::size_t k = begin; k < std::min(order.size(), begin + batch_size); ++k) batch.push_back(data[order[k]]);
    batches.push_back(std::move(batch));
  }
  return batches;
}

/// First-order update rule for one parameter array. Adam keeps its moment
/// estimates here; plain SGD is stateless.
class Updater {
 public:
  Updater(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  void step(std::vector<float>& param, const std::vector<float>& grad) {
    if (kind_ == OptimizerKind::kSgd) {
      const auto lr = static_cast<float>(lr_);
      for (std::size_t i = 0; i < param.size(); ++i) param[i] -= lr * grad[i];
      return;
    }
    if (m_.empty()) {
      m_.assign(param.size(), 0.0);
      v_.assign(param.size(), 0.0);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double g = grad[i];
      m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * g;
      v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * g * g;
      const double update = lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + kEps);
      param[i] = static_cast<float>(static_cast<double>(param[i]) - update);
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  OptimizerKind kind_;
  double lr_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

/// Runs `step` and converts a numerical blow-up into a divergence error
/// carrying the step index.
template <class F>
double guarded_step(std::size_t step_index, F&& step) {
  double loss = 0.0;
  try {
    loss = step();
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNonFinite) throw;
    fail(ErrorCode::kDivergence, "step " + std::to_string(step_index) + ": " + e.what());
  }
  if (!std::isfinite(loss)) {
    fail(ErrorCode::kDivergence, "step " + std::to_string(step_index) + ": loss=" + std::to_string(loss));
  }
  return loss;
}

inline void check_theta(const GatedDiff& diff, std::span<const float> theta) {
  require(diff.dim() == theta.size(), ErrorCode::kDimensionMismatch,
          "diff dim " + std::to_string(diff.dim()) + " != parameter dim " + std::to_string(theta.size()));
}

}  // namespace detail

/// Number of non-head entries kept at target rate t: ceil(t * d), where a
/// product within 1e-9 (relative) of an integer counts as that integer so
/// that decimal rates like 0.005 * 2000 give exactly 10.
inline std::size_t sparsity_budget(double t, std::size_t d) {
  require(t > 0.0 && t <= 1.0, ErrorCode::kInvalidArgument, "target sparsity must be in (0, 1]");
  const long double exact = static_cast<long double>(t) * static_cast<long double>(d);
  const long double nearest = std::round(exact);
  if (std::fabs(exact - nearest) <= 1e-9L * std::max<long double>(1.0L, exact)) {
    return static_cast<std::size_t>(nearest);
  }
  return static_cast<std::size_t>(std::ceil(exact));
}

// ---- diff pruning ---------------------------------------------------------

/// L0-regularized training of (alpha, w[, group alpha]) over a frozen theta.
/// Each step draws one noise vector shared by the whole minibatch.
template <DiffModel Model>
GatedDiff train_l0(const Model& model, std::span<const float> theta, GatedDiff diff, const TaskDataset& data,
                   const TrainConfig& cfg, const MetricsSink& sink = {}) {
  cfg.validate();
  diff.validate();
  detail::check_theta(diff, theta);
  require(diff.gate.l == cfg.l && diff.gate.r == cfg.r, ErrorCode::kConfig,
          "gated diff stretch interval differs from the training config");
  data.validate();

  Rng rng(cfg.seed);
  Rng order_rng = rng.fork(1);
  Rng noise_rng = rng.fork(2);
  const Tensor<float> theta_tensor = Tensor<float>::vector(std::vector<float>(theta.begin(), theta.end()));
  std::size_t step = 0;
  detail::Stopwatch clock;
  detail::Updater alpha_opt(cfg.optimizer, cfg.alpha_learning_rate);
  detail::Updater w_opt(cfg.optimizer, cfg.learning_rate);
  detail::Updater group_opt(cfg.optimizer, cfg.alpha_learning_rate);

  for (int epoch = 0; epoch < cfg.epochs_train; ++epoch) {
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (const std::vector<Example>& batch : detail::epoch_batches(data.train, cfg.batch_size, order_rng)) {
      const std::vector<float> u = draw_uniform(noise_rng, diff.noise_size());
      Graph<float> g;
      DiffLeaves leaves = bind_leaves(g, diff);
      const double loss = detail::guarded_step(step, [&] {
        Var delta = train_delta(g, diff, leaves, u);
        Var params = g.add(g.constant(theta_tensor), delta);
        Var risk = empirical_risk(g, model, params, batch);
        Var penalty = expected_l0_total(g, diff, leaves);
        Var total = g.add(risk, g.affine(penalty, static_cast<float>(cfg.lambda), 0.0f));
        g.backward(total);
        return static_cast<double>(g.value(total).item());
      });
      alpha_opt.step(diff.gate.alpha, g.grad(leaves.alpha));
      w_opt.step(diff.w, g.grad(leaves.w));
      if (diff.structure) group_opt.step(diff.structure->group_alpha, g.grad(leaves.group_alpha));
      for (float a : diff.gate.alpha)
        if (!std::isfinite(a)) fail(ErrorCode::kDivergence, "step " + std::to_string(step) + ": alpha diverged");
      loss_sum += loss * static_cast<double>(batch.size());
      seen += batch.size();
      ++step;
    }
    if (sink) {
      // validation at the median gate (noise fixed at u = 0.5)
      EpochMetrics m;
      m.stage = "train_l0";
      m.epoch = epoch;
      m.train_loss = loss_sum / static_cast<double>(seen);
      m.expected_l0 = expected_l0_total(diff);
      m.wall_seconds = clock.seconds();
      if (!data.validation.empty()) {
        std::vector<float> u(diff.noise_size(), 0.5f);
        Graph<float> g;
        DiffLeaves leaves = bind_leaves(g, diff);
        Var delta = train_delta(g, diff, leaves, u);
        const std::vector<float>& dv = g.value(delta).data;
        std::vector<float> params(theta.begin(), theta.end());
        for (std::size_t i = 0; i < params.size(); ++i) params[i] += dv[i];
        m.val_accuracy = accuracy(model, params, data.validation);
      }
      sink(m);
    }
  }
  return diff;
}

/// Fixes the diff with a single noise draw: delta = z (.) w, group gates
/// multiplied in when structured. Heads are stored as trained.
inline DiffVector finalize(const GatedDiff& diff, std::uint64_t seed) {
  diff.validate();
  const std::size_t d = diff.dim();
  Rng rng(seed);
  const std::vector<float> u = draw_uniform(rng, diff.noise_size());
  const std::vector<float> z = sample_gate(diff.gate, std::span<const float>(u).first(d)).z;
  std::vector<float> group_z;
  std::vector<std::uint32_t> owner;
  if (diff.structure) {
    GateParams group_params{diff.structure->group_alpha, diff.gate.l, diff.gate.r};
    group_z = sample_gate(group_params, std::span<const float>(u).subspan(d)).z;
    owner = diff.structure->group_of(*diff.space);
  }
  std::vector<float> dense(d, 0.0f);
  for (const Segment& s : diff.space->segments()) {
    for (std::size_t i = s.offset; i < s.end(); ++i) {
      if (s.head) {
        dense[i] = diff.w[i];
      } else {
        float gate = z[i];
        if (diff.structure) gate *= group_z[owner[i]];
        dense[i] = gate * diff.w[i];
      }
    }
  }
  return DiffVector::from_dense(dense, diff.space);
}

/// Magnitude projection onto the L0 ball: keep the sparsity_budget(t, d_nonhead)
/// largest |values| among non-head entries (ties: lower position wins) plus
/// every head entry.
inline DiffVector project_l0(const DiffVector& delta, double t) {
  delta.validate();
  require(delta.space != nullptr, ErrorCode::kInvalidArgument, "projection needs the diff's parameter space");
  const std::size_t budget = sparsity_budget(t, delta.space->nonhead_dim());
  std::vector<std::size_t> candidates;
  std::vector<bool> keep(delta.nnz(), false);
  for (std::size_t k = 0; k < delta.nnz(); ++k) {
    if (delta.space->is_head(delta.positions[k])) {
      keep[k] = true;
    } else {
      candidates.push_back(k);
    }
  }
  if (candidates.size() > budget) {
    std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
      return std::fabs(delta.values[a]) > std::fabs(delta.values[b]);
    });
    candidates.resize(budget);
  }
  for (std::size_t k : candidates) keep[k] = true;
  DiffVector out;
  out.dim = delta.dim;
  out.space = delta.space;
  for (std::size_t k = 0; k < delta.nnz(); ++k) {
    if (keep[k]) {
      out.positions.push_back(delta.positions[k]);
      out.values.push_back(delta.values[k]);
    }
  }
  return out;
}

/// Continues training the values of `delta` on its current support only.
/// Uses epochs_finetune and finetune_learning_rate from the config.
template <DiffModel Model>
DiffVector finetune_fixed_mask(const Model& model, std::span<const float> theta, DiffVector delta,
                               const TaskDataset& data, const TrainConfig& cfg, const MetricsSink& sink = {}) {
  cfg.validate();
  delta.validate();
  require(delta.dim == theta.size(), ErrorCode::kDimensionMismatch, "diff dim != parameter dim");
  if (cfg.epochs_finetune == 0 || delta.nnz() == 0) return delta;
  data.validate();
  require(delta.dim <= 0xffffffffULL, ErrorCode::kUnsupportedDimension, "dimension exceeds 32-bit positions");
  const std::vector<std::uint32_t> support(delta.positions.begin(), delta.positions.end());
  const Tensor<float> theta_tensor = Tensor<float>::vector(std::vector<float>(theta.begin(), theta.end()));
  Rng rng(cfg.seed);
  Rng order_rng = rng.fork(3);
  detail::Stopwatch clock;
  detail::Updater opt(cfg.optimizer, cfg.finetune_learning_rate);
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs_finetune; ++epoch) {
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (const std::vector<Example>& batch : detail::epoch_batches(data.train, cfg.batch_size, order_rng)) {
      Graph<float> g;
      Var values = g.leaf(Tensor<float>::vector(delta.values));
      const double loss = detail::guarded_step(step, [&] {
        Var params = g.add(g.constant(theta_tensor), g.scatter(values, support, delta.dim));
        Var risk = empirical_risk(g, model, params, batch);
        g.backward(risk);
        return static_cast<double>(g.value(risk).item());
      });
      std::vector<float> updated = delta.values;
      opt.step(updated, g.grad(values));
      for (std::size_t k = 0; k < updated.size(); ++k) {
        if (updated[k] != 0.0f) delta.values[k] = updated[k];  // support stays fixed
      }
      loss_sum += loss * static_cast<double>(batch.size());
      seen += batch.size();
      ++step;
    }
    if (sink) {
      EpochMetrics m;
      m.stage = "finetune_mask";
      m.epoch = epoch;
      m.train_loss = loss_sum / static_cast<double>(seen);
      m.expected_l0 = static_cast<double>(delta.nnz());
      m.wall_seconds = clock.seconds();
      m.val_accuracy = data.validation.empty() ? 0.0 : diff_accuracy(model, theta, delta, data.validation);
      sink(m);
    }
  }
  return delta;
}

// ---- baselines --------------------------------------------------------------

namespace detail {

/// Dense SGD on the coordinates in `trainable` (all when empty), starting
/// from theta; returns the updated full parameter vector.
template <DiffModel Model>
std::vector<float> train_coordinates(const Model& model, std::span<const float> theta,
                                     const std::vector<std::uint32_t>& trainable, const TaskDataset& data,
                                     const TrainConfig& cfg, const std::string& stage, const MetricsSink& sink) {
  cfg.validate();
  data.validate();
  std::vector<float> params(theta.begin(), theta.end());
  const bool all = trainable.empty();
  Rng rng(cfg.seed);
  Rng order_rng = rng.fork(4);
  Stopwatch clock;
  Updater opt(cfg.optimizer, cfg.learning_rate);
  std::vector<float> trained;
  if (!all) {
    trained.resize(trainable.size());
    for (std::size_t k = 0; k < trainable.size(); ++k) trained[k] = params[trainable[k]];
  }
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs_train; ++epoch) {
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (const std::vector<Example>& batch : epoch_batches(data.train, cfg.batch_size, order_rng)) {
      Graph<float> g;
      Var leaf;
      Var full;
      if (all) {
        leaf = g.leaf(Tensor<float>::vector(params));
        full = leaf;
      } else {
        std::vector<float> frozen = params;
        for (std::uint32_t i : trainable) frozen[i] = 0.0f;
        leaf = g.leaf(Tensor<float>::vector(trained));
        full = g.add(g.constant(Tensor<float>::vector(std::move(frozen))), g.scatter(leaf, trainable, params.size()));
      }
      const double loss = guarded_step(step, [&] {
        Var risk = empirical_risk(g, model, full, batch);
        g.backward(risk);
        return static_cast<double>(g.value(risk).item());
      });
      if (all) {
        opt.step(params, g.grad(leaf));
      } else {
        opt.step(trained, g.grad(leaf));
        for (std::size_t k = 0; k < trainable.size(); ++k) params[trainable[k]] = trained[k];
      }
      loss_sum += loss * static_cast<double>(batch.size());
      seen += batch.size();
      ++step;
    }
    if (sink) {
      EpochMetrics m;
      m.stage = stage;
      m.epoch = epoch;
      m.train_loss = loss_sum / static_cast<double>(seen);
      m.wall_seconds = clock.seconds();
      m.val_accuracy = data.validation.empty() ? 0.0 : accuracy(model, params, data.validation);
      sink(m);
    }
  }
  return params;
}

/// base + d == task when representable; nudges d by a few ulps otherwise.
inline float exact_difference(float task, float base) {
  float d = task - base;
  if (base + d == task) return d;
  float up = d, down = d;
  for (int k = 0; k < 4; ++k) {
    up = std::nextafter(up, std::numeric_limits<float>::infinity());
    down = std::nextafter(down, -std::numeric_limits<float>::infinity());
    if (base + up == task) return up;
    if (base + down == task) return down;
  }
  return d;
}

}  // namespace detail

/// Plain finetuning of every parameter; returns the task parameters.
template <DiffModel Model>
std::vector<float> full_finetune(const Model& model, std::span<const float> theta, const TaskDataset& data,
                                 const TrainConfig& cfg, const MetricsSink& sink = {}) {
  return detail::train_coordinates(model, theta, {}, data, cfg, "full_finetune", sink);
}

/// theta_task - theta as a sparse diff (exact zeros dropped).
inline DiffVector difference(std::span<const float> task, std::span<const float> theta, SpacePtr space) {
  require(task.size() == theta.size(), ErrorCode::kDimensionMismatch, "parameter vectors differ in length");
  std::vector<float> dense(theta.size());
  for (std::size_t i = 0; i < dense.size(); ++i) dense[i] = detail::exact_difference(task[i], theta[i]);
  return DiffVector::from_dense(dense, std::move(space));
}

/// Finetune fully, take the raw difference, project it, then finetune the
/// surviving entries with the mask fixed.
template <DiffModel Model>
DiffVector nonadaptive_diff_prune(const Model& model, std::span<const float> theta, const TaskDataset& data,
                                  const TrainConfig& cfg, const MetricsSink& sink = {}) {
  const std::vector<float> task = full_finetune(model, theta, data, cfg, sink);
  DiffVector delta = project_l0(difference(task, theta, model.space()), cfg.target_sparsity);
  return finetune_fixed_mask(model, theta, std::move(delta), data, cfg, sink);
}

/// Coordinates of the topmost non-head layer plus the head segments.
inline std::vector<std::uint32_t> last_layer_positions(const FlatParamSpace& space) {
  const auto top = space.top_layer();
  std::vector<std::uint32_t> positions;
  for (const Segment& s : space.segments()) {
    if (s.head || (top && s.layer == *top)) {
      for (std::size_t i = s.offset; i < s.end(); ++i) positions.push_back(static_cast<std::uint32_t>(i));
    }
  }
  return positions;
}

/// Finetunes only the penultimate layer and the head.
template <DiffModel Model>
DiffVector last_layer_finetune(const Model& model, std::span<const float> theta, const TaskDataset& data,
                               const TrainConfig& cfg, const MetricsSink& sink = {}) {
  const SpacePtr space = model.space();
  const std::vector<std::uint32_t> positions = last_layer_positions(*space);
  const std::vector<float> task = detail::train_coordinates(model, theta, positions, data, cfg, "last_layer", sink);
  return difference(task, theta, space);
}

// ---- end-to-end -------------------------------------------------------------

struct DiffPruningRun {
  GatedDiff trained;
  DiffVector finalized;
  DiffVector projected;
  DiffVector finetuned;
};

/// Seed of the finalize draw for a run with training seed `seed`.
inline std::uint64_t finalize_seed(std::uint64_t seed) { return splitmix64(seed ^ 0x5eedf1a1ULL); }

/// train_l0 -> finalize -> project_l0 -> finetune_fixed_mask.
template <DiffModel Model>
DiffPruningRun run_diff_pruning(const Model& model, std::span<const float> theta, const TaskDataset& data,
                                const TrainConfig& cfg, bool structured, const DiffInit& init = {},
                                const MetricsSink& sink = {}) {
  DiffInit resolved = init;
  resolved.l = cfg.l;
  resolved.r = cfg.r;
  DiffPruningRun run;
  run.trained = train_l0(model, theta, make_gated_diff(model.space(), structured, resolved), data, cfg, sink);
  run.finalized = finalize(run.trained, finalize_seed(cfg.seed));
  run.projected = project_l0(run.finalized, cfg.target_sparsity);
  run.finetuned = finetune_fixed_mask(model, theta, run.projected, data, cfg, sink);
  return run;
}

}  // namespace diffprune
