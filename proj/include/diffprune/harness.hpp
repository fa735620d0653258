#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "diffprune/analysis.hpp"
#include "diffprune/codec.hpp"
#include "diffprune/config.hpp"
#include "diffprune/diff.hpp"
#include "diffprune/model.hpp"
#include "diffprune/pipeline.hpp"
#include "diffprune/tasks.hpp"

namespace diffprune {

inline Metadata config_metadata(const RunConfig& cfg) {
  Metadata meta;
  for (const auto& [k, v] : resolved(cfg)) meta["cfg." + k] = v;
  return meta;
}

/// Training settings used for pretraining on the base task.
inline TrainConfig pretrain_settings(const RunConfig& cfg) {
  TrainConfig t = cfg.train;
  t.epochs_train = cfg.pretrain.epochs;
  t.learning_rate = cfg.pretrain.learning_rate;
  t.optimizer = cfg.pretrain.optimizer;
  t.batch_size = cfg.pretrain.batch_size;
  t.seed = cfg.pretrain.seed;
  return t;
}

/// Supervised training of a fresh model on the base task, packaged as a
/// checkpoint that embeds the resolved config.
inline Checkpoint pretrain(const ToyModel& model, const TaskDataset& base, const RunConfig& cfg,
                           const MetricsSink& sink = {}) {
  const std::vector<float> init = model.init_params(cfg.pretrain.seed);
  Checkpoint ckpt;
  ckpt.space = *model.space();
  ckpt.flat = full_finetune(model, init, base, pretrain_settings(cfg), sink);
  ckpt.metadata = config_metadata(cfg);
  ckpt.metadata["kind"] = "checkpoint";
  ckpt.metadata["task"] = base.name;
  return ckpt;
}

/// Rebuilds the model a checkpoint was trained for and checks that its
/// tensor table matches.
inline ToyModel model_for(const Checkpoint& ckpt) {
  const RunConfig cfg = config_from_metadata(ckpt.metadata);
  ToyModel model(cfg.model);
  const auto& expected = model.space()->segments();
  const auto& actual = ckpt.space.segments();
  require(expected.size() == actual.size(), ErrorCode::kSegmentMismatch,
          "checkpoint tensor table does not match its recorded model");
  for (std::size_t k = 0; k < expected.size(); ++k) {
    require(expected[k] == actual[k], ErrorCode::kSegmentMismatch,
            "checkpoint tensor '" + actual[k].name + "' does not match the recorded model");
  }
  return model;
}

// ---- methods ----------------------------------------------------------------

enum class Method { kStructured, kUnstructured, kNonAdaptive, kFull, kLastLayer };

inline Method parse_method(const std::string& name) {
  if (name == "structured") return Method::kStructured;
  if (name == "unstructured") return Method::kUnstructured;
  if (name == "nonadaptive" || name == "non-adaptive") return Method::kNonAdaptive;
  if (name == "full") return Method::kFull;
  if (name == "last-layer" || name == "lastlayer") return Method::kLastLayer;
  fail(ErrorCode::kInvalidArgument, "unknown method '" + name + "'");
}

inline std::string method_name(Method m) {
  switch (m) {
    case Method::kStructured: return "structured";
    case Method::kUnstructured: return "unstructured";
    case Method::kNonAdaptive: return "nonadaptive";
    case Method::kFull: return "full";
    case Method::kLastLayer: return "last-layer";
  }
  return "?";
}

struct MethodResult {
  DiffVector delta;                  // final diff
  std::optional<DiffVector> before_finetune;  // projected diff before fixed-mask finetuning
  std::optional<GatedDiff> trained;
};

/// Runs one method end to end and returns its task diff.
template <DiffModel Model>
MethodResult run_method(Method method, const Model& model, std::span<const float> theta, const TaskDataset& task,
                        const TrainConfig& cfg, const DiffInit& init = {}, const MetricsSink& sink = {}) {
  MethodResult out;
  switch (method) {
    case Method::kStructured:
    case Method::kUnstructured: {
      DiffPruningRun run = run_diff_pruning(model, theta, task, cfg, method == Method::kStructured, init, sink);
      out.delta = std::move(run.finetuned);
      out.before_finetune = std::move(run.projected);
      out.trained = std::move(run.trained);
      break;
    }
    case Method::kNonAdaptive: {
      const std::vector<float> tuned = full_finetune(model, theta, task, cfg, sink);
      DiffVector projected = project_l0(difference(tuned, theta, model.space()), cfg.target_sparsity);
      out.delta = finetune_fixed_mask(model, theta, projected, task, cfg, sink);
      out.before_finetune = std::move(projected);
      break;
    }
    case Method::kFull:
      out.delta = difference(full_finetune(model, theta, task, cfg, sink), theta, model.space());
      break;
    case Method::kLastLayer:
      out.delta = last_layer_finetune(model, theta, task, cfg, sink);
      break;
  }
  return out;
}

// ---- sweep ------------------------------------------------------------------

struct SweepRow {
  std::string task;
  double target = 0.0;
  std::string method;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  std::size_t nonzero = 0;  // non-head entries
  double zero_group_fraction = 0.0;
};

inline std::size_t nonhead_nnz(const DiffVector& delta) {
  std::size_t n = 0;
  for (std::uint64_t p : delta.positions)
    if (!delta.space->is_head(p)) ++n;
  return n;
}

/// Accuracy of every (task, t, method, seed) cell. Cells are independent and
/// run on `threads` workers; row order is fixed regardless of scheduling.
template <DiffModel Model>
std::vector<SweepRow> sparsity_sweep(const Model& model, std::span<const float> theta,
                                     const std::vector<TaskDataset>& tasks, const RunConfig& cfg,
                                     unsigned threads = 1) {
  struct Cell {
    std::size_t task;
    double t;
    Method method;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (std::size_t k = 0; k < tasks.size(); ++k)
    for (double t : cfg.sweep.sparsities)
      for (const std::string& m : cfg.sweep.methods)
        for (std::uint64_t seed : cfg.sweep.seeds) cells.push_back({k, t, parse_method(m), seed});

  std::vector<SweepRow> rows(cells.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const GroupPartition groups = default_grouping(*model.space());
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const Cell& c = cells[i];
      try {
        TrainConfig tc = cfg.train;
        tc.target_sparsity = c.t;
        tc.seed = c.seed;
        const MethodResult result = run_method(c.method, model, theta, tasks[c.task], tc, cfg.init);
        SweepRow& row = rows[i];
        row.task = tasks[c.task].name;
        row.target = c.t;
        row.method = method_name(c.method);
        row.seed = c.seed;
        row.accuracy = diff_accuracy(model, theta, result.delta, tasks[c.task].validation);
        row.nonzero = nonhead_nnz(result.delta);
        row.zero_group_fraction = zero_group_fraction(result.delta, groups);
      } catch (const std::exception& e) {
        std::lock_guard lock(failure_mutex);
        if (!failure) {
          failure = std::make_exception_ptr(Error(ErrorCode::kInvalidArgument,
                                                  "sweep cell (t=" + detail::format_double(c.t) + ", method=" +
                                                      method_name(c.method) + "): " + e.what()));
        }
      }
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(cells.size())));
  std::vector<std::thread> pool;
  for (unsigned k = 1; k < n_threads; ++k) pool.emplace_back(worker);
  worker();
  for (std::thread& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  return rows;
}

inline void write_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  std::vector<std::vector<std::string>> table;
  for (const SweepRow& r : rows) {
    table.push_back({r.task, csv_number(r.target), r.method, std::to_string(r.seed), csv_number(r.accuracy),
                     std::to_string(r.nonzero), csv_number(r.zero_group_fraction)});
  }
  write_csv(out, {"task", "t", "method", "seed", "accuracy", "nonzero", "zero_group_fraction"}, table);
}

}  // namespace diffprune
