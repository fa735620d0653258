// Pretrain a toy MLP on the base task, learn a 0.5% structured diff for one
// derived task, and store it.
#include <cstdio>

#include "diffprune/analysis.hpp"
#include "diffprune/codec.hpp"
#include "diffprune/harness.hpp"

using namespace diffprune;

int main() {
  RunConfig cfg;
  cfg.pretrain.optimizer = OptimizerKind::kAdam;
  cfg.pretrain.learning_rate = 0.01;
  cfg.train.optimizer = OptimizerKind::kAdam;
  cfg.train.lambda = 3e-4;
  cfg.train.alpha_learning_rate = 0.03;
  cfg.train.learning_rate = 0.01;
  cfg.train.finetune_learning_rate = 0.01;
  cfg.train.target_sparsity = 0.005;

  const ToyModel model(cfg.model);
  const Checkpoint base = pretrain(model, make_task("base", cfg.suite), cfg);
  const TaskDataset task = make_task("shift", cfg.suite);

  const DiffPruningRun run = run_diff_pruning(model, base.flat, task, cfg.train, /*structured=*/true, cfg.init);
  const Bytes file = encode(run.finetuned, config_metadata(cfg));
  const StorageEstimate cost = storage_cost(run.finetuned.dim, run.finetuned.nnz(), StorageScheme::kPositionsAndWeights);

  std::printf("base accuracy on shift: %.3f\n", accuracy(model, std::span<const float>(base.flat), task.validation));
  std::printf("diff accuracy on shift: %.3f\n", diff_accuracy(model, base.flat, run.finetuned, task.validation));
  std::printf("stored entries: %zu of %zu (%llu bytes estimated, %zu bytes on disk)\n", run.finetuned.nnz(),
              static_cast<std::size_t>(run.finetuned.dim), static_cast<unsigned long long>(cost.bytes), file.size());
}
