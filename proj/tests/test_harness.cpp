#include <gtest/gtest.h>

#include <sstream>

#include "diffprune/harness.hpp"
#include "support/fixtures.hpp"

using namespace diffprune;
namespace dt = diffprune::testing;

namespace {

RunConfig tiny_run() {
  RunConfig cfg;
  cfg.model = dt::tiny_mlp();
  cfg.suite = dt::tiny_suite();
  cfg.train = dt::tiny_train();
  cfg.pretrain.optimizer = OptimizerKind::kAdam;
  cfg.pretrain.learning_rate = 0.01;
  cfg.pretrain.epochs = 4;
  return cfg;
}

TEST(Pretrain, BeatsMajorityBaselineAndIsDeterministic) {
  const RunConfig cfg = tiny_run();
  const ToyModel model(cfg.model);
  const TaskDataset base = make_task("base", cfg.suite);
  const Checkpoint a = pretrain(model, base, cfg);
  const Checkpoint b = pretrain(model, base, cfg);
  EXPECT_EQ(encode_checkpoint(a), encode_checkpoint(b));
  EXPECT_EQ(decode_checkpoint(encode_checkpoint(a)).flat.size(), model.space()->total_dim());
  // Classes are balanced, so the majority baseline is 1/8.
  EXPECT_GT(accuracy(model, std::span<const float>(a.flat), base.validation), 1.0 / 8 + 0.10);
}

TEST(Pretrain, CheckpointEmbedsResolvedConfig) {
  const RunConfig cfg = tiny_run();
  const Checkpoint ckpt = pretrain(ToyModel(cfg.model), make_task("base", cfg.suite), cfg);
  for (const auto& [k, v] : resolved(cfg)) EXPECT_EQ(ckpt.metadata.at("cfg." + k), v) << k;
  EXPECT_EQ(model_for(ckpt).space()->total_dim(), ckpt.flat.size());
  Checkpoint tampered = ckpt;
  tampered.metadata["cfg.width"] = "17";
  EXPECT_THROW(model_for(tampered), Error);
}

TEST(Methods, NamesRoundTrip) {
  for (Method m : {Method::kStructured, Method::kUnstructured, Method::kNonAdaptive, Method::kFull, Method::kLastLayer})
    EXPECT_EQ(parse_method(method_name(m)), m);
  EXPECT_THROW(parse_method("magic"), Error);
}

TEST(Sweep, RowCountOrderAndThreadIndependence) {
  RunConfig cfg = tiny_run();
  cfg.train.epochs_train = 1;
  cfg.train.epochs_finetune = 1;
  cfg.sweep.sparsities = {0.001, 0.0025, 0.005, 0.01};
  cfg.sweep.methods = {"structured", "nonadaptive"};
  const auto& pre = dt::Pretrained::get();
  const std::vector<TaskDataset> tasks{make_task("shift", cfg.suite)};
  const std::vector<SweepRow> one = sparsity_sweep(pre.model, pre.theta, tasks, cfg, 1);
  const std::vector<SweepRow> three = sparsity_sweep(pre.model, pre.theta, tasks, cfg, 3);
  ASSERT_EQ(one.size(), 4u * 2u);
  std::ostringstream a, b;
  write_csv(a, one);
  write_csv(b, three);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(one[0].method, "structured");
  EXPECT_EQ(one[1].method, "nonadaptive");
  for (const SweepRow& r : one) EXPECT_LE(r.nonzero, sparsity_budget(r.target, pre.model.space()->nonhead_dim()));
  EXPECT_EQ(a.str().substr(0, a.str().find('\n')), "task,t,method,seed,accuracy,nonzero,zero_group_fraction");
}

TEST(Sweep, FullBudgetNonAdaptiveMatchesFullFinetuning) {
  RunConfig cfg = tiny_run();
  cfg.train.epochs_finetune = 0;
  cfg.sweep.sparsities = {1.0};
  cfg.sweep.methods = {"nonadaptive", "full"};
  const auto& pre = dt::Pretrained::get();
  const std::vector<SweepRow> rows =
      sparsity_sweep(pre.model, pre.theta, {make_task("swap", cfg.suite)}, cfg);
  EXPECT_EQ(rows[0].accuracy, rows[1].accuracy);
}

TEST(Sweep, FailuresPropagate) {
  RunConfig cfg = tiny_run();
  cfg.sweep.methods = {"bogus"};
  const auto& pre = dt::Pretrained::get();
  EXPECT_THROW(sparsity_sweep(pre.model, pre.theta, {make_task("swap", cfg.suite)}, cfg), Error);
}

}  // namespace
