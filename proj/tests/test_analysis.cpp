#include <gtest/gtest.h>

#include <sstream>

#include "diffprune/analysis.hpp"
#include "support/fixtures.hpp"

using namespace diffprune;

namespace {

SpacePtr two_layers() {
  auto space = std::make_shared<FlatParamSpace>();
  space->add("a", {4}, 0).add("b", {4}, 1).add("head", {2}, 2, true);
  return space;
}

DiffVector support(const SpacePtr& space, std::vector<std::uint64_t> pos) {
  std::vector<float> dense(space->total_dim(), 0.0f);
  for (auto p : pos) dense[p] = 1.0f;
  return DiffVector::from_dense(dense, space);
}

TEST(LayerReport, Fractions) {
  const SpacePtr space = two_layers();
  const SparsityReport r = per_layer_sparsity(support(space, {0, 1, 2, 5, 8}));
  ASSERT_EQ(r.per_layer.size(), 2u);
  EXPECT_EQ(r.total_nonzero, 4u);  // head entry excluded
  EXPECT_EQ(r.per_layer[0].layer, "layer0");
  EXPECT_DOUBLE_EQ(r.per_layer[0].fraction, 0.75);
  EXPECT_DOUBLE_EQ(r.per_layer[1].fraction, 0.25);

  const SparsityReport one = per_layer_sparsity(support(space, {4, 6}));
  EXPECT_DOUBLE_EQ(one.per_layer[0].fraction, 0.0);
  EXPECT_DOUBLE_EQ(one.per_layer[1].fraction, 1.0);

  EXPECT_TRUE(per_layer_sparsity(support(space, {})).per_layer.empty());
}

TEST(LayerReport, CsvOutput) {
  const SpacePtr space = two_layers();
  std::ostringstream out;
  write_csv(out, per_layer_sparsity(support(space, {0, 1, 2, 5})));
  EXPECT_EQ(out.str(), "layer,nonzero,fraction\nlayer0,3,0.75\nlayer1,1,0.25\n");
}

TEST(ZeroGroups, Examples) {
  auto space = std::make_shared<FlatParamSpace>();
  space->add("g0", {2}, 0).add("g1", {2}, 0);
  const GroupPartition groups = default_grouping(*space);
  EXPECT_DOUBLE_EQ(zero_group_fraction(support(space, {2}), groups), 0.5);
  EXPECT_DOUBLE_EQ(zero_group_fraction(support(space, {}), groups), 1.0);
  EXPECT_DOUBLE_EQ(zero_group_fraction(support(space, {0, 3}), groups), 0.0);
}

TEST(Storage, LargeModelArithmetic) {
  const StorageEstimate sparse = storage_cost(340'000'000, 1'700'000, StorageScheme::kPositionsAndWeights);
  EXPECT_EQ(sparse.bytes, 13'600'000u);
  EXPECT_DOUBLE_EQ(sparse.megabytes(), 13.6);
  const StorageEstimate full = storage_cost(340'000'000, 1'700'000, StorageScheme::kFullWeights);
  EXPECT_EQ(full.bytes, 1'360'000'000u);
  EXPECT_NEAR(full.mebibytes(), 1297.0, 0.05);
  EXPECT_EQ(storage_cost(100, 0, StorageScheme::kPositionsAndWeights).bytes, 0u);
  EXPECT_THROW(storage_cost(1, 2, StorageScheme::kFullWeights), Error);
}

TEST(Spearman, Basics) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 1, 1}, {1, 2, 3}), 0.0);
  // Ties get average ranks: ranks (1.5, 1.5, 3) vs (1, 2, 3).
  EXPECT_NEAR(spearman({5, 5, 9}, {1, 2, 3}), 0.8660254037844386, 1e-12);
  EXPECT_THROW(spearman({1}, {1}), Error);
}

TEST(Spearman, LayerReportsOfTwoSeedsCorrelate) {
  namespace dt = diffprune::testing;
  ModelSpec spec;
  spec.arch = Architecture::kTransformer;
  spec.layers = 3;
  spec.d_model = 8;
  const ToyModel model(spec);
  const SuiteConfig suite = dt::tiny_suite();
  TrainConfig cfg = dt::tiny_train();
  const std::vector<float> theta = full_finetune(model, model.init_params(1), make_task("base", suite), cfg);
  const TaskDataset task = make_task("shift", suite);
  std::vector<std::vector<double>> counts;
  for (std::uint64_t seed : {0, 1}) {
    cfg.seed = seed;
    cfg.target_sparsity = 0.05;
    const DiffPruningRun run = run_diff_pruning(model, theta, task, cfg, false);
    std::vector<double> c;
    for (const auto& l : per_layer_sparsity(run.finetuned).per_layer) c.push_back(static_cast<double>(l.count));
    counts.push_back(c);
  }
  ASSERT_EQ(counts[0].size(), 4u);
  EXPECT_GT(spearman(counts[0], counts[1]), 0.0);
}

TEST(Csv, Quoting) {
  EXPECT_EQ(csv_field("plain"), "plain");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
}

}  // namespace
