#include <gtest/gtest.h>

#include <cmath>

#include "diffprune/diff.hpp"
#include "support/fixtures.hpp"

using namespace diffprune;
using diffprune::testing::small_space;

namespace {

SpacePtr plain_space(std::size_t d) {
  auto space = std::make_shared<FlatParamSpace>();
  space->add("x", {d}, 0);
  return space;
}

DiffVector sparse(std::size_t dim, std::vector<std::uint64_t> pos, std::vector<float> val) {
  DiffVector d;
  d.dim = dim;
  d.positions = std::move(pos);
  d.values = std::move(val);
  return d;
}

TEST(Compose, Examples) {
  const std::vector<float> theta{1, 2, 3};
  EXPECT_EQ(compose(theta, sparse(3, {1}, {-0.5f})), (std::vector<float>{1.0f, 1.5f, 3.0f}));
  EXPECT_EQ(compose(theta, sparse(3, {}, {})), theta);
  const std::vector<float> zero(8, 0.0f);
  const std::vector<float> out = compose(zero, sparse(8, {0, 5}, {0.25f, -2.0f}));
  EXPECT_EQ(DiffVector::from_dense(out, nullptr).positions, (std::vector<std::uint64_t>{0, 5}));
  EXPECT_THROW(compose(theta, sparse(4, {}, {})), Error);
}

TEST(Compose, DoesNotMutateTheta) {
  const std::vector<float> theta{1, 2};
  const std::vector<float> copy = theta;
  (void)compose(theta, sparse(2, {0}, {3.0f}));
  EXPECT_EQ(theta, copy);
}

TEST(DiffVector, ValidateRejectsBadInvariants) {
  EXPECT_THROW(sparse(4, {2, 1}, {1.0f, 1.0f}).validate(), Error);
  EXPECT_THROW(sparse(4, {1}, {0.0f}).validate(), Error);
  EXPECT_THROW(sparse(4, {4}, {1.0f}).validate(), Error);
  EXPECT_THROW(sparse(4, {1}, {std::nanf("")}).validate(), Error);
  EXPECT_NO_THROW(sparse(4, {0, 3}, {1.0f, -1.0f}).validate());
}

TEST(TrainDelta, SaturatedGatesPassW) {
  const SpacePtr space = small_space();
  DiffInit init;
  init.alpha = 20.0f;
  GatedDiff diff = make_gated_diff(space, false, init);
  for (std::size_t i = 0; i < diff.w.size(); ++i) diff.w[i] = 0.1f * static_cast<float>(i + 1);
  Rng rng(1);
  Graph<double> g;
  const DiffLeaves leaves = bind_leaves(g, diff);
  const std::vector<double> delta = g.value(train_delta(g, diff, leaves, draw_uniform(rng, diff.noise_size()))).data;
  for (std::size_t i = 0; i < delta.size(); ++i) EXPECT_DOUBLE_EQ(delta[i], static_cast<double>(diff.w[i]));
}

TEST(TrainDelta, ClosedGroupZerosItsMembers) {
  const SpacePtr space = small_space();
  DiffInit init;
  init.alpha = 20.0f;
  GatedDiff diff = make_gated_diff(space, true, init);
  diff.w.assign(diff.w.size(), 1.0f);
  diff.structure->group_alpha[1] = -20.0f;  // layer0.bias
  Rng rng(2);
  Graph<double> g;
  const DiffLeaves leaves = bind_leaves(g, diff);
  const std::vector<double> delta = g.value(train_delta(g, diff, leaves, draw_uniform(rng, diff.noise_size()))).data;
  const Segment bias = *space->find("layer0.bias");
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const bool in_group = i >= bias.offset && i < bias.end();
    EXPECT_EQ(delta[i], in_group ? 0.0 : 1.0) << i;
  }
}

TEST(TrainDelta, ProductOfGates) {
  // z = 0.5 needs s_bar = 0.5, i.e. s = 2/3, i.e. logit(u) + alpha = log 2.
  auto space = std::make_shared<FlatParamSpace>();
  space->add("x", {1}, 0);
  GatedDiff diff = make_gated_diff(space, true);
  diff.gate.alpha = {0.0f};
  diff.structure->group_alpha = {0.0f};
  diff.w = {0.8f};
  const float u = 2.0f / 3.0f;
  const std::vector<float> noise{u, u};
  Graph<double> g;
  const DiffLeaves leaves = bind_leaves(g, diff);
  EXPECT_NEAR(g.value(train_delta(g, diff, leaves, noise)).data[0], 0.2, 1e-6);
}

TEST(ExpectedL0Total, Examples) {
  GatedDiff flat = make_gated_diff(plain_space(4), false);
  flat.gate.alpha.assign(4, 0.0f);
  EXPECT_DOUBLE_EQ(expected_l0_total(flat), 2.0);

  auto two = std::make_shared<FlatParamSpace>();
  two->add("a", {2}, 0).add("b", {2}, 0);
  GatedDiff grouped = make_gated_diff(two, true);
  grouped.gate.alpha.assign(4, 0.0f);
  grouped.structure->group_alpha = {0.0f, 0.0f};
  EXPECT_DOUBLE_EQ(expected_l0_total(grouped), 1.0);

  grouped.structure->group_alpha = {-20.0f, 0.0f};
  const double sig20 = 1.0 / (1.0 + std::exp(20.0));
  EXPECT_NEAR(expected_l0_total(grouped) - 0.5, 2 * 0.5 * sig20, 1e-15);
  EXPECT_LT(0.5 * sig20, 1e-8);
}

TEST(ExpectedL0Total, HeadsExcludedAndGraphAgrees) {
  GatedDiff diff = make_gated_diff(small_space(), true);
  Rng rng(4);
  for (float& a : diff.gate.alpha) a = static_cast<float>(rng.uniform(-3, 3));
  for (float& a : diff.structure->group_alpha) a = static_cast<float>(rng.uniform(-3, 3));
  Graph<double> g;
  const DiffLeaves leaves = bind_leaves(g, diff);
  EXPECT_NEAR(g.value(expected_l0_total(g, diff, leaves)).item(), expected_l0_total(diff), 1e-12);
  // Changing a head alpha does not change the penalty.
  const double before = expected_l0_total(diff);
  diff.gate.alpha.back() += 3.0f;
  EXPECT_DOUBLE_EQ(expected_l0_total(diff), before);
}

TEST(Grouping, OneGroupPerNonHeadSegment) {
  auto six = std::make_shared<FlatParamSpace>();
  for (int k = 0; k < 6; ++k) six->add("s" + std::to_string(k), {3}, static_cast<std::uint16_t>(k));
  six->add("head", {2}, 6, true);
  EXPECT_EQ(default_grouping(*six).size(), 6u);
  EXPECT_EQ(default_grouping(*plain_space(5)).size(), 1u);
  EXPECT_NO_THROW(default_grouping(*six).validate(*six));
  const auto owner = default_grouping(*six).group_of(*six);
  EXPECT_EQ(owner.back(), GroupPartition::kNoGroup);
}

TEST(Grouping, ValidateRejectsBadPartitions) {
  const SpacePtr space = small_space();
  GroupPartition part = default_grouping(*space);
  part.groups[0].push_back({6, 7});  // overlaps group 1
  EXPECT_THROW(part.validate(*space), Error);
  GroupPartition heads = default_grouping(*space);
  heads.groups[0].push_back({12, 13});  // head coordinate
  EXPECT_THROW(heads.validate(*space), Error);
  GroupPartition missing = default_grouping(*space);
  missing.groups.pop_back();
  missing.group_alpha.pop_back();
  EXPECT_THROW(missing.validate(*space), Error);
}

TEST(GatedDiff, DefaultInitialization) {
  const GatedDiff diff = make_gated_diff(small_space(), true);
  for (float a : diff.gate.alpha) EXPECT_EQ(a, 5.0f);
  for (float a : diff.structure->group_alpha) EXPECT_EQ(a, 5.0f);
  for (float w : diff.w) EXPECT_EQ(w, 0.0f);
  EXPECT_EQ(diff.gate.l, -1.5);
  EXPECT_EQ(diff.gate.r, 1.5);
  EXPECT_EQ(diff.noise_size(), diff.dim() + 3);
}

}  // namespace
