#include <gtest/gtest.h>

#include "diffprune/param_space.hpp"

using namespace diffprune;

namespace {

TEST(ParamSpace, SegmentsTileTheFlatVector) {
  FlatParamSpace space;
  space.add("a", {2, 3}, 0).add("b", {4}, 1).add("head", {2}, 2, true);
  EXPECT_EQ(space.total_dim(), 12u);
  EXPECT_EQ(space.nonhead_dim(), 10u);
  EXPECT_EQ(space.segments()[1].offset, 6u);
  EXPECT_EQ(space.segment_index(0), 0u);
  EXPECT_EQ(space.segment_index(5), 0u);
  EXPECT_EQ(space.segment_index(6), 1u);
  EXPECT_EQ(space.segment_index(11), 2u);
  EXPECT_TRUE(space.is_head(10));
  EXPECT_FALSE(space.is_head(9));
  EXPECT_EQ(space.top_layer(), std::optional<std::uint16_t>(1));
  const std::vector<float> mask = space.gate_mask();
  EXPECT_EQ(mask[9], 1.0f);
  EXPECT_EQ(mask[10], 0.0f);
}

TEST(ParamSpace, Rejections) {
  FlatParamSpace space;
  space.add("a", {2}, 0);
  EXPECT_THROW(space.add("a", {3}, 0), Error);
  EXPECT_THROW(space.add("empty", {0}, 0), Error);
  EXPECT_THROW(space.segment_index(2), Error);
  Segment gap{"x", 1, 2, {2}, 0, false};
  try {
    FlatParamSpace::from_segments({gap});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kSegmentMismatch);
  }
}

TEST(ParamSpace, FromSegmentsRoundTrip) {
  FlatParamSpace space;
  space.add("a", {2, 3}, 0).add("head", {2}, 1, true);
  EXPECT_EQ(FlatParamSpace::from_segments(space.segments()), space);
}

TEST(ParamSpace, AllHeadSpaceHasNoTopLayer) {
  FlatParamSpace space;
  space.add("head", {3}, 0, true);
  EXPECT_FALSE(space.top_layer().has_value());
  EXPECT_EQ(space.nonhead_dim(), 0u);
}

}  // namespace
