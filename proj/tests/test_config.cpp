#include <gtest/gtest.h>

#include "diffprune/config.hpp"

using namespace diffprune;

namespace {

ErrorCode parse_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "accepted: " << text;
  return ErrorCode::kIo;
}

std::string message_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

TEST(Config, EmptyGivesDefaults) {
  const RunConfig cfg = parse_config("");
  EXPECT_EQ(cfg.train.l, -1.5);
  EXPECT_EQ(cfg.train.r, 1.5);
  EXPECT_EQ(cfg.train.lambda, 1.25e-7);
  EXPECT_EQ(cfg.init.alpha, 5.0f);
  EXPECT_EQ(cfg.init.group_alpha, 5.0f);
  EXPECT_EQ(cfg.init.w, 0.0f);
}

TEST(Config, ParsesKeysCommentsAndLists) {
  const RunConfig cfg = parse_config(
      "# comment\n"
      "lambda = 3e-4\n"
      "\n"
      "optimizer=adam\n"
      "model = transformer\n"
      "sweep_sparsities = 0.001, 0.01\n"
      "sweep_methods = structured,nonadaptive\n"
      "structured = false\n");
  EXPECT_EQ(cfg.train.lambda, 3e-4);
  EXPECT_EQ(cfg.train.optimizer, OptimizerKind::kAdam);
  EXPECT_EQ(cfg.model.arch, Architecture::kTransformer);
  EXPECT_EQ(cfg.sweep.sparsities, (std::vector<double>{0.001, 0.01}));
  EXPECT_EQ(cfg.sweep.methods, (std::vector<std::string>{"structured", "nonadaptive"}));
  EXPECT_FALSE(cfg.structured);
}

TEST(Config, ErrorsNameTheKey) {
  EXPECT_EQ(parse_error("lambda = -1\n"), ErrorCode::kConfig);
  EXPECT_NE(message_of("lambda = -1\n").find("lambda"), std::string::npos);
  EXPECT_EQ(parse_error("bogus = 1\n"), ErrorCode::kConfig);
  EXPECT_NE(message_of("bogus = 1\n").find("bogus"), std::string::npos);
  EXPECT_EQ(parse_error("epochs_train = many\n"), ErrorCode::kConfig);
  EXPECT_EQ(parse_error("r = 0.5\n"), ErrorCode::kConfig);
  EXPECT_EQ(parse_error("target_sparsity = 2\n"), ErrorCode::kConfig);
  EXPECT_EQ(parse_error("just a line\n"), ErrorCode::kConfig);
  EXPECT_EQ(parse_error("optimizer = rmsprop\n"), ErrorCode::kConfig);
}

TEST(Config, ResolvedRoundTrips) {
  RunConfig cfg = parse_config("lambda = 0.1\nalpha_init = 3.3\nseed = 9\nmodel = transformer\nsweep_seeds = 1,2\n");
  std::string text;
  for (const auto& [k, v] : resolved(cfg)) text += k + " = " + v + "\n";
  const RunConfig back = parse_config(text);
  EXPECT_EQ(resolved(back), resolved(cfg));
  EXPECT_EQ(back.init.alpha, cfg.init.alpha);
  EXPECT_EQ(back.train.lambda, 0.1);

  std::map<std::string, std::string> meta;
  for (const auto& [k, v] : resolved(cfg)) meta["cfg." + k] = v;
  meta["unrelated"] = "x";
  EXPECT_EQ(resolved(config_from_metadata(meta)), resolved(cfg));
}

TEST(Config, EveryResolvedKeyIsSettable) {
  RunConfig cfg;
  for (const auto& [k, v] : resolved(cfg)) EXPECT_NO_THROW(apply_setting(cfg, k, v)) << k;
}

TEST(Config, OverlayKeepsEarlierSettings) {
  RunConfig cfg = parse_config("lambda = 0.5\n");
  apply_config_text(cfg, "seed = 4\n");
  EXPECT_EQ(cfg.train.lambda, 0.5);
  EXPECT_EQ(cfg.train.seed, 4u);
}

TEST(Config, MissingFileIsIoError) {
  try {
    load_config("/nonexistent/diffprune.cfg");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIo);
  }
}

}  // namespace
