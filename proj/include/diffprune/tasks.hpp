#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "diffprune/data.hpp"
#include "diffprune/error.hpp"
#include "diffprune/rng.hpp"

namespace diffprune {

/// Synthetic sequence-classification suite.
///
/// Every class owns a small set of signature tokens; a sequence of class c
/// mixes signature tokens of c with background tokens. The base task uses
/// the signatures {2c, 2c+1}. Derived tasks reuse the same token space but
/// relabel, subset, or move signature tokens, so each one needs only a
/// localized change to a model pretrained on the base task.
struct SuiteConfig {
  std::size_t vocab = 64;
  std::size_t seq_len = 16;
  std::size_t classes = 8;
  std::size_t n_train = 2048;
  std::size_t n_validation = 512;
  double signal_rate = 0.3;
  std::uint64_t seed = 7;
};

inline const std::vector<std::string>& derived_task_names() {
  static const std::vector<std::string> names{"relabel", "shift", "swap", "subset"};
  return names;
}

namespace detail {

struct TaskRecipe {
  std::vector<std::vector<std::uint32_t>> signatures;  // per generating class
  std::vector<std::uint32_t> labels;                   // label of each generating class
  std::vector<std::uint32_t> active;                   // generating classes in use
};

inline TaskRecipe recipe_for(const std::string& name, const SuiteConfig& cfg) {
  const auto c_count = static_cast<std::uint32_t>(cfg.classes);
  require(cfg.vocab >= 4 * cfg.classes, ErrorCode::kInvalidArgument,
          "vocabulary too small for the task suite (need >= 4 tokens per class)");
  TaskRecipe recipe;
  for (std::uint32_t c = 0; c < c_count; ++c) {
    recipe.signatures.push_back({2 * c, 2 * c + 1});
    recipe.labels.push_back(c);
    recipe.active.push_back(c);
  }
  if (name == "base") return recipe;
  if (name == "relabel") {
    for (std::uint32_t c = 0; c < c_count; ++c) recipe.labels[c] = (c + 3) % c_count;
  } else if (name == "shift") {
    // both signature tokens move onto tokens that were background noise
    for (std::uint32_t c = 0; c < c_count; ++c) recipe.signatures[c] = {2 * c_count + 2 * c, 2 * c_count + 2 * c + 1};
  } else if (name == "swap") {
    // second signature token is borrowed from the next class
    for (std::uint32_t c = 0; c < c_count; ++c) recipe.signatures[c][1] = 2 * ((c + 1) % c_count) + 1;
  } else if (name == "subset") {
    recipe.active.resize(c_count / 2);
  } else {
    fail(ErrorCode::kInvalidArgument, "unknown task '" + name + "'");
  }
  return recipe;
}

inline Example make_example(const TaskRecipe& recipe, std::uint32_t cls, const std::vector<std::uint32_t>& noise,
                            const SuiteConfig& cfg, Rng& rng) {
  Example ex;
  ex.label = recipe.labels[cls];
  ex.tokens.resize(cfg.seq_len);
  const auto& sig = recipe.signatures[cls];
  for (auto& tok : ex.tokens) {
    if (rng.uniform() < cfg.signal_rate) {
      tok = sig[rng.below(sig.size())];
    } else {
      tok = noise[rng.below(noise.size())];
    }
  }
  return ex;
}

}  // namespace detail

/// Generates one task of the suite; deterministic in (name, cfg).
inline TaskDataset make_task(const std::string& name, const SuiteConfig& cfg) {
  const detail::TaskRecipe recipe = detail::recipe_for(name, cfg);
  std::vector<bool> is_signature(cfg.vocab, false);
  for (std::uint32_t c : recipe.active)
    for (std::uint32_t t : recipe.signatures[c]) is_signature[t] = true;
  std::vector<std::uint32_t> noise;
  for (std::uint32_t t = 2 * static_cast<std::uint32_t>(cfg.classes); t < cfg.vocab; ++t)
    if (!is_signature[t]) noise.push_back(t);

  std::uint64_t key = cfg.seed;
  for (char ch : name) key = splitmix64(key ^ static_cast<unsigned char>(ch));
  Rng rng(key);

  TaskDataset task;
  task.name = name;
  task.classes = cfg.classes;
  auto fill = [&](std::vector<Example>& split, std::size_t n) {
    split.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      // balanced: cycle through active classes, order shuffled by training
      const std::uint32_t cls = recipe.active[k % recipe.active.size()];
      split.push_back(detail::make_example(recipe, cls, noise, cfg, rng));
    }
  };
  fill(task.train, cfg.n_train);
  fill(task.validation, cfg.n_validation);
  task.validate();
  return task;
}

}  // namespace diffprune
