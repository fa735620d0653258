#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "diffprune/error.hpp"

namespace diffprune {

struct Example {
  std::vector<std::uint32_t> tokens;
  std::uint32_t label = 0;
};

using Batch = std::span<const Example>;

/// Labeled token-sequence task with fixed train/validation splits.
struct TaskDataset {
  std::string name;
  std::size_t classes = 0;
  std::vector<Example> train;
  std::vector<Example> validation;

  void validate() const {
    require(!train.empty(), ErrorCode::kInvalidArgument, "task '" + name + "' has no training examples");
    for (const auto* split : {&train, &validation})
      for (const Example& e : *split)
        require(e.label < classes, ErrorCode::kInvalidArgument,
                "task '" + name + "' has label " + std::to_string(e.label) + " >= " + std::to_string(classes));
  }
};

inline std::vector<std::uint32_t> labels_of(Batch batch) {
  std::vector<std::uint32_t> labels;
  labels.reserve(batch.size());
  for (const Example& e : batch) labels.push_back(e.label);
  return labels;
}

}  // namespace diffprune
