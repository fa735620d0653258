#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "diffprune/error.hpp"
#include "diffprune/gates.hpp"
#include "diffprune/param_space.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune {

using SpacePtr = std::shared_ptr<const FlatParamSpace>;

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

/// Partition of the non-head coordinates into groups, each sharing one
/// extra scalar gate. A group is a union of index ranges.
struct GroupPartition {
  std::vector<std::vector<IndexRange>> groups;
  std::vector<float> group_alpha;

  std::size_t size() const { return groups.size(); }

  /// Group id for every flat position; heads map to kNoGroup.
  static constexpr std::uint32_t kNoGroup = 0xffffffffu;
  std::vector<std::uint32_t> group_of(const FlatParamSpace& space) const {
    std::vector<std::uint32_t> owner(space.total_dim(), kNoGroup);
    for (std::size_t j = 0; j < groups.size(); ++j) {
      for (const IndexRange& range : groups[j]) {
        require(range.begin < range.end && range.end <= space.total_dim(), ErrorCode::kInvalidArgument,
                "group " + std::to_string(j) + " has an invalid index range");
        for (std::size_t i = range.begin; i < range.end; ++i) {
          require(owner[i] == kNoGroup, ErrorCode::kInvalidArgument,
                  "index " + std::to_string(i) + " belongs to more than one group");
          owner[i] = static_cast<std::uint32_t>(j);
        }
      }
    }
    return owner;
  }

  void validate(const FlatParamSpace& space) const {
    require(!groups.empty(), ErrorCode::kInvalidArgument, "group partition is empty");
    require(group_alpha.size() == groups.size(), ErrorCode::kDimensionMismatch,
            "group alpha count does not match group count");
    for (std::size_t j = 0; j < groups.size(); ++j) {
      std::size_t n = 0;
      for (const IndexRange& r : groups[j]) n += r.size();
      require(n > 0, ErrorCode::kInvalidArgument, "group " + std::to_string(j) + " is empty");
    }
    const std::vector<std::uint32_t> owner = group_of(space);
    for (const Segment& s : space.segments()) {
      for (std::size_t i = s.offset; i < s.end(); ++i) {
        if (s.head) {
          require(owner[i] == kNoGroup, ErrorCode::kInvalidArgument,
                  "head index " + std::to_string(i) + " is assigned to a group");
        } else {
          require(owner[i] != kNoGroup, ErrorCode::kInvalidArgument,
                  "index " + std::to_string(i) + " has no group assignment");
        }
      }
    }
  }
};

/// Trainable diff state: dense magnitudes w, per-coordinate gate locations,
/// and optionally per-group gates.
struct GatedDiff {
  SpacePtr space;
  std::vector<float> w;
  GateParams gate;
  std::optional<GroupPartition> structure;

  std::size_t dim() const { return w.size(); }
  bool structured() const { return structure.has_value(); }

  void validate() const {
    require(space != nullptr, ErrorCode::kInvalidArgument, "gated diff has no parameter space");
    require(w.size() == space->total_dim() && gate.alpha.size() == w.size(), ErrorCode::kDimensionMismatch,
            "gated diff arrays do not match the parameter space dimension");
    gate.validate();
    if (structure) structure->validate(*space);
  }

  /// Number of noise draws a training step needs: one per coordinate plus one
  /// per group.
  std::size_t noise_size() const { return dim() + (structure ? structure->size() : 0); }
};

/// Finalized sparse diff: strictly increasing positions, no stored zeros.
struct DiffVector {
  std::size_t dim = 0;
  std::vector<std::uint64_t> positions;
  std::vector<float> values;
  SpacePtr space;

  std::size_t nnz() const { return positions.size(); }

  void validate() const {
    require(positions.size() == values.size(), ErrorCode::kDimensionMismatch,
            "diff has mismatched position/value counts");
    for (std::size_t k = 0; k < positions.size(); ++k) {
      require(positions[k] < dim, ErrorCode::kDimensionMismatch, "diff position out of range");
      require(k == 0 || positions[k - 1] < positions[k], ErrorCode::kUnsortedPositions,
              "diff positions are not strictly increasing");
      require(values[k] != 0.0f, ErrorCode::kInvalidArgument, "diff stores an explicit zero");
      require(std::isfinite(values[k]), ErrorCode::kNonFinite, "diff value is not finite");
    }
    if (space) require(space->total_dim() == dim, ErrorCode::kDimensionMismatch, "diff dim != space dim");
  }

  /// Sparse view of a dense vector, dropping exact zeros.
  static DiffVector from_dense(std::span<const float> dense, SpacePtr space) {
    DiffVector out;
    out.dim = dense.size();
    out.space = std::move(space);
    for (std::size_t i = 0; i < dense.size(); ++i) {
      if (dense[i] != 0.0f) {
        out.positions.push_back(i);
        out.values.push_back(dense[i]);
      }
    }
    return out;
  }

  std::vector<float> to_dense() const {
    std::vector<float> dense(dim, 0.0f);
    for (std::size_t k = 0; k < positions.size(); ++k) dense[positions[k]] = values[k];
    return dense;
  }

  bool operator==(const DiffVector& other) const {
    return dim == other.dim && positions == other.positions && values == other.values;
  }
};

/// theta + delta; theta is left untouched.
inline std::vector<float> compose(std::span<const float> theta, const DiffVector& delta) {
  require(delta.dim == theta.size(), ErrorCode::kDimensionMismatch,
          "diff dim " + std::to_string(delta.dim) + " != parameter dim " + std::to_string(theta.size()));
  std::vector<float> out(theta.begin(), theta.end());
  for (std::size_t k = 0; k < delta.positions.size(); ++k) out[delta.positions[k]] += delta.values[k];
  return out;
}

/// One group per non-head segment: every weight matrix and every bias vector
/// gets its own group gate.
inline GroupPartition default_grouping(const FlatParamSpace& space, float group_alpha_init = 5.0f) {
  GroupPartition partition;
  for (const Segment& s : space.segments()) {
    if (s.head) continue;
    partition.groups.push_back({IndexRange{s.offset, s.end()}});
  }
  partition.group_alpha.assign(partition.groups.size(), group_alpha_init);
  return partition;
}

struct DiffInit {
  float alpha = 5.0f;
  float group_alpha = 5.0f;
  float w = 0.0f;
  double l = -1.5;
  double r = 1.5;
};

inline GatedDiff make_gated_diff(SpacePtr space, bool structured, const DiffInit& init = {}) {
  GatedDiff diff;
  const std::size_t d = space->total_dim();
  diff.w.assign(d, init.w);
  diff.gate.alpha.assign(d, init.alpha);
  diff.gate.l = init.l;
  diff.gate.r = init.r;
  if (structured) diff.structure = default_grouping(*space, init.group_alpha);
  diff.space = std::move(space);
  diff.validate();
  return diff;
}

/// Graph leaves for the trainable parts of a GatedDiff.
struct DiffLeaves {
  Var alpha;
  Var w;
  Var group_alpha;  // invalid when unstructured
};

template <std::floating_point T>
DiffLeaves bind_leaves(Graph<T>& graph, const GatedDiff& diff) {
  auto to_t = [](const std::vector<float>& v) { return Tensor<T>::vector(std::vector<T>(v.begin(), v.end())); };
  DiffLeaves leaves;
  leaves.alpha = graph.leaf(to_t(diff.gate.alpha));
  leaves.w = graph.leaf(to_t(diff.w));
  if (diff.structure) leaves.group_alpha = graph.leaf(to_t(diff.structure->group_alpha));
  return leaves;
}

namespace detail {

inline std::vector<std::uint32_t> group_index_or_zero(const GatedDiff& diff) {
  std::vector<std::uint32_t> owner = diff.structure->group_of(*diff.space);
  for (std::uint32_t& o : owner)
    if (o == GroupPartition::kNoGroup) o = 0;
  return owner;
}

template <std::floating_point T>
Tensor<T> mask_tensor(const std::vector<float>& mask) {
  return Tensor<T>::vector(std::vector<T>(mask.begin(), mask.end()));
}

}  // namespace detail

/// Differentiable training-time diff:
///   unstructured  delta_i = z_i * w_i
///   structured    delta_i = z_i * z^{g(i)} * w_i
/// Head coordinates pass w through ungated. `u` holds dim() draws followed by
/// one draw per group.
template <std::floating_point T>
Var train_delta(Graph<T>& graph, const GatedDiff& diff, const DiffLeaves& leaves, std::span<const float> u) {
  require(u.size() == diff.noise_size(), ErrorCode::kDimensionMismatch,
          "noise length " + std::to_string(u.size()) + " != " + std::to_string(diff.noise_size()));
  const std::size_t d = diff.dim();
  Var gate = sample_gate(graph, leaves.alpha, u.first(d), diff.gate.l, diff.gate.r);
  if (diff.structure) {
    Var group_gate = sample_gate(graph, leaves.group_alpha, u.subspan(d), diff.gate.l, diff.gate.r);
    const std::vector<std::uint32_t> owner = detail::group_index_or_zero(diff);
    gate = graph.mul(gate, graph.gather(group_gate, owner));
  }
  const std::vector<float> mask = diff.space->gate_mask();
  std::vector<float> head(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) head[i] = 1.0f - mask[i];
  gate = graph.add(graph.mul(gate, graph.constant(detail::mask_tensor<T>(mask))),
                   graph.constant(detail::mask_tensor<T>(head)));
  return graph.mul(gate, leaves.w);
}

/// Differentiable expected number of nonzero diff entries, heads excluded.
template <std::floating_point T>
Var expected_l0_total(Graph<T>& graph, const GatedDiff& diff, const DiffLeaves& leaves) {
  Var p = expected_l0(graph, leaves.alpha, diff.gate.l, diff.gate.r);
  if (diff.structure) {
    Var pg = expected_l0(graph, leaves.group_alpha, diff.gate.l, diff.gate.r);
    p = graph.mul(p, graph.gather(pg, detail::group_index_or_zero(diff)));
  }
  return graph.sum(graph.mul(p, graph.constant(detail::mask_tensor<T>(diff.space->gate_mask()))));
}

/// Double-precision evaluation of the same expectation.
inline double expected_l0_total(const GatedDiff& diff) {
  diff.validate();
  const double c = diff.gate.log_ratio();
  const FlatParamSpace& space = *diff.space;
  std::vector<std::uint32_t> owner;
  if (diff.structure) owner = diff.structure->group_of(space);
  double total = 0.0;
  for (const Segment& s : space.segments()) {
    if (s.head) continue;
    for (std::size_t i = s.offset; i < s.end(); ++i) {
      double p = ops::sigmoid(static_cast<double>(diff.gate.alpha[i]) - c);
      if (diff.structure) p *= ops::sigmoid(static_cast<double>(diff.structure->group_alpha[owner[i]]) - c);
      total += p;
    }
  }
  return total;
}

}  // namespace diffprune
