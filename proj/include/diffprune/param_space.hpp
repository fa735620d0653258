#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "diffprune/error.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune {

/// A named tensor laid out contiguously inside the flat parameter vector.
struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
  Shape shape;
  std::uint16_t layer = 0;
  bool head = false;

  std::size_t end() const { return offset + length; }
  bool operator==(const Segment&) const = default;
};

/// Flat view over every trainable array of a model. Task heads live in the
/// same space but are exempt from the sparsity penalty and budget.
class FlatParamSpace {
 public:
  FlatParamSpace() = default;

  /// Appends a segment at the current end of the space.
  FlatParamSpace& add(std::string name, Shape shape, std::uint16_t layer, bool head = false) {
    const std::size_t len = shape_size(shape);
    require(len > 0, ErrorCode::kInvalidArgument, "segment '" + name + "' is empty");
    require(!find(name).has_value(), ErrorCode::kInvalidArgument, "duplicate segment '" + name + "'");
    segments_.push_back(Segment{std::move(name), total_dim_, len, std::move(shape), layer, head});
    total_dim_ += len;
    return *this;
  }

  /// Builds from an explicit table; offsets must tile [0, d).
  static FlatParamSpace from_segments(std::vector<Segment> segments) {
    FlatParamSpace space;
    for (Segment& s : segments) {
      require(s.offset == space.total_dim_, ErrorCode::kSegmentMismatch,
              "segment '" + s.name + "' at offset " + std::to_string(s.offset) + " leaves a gap or overlap");
      if (s.shape.empty() || shape_size(s.shape) != s.length) s.shape = {s.length};
      space.add(s.name, s.shape, s.layer, s.head);
    }
    return space;
  }

  std::size_t total_dim() const { return total_dim_; }
  const std::vector<Segment>& segments() const { return segments_; }

  std::size_t nonhead_dim() const {
    std::size_t n = 0;
    for (const Segment& s : segments_)
      if (!s.head) n += s.length;
    return n;
  }

  std::optional<Segment> find(const std::string& name) const {
    for (const Segment& s : segments_)
      if (s.name == name) return s;
    return std::nullopt;
  }

  /// Index of the segment containing flat position `pos`.
  std::size_t segment_index(std::size_t pos) const {
    require(pos < total_dim_, ErrorCode::kDimensionMismatch, "position out of range");
    auto it = std::upper_bound(segments_.begin(), segments_.end(), pos,
                               [](std::size_t p, const Segment& s) { return p < s.offset; });
    return static_cast<std::size_t>(std::distance(segments_.begin(), it)) - 1;
  }

  bool is_head(std::size_t pos) const { return segments_[segment_index(pos)].head; }

  /// 1 for penalized coordinates, 0 for head coordinates.
  std::vector<float> gate_mask() const {
    std::vector<float> mask(total_dim_, 1.0f);
    for (const Segment& s : segments_)
      if (s.head) std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(s.offset), s.length, 0.0f);
    return mask;
  }

  /// Highest layer index among non-head segments, or nullopt when every
  /// segment is a head.
  std::optional<std::uint16_t> top_layer() const {
    std::optional<std::uint16_t> top;
    for (const Segment& s : segments_)
      if (!s.head && (!top || s.layer > *top)) top = s.layer;
    return top;
  }

  bool operator==(const FlatParamSpace&) const = default;

 private:
  std::vector<Segment> segments_;
  std::size_t total_dim_ = 0;
};

}  // namespace diffprune
