#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "diffprune/diff.hpp"
#include "diffprune/error.hpp"

namespace diffprune {

struct LayerShare {
  std::string layer;
  std::size_t count = 0;
  double fraction = 0.0;
};

/// Where the modified (non-head) parameters of a diff live, by layer.
struct SparsityReport {
  std::vector<LayerShare> per_layer;
  std::size_t total_nonzero = 0;
  double target = 0.0;
};

inline std::string layer_name(std::uint16_t layer) { return "layer" + std::to_string(layer); }

/// Counts non-head nonzeros per layer. Every non-head layer of the space is
/// listed (possibly with a zero count) unless the diff has no non-head
/// entries, in which case the list is empty.
inline SparsityReport per_layer_sparsity(const DiffVector& delta, double target = 0.0) {
  require(delta.space != nullptr, ErrorCode::kInvalidArgument, "per-layer report needs the diff's parameter space");
  const FlatParamSpace& space = *delta.space;
  std::map<std::uint16_t, std::size_t> counts;
  for (const Segment& s : space.segments())
    if (!s.head) counts.emplace(s.layer, 0);
  SparsityReport report;
  report.target = target;
  for (std::uint64_t pos : delta.positions) {
    const Segment& s = space.segments()[space.segment_index(pos)];
    if (s.head) continue;
    ++counts[s.layer];
    ++report.total_nonzero;
  }
  if (report.total_nonzero == 0) return report;
  for (const auto& [layer, count] : counts) {
    report.per_layer.push_back(
        {layer_name(layer), count, static_cast<double>(count) / static_cast<double>(report.total_nonzero)});
  }
  return report;
}

/// Fraction of groups none of whose coordinates appear in the diff's support.
inline double zero_group_fraction(const DiffVector& delta, const GroupPartition& groups) {
  require(delta.space != nullptr, ErrorCode::kInvalidArgument, "zero-group fraction needs the diff's parameter space");
  require(groups.size() > 0, ErrorCode::kInvalidArgument, "empty group partition");
  const std::vector<std::uint32_t> owner = groups.group_of(*delta.space);
  std::vector<bool> touched(groups.size(), false);
  for (std::uint64_t pos : delta.positions) {
    if (owner[pos] != GroupPartition::kNoGroup) touched[owner[pos]] = true;
  }
  const auto zero = static_cast<std::size_t>(std::count(touched.begin(), touched.end(), false));
  return static_cast<double>(zero) / static_cast<double>(groups.size());
}

enum class StorageScheme { kFullWeights, kPositionsAndWeights };

inline const char* to_string(StorageScheme scheme) {
  return scheme == StorageScheme::kFullWeights ? "full-weights" : "positions+weights";
}

/// Byte count for storing one task's parameters: float32 weights and, for
/// the sparse scheme, one int32 position per stored weight.
struct StorageEstimate {
  static constexpr std::uint64_t kBytesPerWeight = 4;
  static constexpr std::uint64_t kBytesPerPosition = 4;

  StorageScheme scheme = StorageScheme::kFullWeights;
  std::uint64_t bytes = 0;

  double megabytes() const { return static_cast<double>(bytes) / 1e6; }
  double mebibytes() const { return static_cast<double>(bytes) / (1024.0 * 1024.0); }
};

inline StorageEstimate storage_cost(std::uint64_t n_params, std::uint64_t n_nonzero, StorageScheme scheme) {
  require(n_nonzero <= n_params, ErrorCode::kInvalidArgument, "more nonzeros than parameters");
  StorageEstimate est;
  est.scheme = scheme;
  est.bytes = scheme == StorageScheme::kFullWeights
                  ? n_params * StorageEstimate::kBytesPerWeight
                  : n_nonzero * (StorageEstimate::kBytesPerWeight + StorageEstimate::kBytesPerPosition);
  return est;
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size() && a.size() >= 2, ErrorCode::kInvalidArgument, "spearman needs two equal-length series");
  auto ranks = [](const std::vector<double>& x) {
    std::vector<std::size_t> idx(x.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - mean) * (rb[i] - mean);
    va += (ra[i] - mean) * (ra[i] - mean);
    vb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

// ---- CSV ------------------------------------------------------------------

/// Quotes a field when it contains a separator, quote, or newline.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string csv_number(double v) {
  std::ostringstream out;
  out.precision(10);
  out << v;
  return out.str();
}

inline void write_csv(std::ostream& out, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  auto line = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) out << (i ? "," : "") << csv_field(fields[i]);
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
}

inline void write_csv(std::ostream& out, const SparsityReport& report) {
  std::vector<std::vector<std::string>> rows;
  for (const LayerShare& s : report.per_layer)
    rows.push_back({s.layer, std::to_string(s.count), csv_number(s.fraction)});
  write_csv(out, {"layer", "nonzero", "fraction"}, rows);
}

}  // namespace diffprune
