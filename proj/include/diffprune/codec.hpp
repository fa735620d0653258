#pragma once

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "diffprune/diff.hpp"
#include "diffprune/error.hpp"
#include "diffprune/param_space.hpp"

// Both on-disk formats are little-endian with fixed-width integers and end in
// a CRC-32 (zlib polynomial) over every preceding byte. See docs/formats.md.
//
// Sparse diff (magic "DPDF"):
//   magic[4] version:u16 total_dim:u64 n_entries:u64
//   positions:u32[n_entries]  values:f32[n_entries]
//   segment_count:u32 { name_len:u16 name offset:u64 length:u64 layer:u16 head:u8 }*
//   metadata_len:u32 metadata   crc32:u32
//
// Checkpoint (magic "DPCK"):
//   magic[4] version:u16 tensor_count:u32 metadata_len:u32 metadata
//   { name_len:u16 name ndim:u8 dims:u64[ndim] dtype:u8 layer:u16 head:u8
//     byte_offset:u64 byte_length:u64 }*
//   data:f32[...]   crc32:u32
//
// Metadata is UTF-8 "key=value\n" lines in ascending key order.

namespace diffprune {

using Bytes = std::vector<std::uint8_t>;
using Metadata = std::map<std::string, std::string>;

inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr char kDiffMagic[4] = {'D', 'P', 'D', 'F'};
inline constexpr char kCheckpointMagic[4] = {'D', 'P', 'C', 'K'};
inline constexpr std::uint8_t kDtypeFloat32 = 1;
/// magic + version + total_dim + n_entries
inline constexpr std::size_t kDiffHeaderBytes = 4 + 2 + 8 + 8;

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large buffers
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = ::crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace detail {

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <std::unsigned_integral U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void str16(const std::string& s) {
    require(s.size() <= 0xffff, ErrorCode::kInvalidArgument, "name longer than 65535 bytes");
    uint(static_cast<std::uint16_t>(s.size()));
    raw(s.data(), s.size());
  }
  void blob32(const std::string& s) {
    require(s.size() <= 0xffffffffULL, ErrorCode::kInvalidArgument, "metadata too large");
    uint(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void finish() { uint(crc32_of(out_)); }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > in_.size() - pos_) {
      fail(ErrorCode::kTruncated, "need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                                      ", only " + std::to_string(in_.size() - pos_) + " remain");
    }
    auto out = in_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  template <std::unsigned_integral U>
  U uint() {
    auto b = take(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b[i]) << (8 * i));
    return v;
  }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  std::string str16() {
    auto n = uint<std::uint16_t>();
    auto b = take(n);
    return std::string(b.begin(), b.end());
  }
  std::string blob32() {
    auto n = uint<std::uint32_t>();
    auto b = take(n);
    return std::string(b.begin(), b.end());
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline std::string encode_metadata(const Metadata& metadata) {
  std::string out;
  for (const auto& [k, v] : metadata) {
    require(k.find_first_of("=\n") == std::string::npos && v.find('\n') == std::string::npos,
            ErrorCode::kInvalidArgument, "metadata entry '" + k + "' contains a reserved character");
    out += k + "=" + v + "\n";
  }
  return out;
}

inline Metadata decode_metadata(const std::string& text) {
  Metadata out;
  std::size_t begin = 0;
  while (begin < text.size()) {
    std::size_t end = text.find('\n', begin);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(begin, end - begin);
    const std::size_t eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::kInvalidArgument, "malformed metadata line '" + line + "'");
    out[line.substr(0, eq)] = line.substr(eq + 1);
    begin = end + 1;
  }
  return out;
}

inline void check_magic(Reader& r, const char (&magic)[4], const char* what) {
  if (r.remaining() < 4) fail(ErrorCode::kTruncated, std::string(what) + " shorter than its magic number");
  auto m = r.take(4);
  for (int i = 0; i < 4; ++i) {
    if (m[i] != static_cast<std::uint8_t>(magic[i])) fail(ErrorCode::kBadMagic, std::string("not a ") + what);
  }
  const auto version = r.uint<std::uint16_t>();
  if (version != kFormatVersion) {
    fail(ErrorCode::kBadVersion, std::string(what) + " version " + std::to_string(version) + " (expected " +
                                     std::to_string(kFormatVersion) + ")");
  }
}

inline void check_trailer(Reader& r, std::span<const std::uint8_t> bytes) {
  const std::size_t body = r.position();
  const auto stored = r.uint<std::uint32_t>();
  require(r.remaining() == 0, ErrorCode::kTruncated,
          std::to_string(r.remaining()) + " unexpected trailing bytes after checksum");
  if (crc32_of(bytes.first(body)) != stored) fail(ErrorCode::kBadChecksum, "CRC-32 does not match contents");
}

}  // namespace detail

// ---- sparse diff ------------------------------------------------------------

struct SparseDiffFile {
  DiffVector diff;
  Metadata metadata;
};

/// Canonical serialization; identical inputs give identical bytes.
inline Bytes encode(const DiffVector& delta, const Metadata& metadata = {}) {
  delta.validate();
  if (delta.dim >= (std::uint64_t{1} << 32)) {
    fail(ErrorCode::kUnsupportedDimension,
         "dimension " + std::to_string(delta.dim) + " does not fit 32-bit positions");
  }
  detail::Writer w;
  w.raw(kDiffMagic, 4);
  w.uint(kFormatVersion);
  w.uint(static_cast<std::uint64_t>(delta.dim));
  w.uint(static_cast<std::uint64_t>(delta.nnz()));
  for (std::uint64_t p : delta.positions) w.uint(static_cast<std::uint32_t>(p));
  for (float v : delta.values) w.f32(v);
  const std::vector<Segment> none;
  const std::vector<Segment>& segments = delta.space ? delta.space->segments() : none;
  w.uint(static_cast<std::uint32_t>(segments.size()));
  for (const Segment& s : segments) {
    w.str16(s.name);
    w.uint(static_cast<std::uint64_t>(s.offset));
    w.uint(static_cast<std::uint64_t>(s.length));
    w.uint(s.layer);
    w.uint(static_cast<std::uint8_t>(s.head ? 1 : 0));
  }
  w.blob32(detail::encode_metadata(metadata));
  w.finish();
  return w.take();
}

inline SparseDiffFile decode_diff_file(std::span<const std::uint8_t> bytes) {
  detail::Reader r(bytes);
  detail::check_magic(r, kDiffMagic, "sparse diff file");
  SparseDiffFile file;
  DiffVector& delta = file.diff;
  delta.dim = r.uint<std::uint64_t>();
  const auto n = r.uint<std::uint64_t>();
  require(n <= r.remaining() / 8, ErrorCode::kTruncated,
          "header declares " + std::to_string(n) + " entries but the file is too short");
  delta.positions.resize(n);
  delta.values.resize(n);
  for (auto& p : delta.positions) p = r.uint<std::uint32_t>();
  for (auto& v : delta.values) v = r.f32();
  const auto segment_count = r.uint<std::uint32_t>();
  std::vector<Segment> segments;
  for (std::uint32_t k = 0; k < segment_count; ++k) {
    Segment s;
    s.name = r.str16();
    s.offset = r.uint<std::uint64_t>();
    s.length = r.uint<std::uint64_t>();
    s.layer = r.uint<std::uint16_t>();
    s.head = r.uint<std::uint8_t>() != 0;
    segments.push_back(std::move(s));
  }
  const std::string meta = r.blob32();
  detail::check_trailer(r, bytes);

  for (std::size_t k = 0; k < n; ++k) {
    if (delta.positions[k] >= delta.dim) {
      fail(ErrorCode::kDimensionMismatch, "position " + std::to_string(delta.positions[k]) + " >= dim");
    }
    if (k > 0 && delta.positions[k - 1] >= delta.positions[k]) {
      fail(ErrorCode::kUnsortedPositions, "positions not strictly increasing at entry " + std::to_string(k));
    }
  }
  if (!segments.empty()) {
    auto space = std::make_shared<FlatParamSpace>(FlatParamSpace::from_segments(std::move(segments)));
    require(space->total_dim() == delta.dim, ErrorCode::kSegmentMismatch,
            "segment table covers " + std::to_string(space->total_dim()) + " of " + std::to_string(delta.dim) +
                " coordinates");
    delta.space = std::move(space);
  }
  file.metadata = detail::decode_metadata(meta);
  delta.validate();
  return file;
}

inline DiffVector decode(std::span<const std::uint8_t> bytes) { return decode_diff_file(bytes).diff; }

// ---- checkpoint -------------------------------------------------------------

/// Frozen parameters as named tensors, stored as one flat vector in segment
/// order.
struct Checkpoint {
  FlatParamSpace space;
  std::vector<float> flat;
  Metadata metadata;
};

inline Bytes encode_checkpoint(const Checkpoint& ckpt) {
  require(ckpt.flat.size() == ckpt.space.total_dim(), ErrorCode::kDimensionMismatch,
          "checkpoint data length does not match its tensor table");
  detail::Writer w;
  w.raw(kCheckpointMagic, 4);
  w.uint(kFormatVersion);
  w.uint(static_cast<std::uint32_t>(ckpt.space.segments().size()));
  w.blob32(detail::encode_metadata(ckpt.metadata));
  for (const Segment& s : ckpt.space.segments()) {
    w.str16(s.name);
    require(s.shape.size() <= 255, ErrorCode::kInvalidArgument, "tensor rank exceeds 255");
    w.uint(static_cast<std::uint8_t>(s.shape.size()));
    for (std::size_t dim : s.shape) w.uint(static_cast<std::uint64_t>(dim));
    w.uint(kDtypeFloat32);
    w.uint(s.layer);
    w.uint(static_cast<std::uint8_t>(s.head ? 1 : 0));
    w.uint(static_cast<std::uint64_t>(s.offset * 4));
    w.uint(static_cast<std::uint64_t>(s.length * 4));
  }
  for (float v : ckpt.flat) w.f32(v);
  w.finish();
  return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::Reader r(bytes);
  detail::check_magic(r, kCheckpointMagic, "checkpoint file");
  const auto count = r.uint<std::uint32_t>();
  Checkpoint ckpt;
  const std::string meta = r.blob32();
  std::vector<Segment> segments;
  std::uint64_t expected_offset = 0;
  for (std::uint32_t k = 0; k < count; ++k) {
    Segment s;
    s.name = r.str16();
    const auto ndim = r.uint<std::uint8_t>();
    for (std::uint8_t d = 0; d < ndim; ++d) s.shape.push_back(static_cast<std::size_t>(r.uint<std::uint64_t>()));
    const auto dtype = r.uint<std::uint8_t>();
    require(dtype == kDtypeFloat32, ErrorCode::kInvalidArgument, "tensor '" + s.name + "' has unsupported dtype");
    s.layer = r.uint<std::uint16_t>();
    s.head = r.uint<std::uint8_t>() != 0;
    const auto offset = r.uint<std::uint64_t>();
    const auto length = r.uint<std::uint64_t>();
    require(offset == expected_offset && length % 4 == 0 && length / 4 == shape_size(s.shape),
            ErrorCode::kSegmentMismatch, "tensor '" + s.name + "' has an inconsistent byte range");
    s.offset = offset / 4;
    s.length = length / 4;
    expected_offset += length;
    segments.push_back(std::move(s));
  }
  require(expected_offset / 4 <= r.remaining() / 4, ErrorCode::kTruncated, "checkpoint data region is truncated");
  ckpt.flat.resize(expected_offset / 4);
  for (float& v : ckpt.flat) v = r.f32();
  detail::check_trailer(r, bytes);
  ckpt.space = FlatParamSpace::from_segments(std::move(segments));
  ckpt.metadata = detail::decode_metadata(meta);
  for (float v : ckpt.flat) require(std::isfinite(v), ErrorCode::kNonFinite, "checkpoint holds a non-finite value");
  return ckpt;
}

/// base + delta as a new checkpoint. The diff's segment table, when present,
/// must agree with the checkpoint's tensor table (names, offsets, lengths,
/// layers, head flags); shapes are not recorded in diff files.
inline Checkpoint apply_patch(const Checkpoint& base, const DiffVector& delta) {
  require(delta.dim == base.flat.size(), ErrorCode::kDimensionMismatch,
          "diff dim " + std::to_string(delta.dim) + " != checkpoint dim " + std::to_string(base.flat.size()));
  if (delta.space) {
    const auto& a = base.space.segments();
    const auto& b = delta.space->segments();
    for (std::size_t k = 0; k < std::max(a.size(), b.size()); ++k) {
      if (k >= a.size() || k >= b.size()) {
        fail(ErrorCode::kSegmentMismatch, "segment tables differ in length at entry " + std::to_string(k));
      }
      if (a[k].name != b[k].name || a[k].offset != b[k].offset || a[k].length != b[k].length ||
          a[k].layer != b[k].layer || a[k].head != b[k].head) {
        fail(ErrorCode::kSegmentMismatch, "first divergence at segment " + std::to_string(k) + ": checkpoint '" +
                                              a[k].name + "' vs diff '" + b[k].name + "'");
      }
    }
  }
  Checkpoint out = base;
  out.flat = compose(base.flat, delta);
  return out;
}

inline Bytes apply_patch(std::span<const std::uint8_t> base, std::span<const std::uint8_t> diff) {
  return encode_checkpoint(apply_patch(decode_checkpoint(base), decode(diff)));
}

// ---- files ------------------------------------------------------------------

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Writes to a sibling temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::kIo, "cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::kIo, "short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::kIo, "cannot rename into '" + path.string() + "': " + ec.message());
}

}  // namespace diffprune
