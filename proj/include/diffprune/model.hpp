#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "diffprune/data.hpp"
#include "diffprune/error.hpp"
#include "diffprune/param_space.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune {

enum class Architecture { kMlp, kTransformer };

struct ModelSpec {
  Architecture arch = Architecture::kMlp;
  std::size_t vocab = 64;
  std::size_t seq_len = 16;
  std::size_t classes = 8;
  // MLP
  std::size_t depth = 2;
  std::size_t width = 64;
  // transformer
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t d_model = 16;

  void validate() const {
    require(vocab > 0 && seq_len > 0 && classes > 1, ErrorCode::kInvalidArgument, "model dimensions must be positive");
    if (arch == Architecture::kMlp) {
      require(depth >= 1 && width > 0, ErrorCode::kInvalidArgument, "mlp needs depth >= 1 and width > 0");
    } else {
      require(layers >= 1 && heads >= 1 && d_model % heads == 0, ErrorCode::kInvalidArgument,
              "transformer needs layers >= 1 and d_model divisible by heads");
    }
  }
};

/// Small classifier over token sequences whose parameters live in one flat
/// vector. Every weight matrix and bias vector is its own segment.
class ToyModel {
 public:
  explicit ToyModel(ModelSpec spec) : spec_(spec) {
    spec_.validate();
    auto space = std::make_shared<FlatParamSpace>();
    if (spec_.arch == Architecture::kMlp) {
      std::size_t in = spec_.vocab;
      for (std::size_t k = 0; k < spec_.depth; ++k) {
        const auto layer = static_cast<std::uint16_t>(k);
        space->add("mlp." + std::to_string(k) + ".weight", {in, spec_.width}, layer);
        space->add("mlp." + std::to_string(k) + ".bias", {spec_.width}, layer);
        in = spec_.width;
      }
      space->add("head.weight", {spec_.width, spec_.classes}, static_cast<std::uint16_t>(spec_.depth), true);
      space->add("head.bias", {spec_.classes}, static_cast<std::uint16_t>(spec_.depth), true);
    } else {
      const std::size_t dm = spec_.d_model, ff = 2 * spec_.d_model;
      space->add("embed.token", {spec_.vocab, dm}, 0);
      space->add("embed.position", {spec_.seq_len, dm}, 0);
      for (std::size_t b = 0; b < spec_.layers; ++b) {
        const auto layer = static_cast<std::uint16_t>(b + 1);
        const std::string p = "block." + std::to_string(b) + ".";
        for (const char* m : {"query", "key", "value", "output"}) {
          space->add(p + m + ".weight", {dm, dm}, layer);
          space->add(p + m + ".bias", {dm}, layer);
        }
        space->add(p + "ffn.in.weight", {dm, ff}, layer);
        space->add(p + "ffn.in.bias", {ff}, layer);
        space->add(p + "ffn.out.weight", {ff, dm}, layer);
        space->add(p + "ffn.out.bias", {dm}, layer);
      }
      const auto head_layer = static_cast<std::uint16_t>(spec_.layers + 1);
      space->add("head.weight", {dm, spec_.classes}, head_layer, true);
      space->add("head.bias", {spec_.classes}, head_layer, true);
    }
    space_ = std::move(space);
  }

  const ModelSpec& spec() const { return spec_; }
  const std::shared_ptr<const FlatParamSpace>& space() const { return space_; }
  std::size_t dim() const { return space_->total_dim(); }

  /// Glorot-uniform weights, zero biases, small embeddings.
  std::vector<float> init_params(std::uint64_t seed) const {
    Rng rng(seed);
    std::vector<float> params(dim(), 0.0f);
    for (const Segment& s : space_->segments()) {
      if (s.shape.size() != 2) continue;
      const bool embedding = s.name.rfind("embed.", 0) == 0;
      const double bound = embedding ? 0.5 : std::sqrt(6.0 / static_cast<double>(s.shape[0] + s.shape[1]));
      for (std::size_t i = s.offset; i < s.end(); ++i) params[i] = static_cast<float>(rng.uniform(-bound, bound));
    }
    return params;
  }

  /// Logits [batch, classes] from a flat parameter vector node.
  Var forward(Graph<float>& g, Var params, Batch batch) const {
    require(g.value(params).size() == dim(), ErrorCode::kDimensionMismatch,
            "parameter vector has " + std::to_string(g.value(params).size()) + " entries, model expects " +
                std::to_string(dim()));
    require(!batch.empty(), ErrorCode::kInvalidArgument, "empty batch");
    return spec_.arch == Architecture::kMlp ? forward_mlp(g, params, batch) : forward_transformer(g, params, batch);
  }

  std::vector<std::uint32_t> predict(std::span<const float> params, Batch batch) const {
    Graph<float> g;
    Var p = g.constant(Tensor<float>::vector(std::vector<float>(params.begin(), params.end())));
    const Tensor<float>& logits = g.value(forward(g, p, batch));
    std::vector<std::uint32_t> out(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const float* row = &logits.data[i * spec_.classes];
      out[i] = static_cast<std::uint32_t>(std::max_element(row, row + spec_.classes) - row);
    }
    return out;
  }

  /// Key/value description, stored in checkpoint metadata.
  std::map<std::string, std::string> describe() const {
    std::map<std::string, std::string> kv;
    kv["model"] = spec_.arch == Architecture::kMlp ? "mlp" : "transformer";
    kv["vocab"] = std::to_string(spec_.vocab);
    kv["seq_len"] = std::to_string(spec_.seq_len);
    kv["classes"] = std::to_string(spec_.classes);
    if (spec_.arch == Architecture::kMlp) {
      kv["depth"] = std::to_string(spec_.depth);
      kv["width"] = std::to_string(spec_.width);
    } else {
      kv["layers"] = std::to_string(spec_.layers);
      kv["heads"] = std::to_string(spec_.heads);
      kv["d_model"] = std::to_string(spec_.d_model);
    }
    return kv;
  }

 private:
  Var segment(Graph<float>& g, Var params, const std::string& name) const {
    const auto seg = space_->find(name);
    require(seg.has_value(), ErrorCode::kInvalidArgument, "model has no segment '" + name + "'");
    return g.slice(params, seg->offset, seg->shape);
  }

  Var forward_mlp(Graph<float>& g, Var params, Batch batch) const {
    const std::size_t v = spec_.vocab;
    std::vector<float> bag(batch.size() * v, 0.0f);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const float inc = 1.0f / static_cast<float>(batch[i].tokens.size());
      for (std::uint32_t t : batch[i].tokens) {
        require(t < v, ErrorCode::kInvalidArgument, "token id out of vocabulary");
        bag[i * v + t] += inc;
      }
    }
    Var h = g.constant(Tensor<float>::matrix(batch.size(), v, std::move(bag)));
    for (std::size_t k = 0; k < spec_.depth; ++k) {
      const std::string p = "mlp." + std::to_string(k) + ".";
      h = g.relu(g.add(g.matmul(h, segment(g, params, p + "weight")), segment(g, params, p + "bias")));
    }
    return g.add(g.matmul(h, segment(g, params, "head.weight")), segment(g, params, "head.bias"));
  }

  Var forward_transformer(Graph<float>& g, Var params, Batch batch) const {
    const std::size_t dm = spec_.d_model, dh = dm / spec_.heads;
    Var tok = segment(g, params, "embed.token");
    Var pos = segment(g, params, "embed.position");
    struct Block {
      Var wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2;
    };
    std::vector<Block> blocks;
    for (std::size_t b = 0; b < spec_.layers; ++b) {
      const std::string p = "block." + std::to_string(b) + ".";
      auto s = [&](const std::string& n) { return segment(g, params, p + n); };
      blocks.push_back({s("query.weight"), s("query.bias"), s("key.weight"), s("key.bias"), s("value.weight"),
                        s("value.bias"), s("output.weight"), s("output.bias"), s("ffn.in.weight"),
                        s("ffn.in.bias"), s("ffn.out.weight"), s("ffn.out.bias")});
    }
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Var> pooled;
    pooled.reserve(batch.size());
    for (const Example& ex : batch) {
      require(ex.tokens.size() == spec_.seq_len, ErrorCode::kShapeMismatch, "sequence length mismatch");
      Var x = g.add(g.gather_rows(tok, ex.tokens), pos);
      for (const Block& blk : blocks) {
        Var q = g.add(g.matmul(x, blk.wq), blk.bq);
        Var k = g.add(g.matmul(x, blk.wk), blk.bk);
        Var v = g.add(g.matmul(x, blk.wv), blk.bv);
        std::vector<Var> heads;
        for (std::size_t h = 0; h < spec_.heads; ++h) {
          Var qh = g.slice_cols(q, h * dh, (h + 1) * dh);
          Var kh = g.slice_cols(k, h * dh, (h + 1) * dh);
          Var vh = g.slice_cols(v, h * dh, (h + 1) * dh);
          Var attn = g.softmax_rows(g.affine(g.matmul(qh, g.transpose(kh)), scale, 0.0f));
          heads.push_back(g.matmul(attn, vh));
        }
        Var mixed = heads.size() == 1 ? heads[0] : g.concat_cols(heads);
        x = g.add(x, g.add(g.matmul(mixed, blk.wo), blk.bo));
        Var ff = g.relu(g.add(g.matmul(x, blk.w1), blk.b1));
        x = g.add(x, g.add(g.matmul(ff, blk.w2), blk.b2));
      }
      pooled.push_back(g.mean_rows(x));
    }
    Var features = g.concat_rows(pooled);
    return g.add(g.matmul(features, segment(g, params, "head.weight")), segment(g, params, "head.bias"));
  }

  ModelSpec spec_;
  std::shared_ptr<const FlatParamSpace> space_;
};

}  // namespace diffprune
