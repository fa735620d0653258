#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "diffprune/diff.hpp"
#include "diffprune/error.hpp"
#include "diffprune/model.hpp"
#include "diffprune/pipeline.hpp"
#include "diffprune/tasks.hpp"

namespace diffprune {

struct PretrainConfig {
  int epochs = 5;
  double learning_rate = 0.5;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
};

struct SweepConfig {
  std::vector<double> sparsities{0.001, 0.0025, 0.005, 0.01};
  std::vector<std::string> methods{"structured", "unstructured", "nonadaptive"};
  std::vector<std::uint64_t> seeds{0};
  std::vector<std::string> tasks{"shift"};
};

/// Everything a harness run needs. Defaults for the diff objective follow the
/// large-model settings (l = -1.5, r = 1.5, lambda = 1.25e-7,
/// alpha = 5, w = 0); desk-scale configs override lambda and learning rates.
struct RunConfig {
  TrainConfig train;
  DiffInit init;
  ModelSpec model;
  SuiteConfig suite;
  PretrainConfig pretrain;
  SweepConfig sweep;
  bool structured = true;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
    fail(ErrorCode::kConfig, key + ": '" + v + "' is not a number");
  }
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    fail(ErrorCode::kConfig, key + ": '" + v + "' is not a non-negative integer");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorCode::kConfig, key + ": '" + v + "' is not a boolean");
}

inline OptimizerKind parse_optimizer(const std::string& key, const std::string& v) {
  if (v == "sgd") return OptimizerKind::kSgd;
  if (v == "adam") return OptimizerKind::kAdam;
  fail(ErrorCode::kConfig, key + ": unknown optimizer '" + v + "'");
}

inline std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

template <class T, class F>
std::string join(const std::vector<T>& items, F f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + f(items[i]);
  return out;
}

inline void check_range(const std::string& key, bool ok) {
  if (!ok) fail(ErrorCode::kConfig, key + ": value out of range");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto positive_int = [](const std::string& k, const std::string& v) {
      const auto n = parse_uint(k, v);
      check_range(k, n >= 1 && n <= 1000000000ULL);
      return n;
    };
    t["lambda"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.train.lambda = parse_double(k, v);
      check_range(k, c.train.lambda >= 0.0);
    };
    t["l"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.train.l = c.init.l = parse_double(k, v);
      check_range(k, c.train.l < 0.0);
    };
    t["r"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.train.r = c.init.r = parse_double(k, v);
      check_range(k, c.train.r > 1.0);
    };
    t["target_sparsity"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.train.target_sparsity = parse_double(k, v);
      check_range(k, c.train.target_sparsity > 0.0 && c.train.target_sparsity <= 1.0);
    };
    t["epochs_train"] = [=](RunConfig& c, const std::string& k, const std::string& v) {
      c.train.epochs_train = static_cast<int>(positive_int(k, v));
    };
    t["epochs_finetune"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      const auto n = parse_uint(k, v);
      check_range(k, n <= 1000000);
      c.train.epochs_finetune = static_cast<int>(n);
    };
    t["learning_rate"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.train.learning_rate = parse_double(k, v);
      check_range(k, c.train.learning_rate > 0.0);
    };
    t["alpha_learning_rate"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.train.alpha_learning_rate = parse_double(k, v);
      check_range(k, c.train.alpha_learning_rate > 0.0);
    };
    t["finetune_learning_rate"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.train.finetune_learning_rate = parse_double(k, v);
      check_range(k, c.train.finetune_learning_rate > 0.0);
    };
    t["batch_size"] = [=](RunConfig& c, const std::string& k, const std::string& v) {
      c.train.batch_size = positive_int(k, v);
    };
    t["seed"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.train.seed = parse_uint(k, v); };
    t["optimizer"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.train.optimizer = parse_optimizer(k, v);
    };
    t["alpha_init"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.init.alpha = static_cast<float>(parse_double(k, v));
    };
    t["group_alpha_init"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.init.group_alpha = static_cast<float>(parse_double(k, v));
    };
    t["w_init"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.init.w = static_cast<float>(parse_double(k, v));
    };
    t["structured"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.structured = parse_bool(k, v);
    };
    t["model"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      if (v == "mlp") {
        c.model.arch = Architecture::kMlp;
      } else if (v == "transformer") {
        c.model.arch = Architecture::kTransformer;
      } else {
        fail(ErrorCode::kConfig, k + ": unknown model '" + v + "'");
      }
    };
    for (const char* key : {"vocab", "seq_len", "classes", "depth", "width", "layers", "heads", "d_model"}) {
      t[key] = [=](RunConfig& c, const std::string& k, const std::string& v) {
        const auto n = static_cast<std::size_t>(positive_int(k, v));
        if (k == "vocab") c.model.vocab = c.suite.vocab = n;
        if (k == "seq_len") c.model.seq_len = c.suite.seq_len = n;
        if (k == "classes") c.model.classes = c.suite.classes = n;
        if (k == "depth") c.model.depth = n;
        if (k == "width") c.model.width = n;
        if (k == "layers") c.model.layers = n;
        if (k == "heads") c.model.heads = n;
        if (k == "d_model") c.model.d_model = n;
      };
    }
    t["suite_seed"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.suite.seed = parse_uint(k, v); };
    t["n_train"] = [=](RunConfig& c, const std::string& k, const std::string& v) { c.suite.n_train = positive_int(k, v); };
    t["n_validation"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.suite.n_validation = static_cast<std::size_t>(parse_uint(k, v));
    };
    t["signal_rate"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.suite.signal_rate = parse_double(k, v);
      check_range(k, c.suite.signal_rate > 0.0 && c.suite.signal_rate <= 1.0);
    };
    t["pretrain_epochs"] = [=](RunConfig& c, const std::string& k, const std::string& v) {
      c.pretrain.epochs = static_cast<int>(positive_int(k, v));
    };
    t["pretrain_learning_rate"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.pretrain.learning_rate = parse_double(k, v);
      check_range(k, c.pretrain.learning_rate > 0.0);
    };
    t["pretrain_optimizer"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.pretrain.optimizer = parse_optimizer(k, v);
    };
    t["pretrain_batch_size"] = [=](RunConfig& c, const std::string& k, const std::string& v) {
      c.pretrain.batch_size = positive_int(k, v);
    };
    t["pretrain_seed"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.pretrain.seed = parse_uint(k, v);
    };
    t["sweep_sparsities"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.sweep.sparsities.clear();
      for (const std::string& item : split_list(v)) {
        const double t = parse_double(k, item);
        check_range(k, t > 0.0 && t <= 1.0);
        c.sweep.sparsities.push_back(t);
      }
      check_range(k, !c.sweep.sparsities.empty());
    };
    t["sweep_methods"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.sweep.methods = split_list(v);
      check_range(k, !c.sweep.methods.empty());
    };
    t["sweep_seeds"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.sweep.seeds.clear();
      for (const std::string& item : split_list(v)) c.sweep.seeds.push_back(parse_uint(k, item));
      check_range(k, !c.sweep.seeds.empty());
    };
    t["sweep_tasks"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.sweep.tasks = split_list(v);
      check_range(k, !c.sweep.tasks.empty());
    };
    return t;
  }();
  return table;
}

}  // namespace detail

/// Applies one key=value setting; unknown keys and out-of-range values are
/// errors that name the key.
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = detail::setters();
  const auto it = table.find(key);
  if (it == table.end()) fail(ErrorCode::kConfig, "unknown key '" + key + "'");
  it->second(cfg, key, value);
}

/// Applies flat key=value text on top of `cfg`. Blank lines and lines
/// starting with '#' are ignored.
inline void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::stringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::kConfig, "line " + std::to_string(line_no) + ": expected key=value");
    }
    apply_setting(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  cfg.model.validate();
  cfg.train.validate();
}

/// Parses flat key=value text; unspecified keys keep their defaults.
inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  apply_config_text(cfg, text);
  return cfg;
}

inline std::string read_config_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open config '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline RunConfig load_config(const std::filesystem::path& path) { return parse_config(read_config_text(path)); }

/// Fully resolved configuration as key=value pairs, the same keys
/// parse_config accepts. Embedded into every artifact the harness writes.
inline std::map<std::string, std::string> resolved(const RunConfig& c) {
  using detail::format_double;
  std::map<std::string, std::string> kv;
  kv["lambda"] = format_double(c.train.lambda);
  kv["l"] = format_double(c.train.l);
  kv["r"] = format_double(c.train.r);
  kv["target_sparsity"] = format_double(c.train.target_sparsity);
  kv["epochs_train"] = std::to_string(c.train.epochs_train);
  kv["epochs_finetune"] = std::to_string(c.train.epochs_finetune);
  kv["learning_rate"] = format_double(c.train.learning_rate);
  kv["alpha_learning_rate"] = format_double(c.train.alpha_learning_rate);
  kv["finetune_learning_rate"] = format_double(c.train.finetune_learning_rate);
  kv["batch_size"] = std::to_string(c.train.batch_size);
  kv["seed"] = std::to_string(c.train.seed);
  kv["optimizer"] = detail::optimizer_name(c.train.optimizer);
  kv["alpha_init"] = format_double(c.init.alpha);
  kv["group_alpha_init"] = format_double(c.init.group_alpha);
  kv["w_init"] = format_double(c.init.w);
  kv["structured"] = c.structured ? "true" : "false";
  kv["model"] = c.model.arch == Architecture::kMlp ? "mlp" : "transformer";
  kv["vocab"] = std::to_string(c.model.vocab);
  kv["seq_len"] = std::to_string(c.model.seq_len);
  kv["classes"] = std::to_string(c.model.classes);
  kv["depth"] = std::to_string(c.model.depth);
  kv["width"] = std::to_string(c.model.width);
  kv["layers"] = std::to_string(c.model.layers);
  kv["heads"] = std::to_string(c.model.heads);
  kv["d_model"] = std::to_string(c.model.d_model);
  kv["suite_seed"] = std::to_string(c.suite.seed);
  kv["n_train"] = std::to_string(c.suite.n_train);
  kv["n_validation"] = std::to_string(c.suite.n_validation);
  kv["signal_rate"] = format_double(c.suite.signal_rate);
  kv["pretrain_epochs"] = std::to_string(c.pretrain.epochs);
  kv["pretrain_learning_rate"] = format_double(c.pretrain.learning_rate);
  kv["pretrain_optimizer"] = detail::optimizer_name(c.pretrain.optimizer);
  kv["pretrain_batch_size"] = std::to_string(c.pretrain.batch_size);
  kv["pretrain_seed"] = std::to_string(c.pretrain.seed);
  kv["sweep_sparsities"] = detail::join(c.sweep.sparsities, format_double);
  kv["sweep_methods"] = detail::join(c.sweep.methods, [](const std::string& s) { return s; });
  kv["sweep_seeds"] = detail::join(c.sweep.seeds, [](std::uint64_t s) { return std::to_string(s); });
  kv["sweep_tasks"] = detail::join(c.sweep.tasks, [](const std::string& s) { return s; });
  return kv;
}

/// Inverse of resolved(): rebuilds a RunConfig from embedded metadata,
/// ignoring keys that are not config keys.
inline RunConfig config_from_metadata(const std::map<std::string, std::string>& kv) {
  RunConfig cfg;
  const auto& table = detail::setters();
  for (const auto& [k, v] : kv) {
    if (k.rfind("cfg.", 0) != 0) continue;
    const std::string key = k.substr(4);
    if (table.count(key)) apply_setting(cfg, key, v);
  }
  return cfg;
}

}  // namespace diffprune
