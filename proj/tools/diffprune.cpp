#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>

#include "diffprune/analysis.hpp"
#include "diffprune/codec.hpp"
#include "diffprune/config.hpp"
#include "diffprune/harness.hpp"
#include "diffprune/pipeline.hpp"
#include "diffprune/tasks.hpp"

namespace fs = std::filesystem;
using namespace diffprune;

namespace {

struct Loaded {
  Checkpoint ckpt;
  RunConfig cfg;
};

Loaded load_base(const std::string& path) {
  Loaded out;
  out.ckpt = decode_checkpoint(read_file(path));
  out.cfg = config_from_metadata(out.ckpt.metadata);
  return out;
}

SparseDiffFile load_diff(const std::string& path) { return decode_diff_file(read_file(path)); }

TaskDataset task_named(const std::string& name, const RunConfig& cfg) {
  if (name != "base") {
    const auto& names = derived_task_names();
    require(std::find(names.begin(), names.end(), name) != names.end(), ErrorCode::kInvalidArgument,
            "unknown task '" + name + "'");
  }
  return make_task(name, cfg.suite);
}

void write_diff(const std::string& path, const DiffVector& delta, const RunConfig& cfg, const Metadata& extra) {
  Metadata meta = config_metadata(cfg);
  for (const auto& [k, v] : extra) meta[k] = v;
  write_file_atomic(path, encode(delta, meta));
}

void print_accuracy(double acc) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", acc);
  std::cout << "accuracy=" << buf << '\n';
}

// Options shared by the subcommands that train.
struct TrainOverrides {
  std::string config;
  std::optional<double> sparsity;
  std::optional<double> lambda;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "key=value file applied over the checkpoint's settings")
        ->check(CLI::ExistingFile);
    cmd->add_option("--sparsity", sparsity, "target sparsity t");
    cmd->add_option("--lambda", lambda, "L0 penalty weight");
    cmd->add_option("--seed", seed, "seed for all stochasticity");
  }

  void apply(RunConfig& cfg) const {
    if (!config.empty()) apply_config_text(cfg, read_config_text(config));
    if (sparsity) apply_setting(cfg, "target_sparsity", detail::format_double(*sparsity));
    if (lambda) apply_setting(cfg, "lambda", detail::format_double(*lambda));
    if (seed) apply_setting(cfg, "seed", std::to_string(*seed));
    cfg.train.validate();
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse task diffs over a frozen pretrained parameter vector"};
  app.require_subcommand(1);

  // pretrain
  std::string pt_config, pt_out;
  std::optional<std::uint64_t> pt_seed;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Train a toy model on the base task");
  pretrain_cmd->add_option("--config", pt_config)->check(CLI::ExistingFile);
  pretrain_cmd->add_option("--out", pt_out)->required();
  pretrain_cmd->add_option("--seed", pt_seed, "pretraining seed");

  // finetune-diff
  std::string fd_base, fd_task, fd_out;
  bool fd_structured = false, fd_unstructured = false;
  TrainOverrides fd_over;
  auto* fd_cmd = app.add_subcommand("finetune-diff", "Learn a gated diff and finalize it");
  fd_cmd->add_option("--base", fd_base)->required()->check(CLI::ExistingFile);
  fd_cmd->add_option("--task", fd_task)->required();
  fd_cmd->add_option("--out", fd_out)->required();
  auto* s_flag = fd_cmd->add_flag("--structured", fd_structured);
  auto* u_flag = fd_cmd->add_flag("--unstructured", fd_unstructured);
  s_flag->excludes(u_flag);
  fd_over.attach(fd_cmd);

  // baseline
  std::string bl_base, bl_task, bl_out, bl_kind;
  TrainOverrides bl_over;
  auto* bl_cmd = app.add_subcommand("baseline", "Full, last-layer or non-adaptive finetuning as a diff");
  bl_cmd->add_option("--kind", bl_kind)->required()->check(CLI::IsMember({"full", "last-layer", "non-adaptive"}));
  bl_cmd->add_option("--base", bl_base)->required()->check(CLI::ExistingFile);
  bl_cmd->add_option("--task", bl_task)->required();
  bl_cmd->add_option("--out", bl_out)->required();
  bl_over.attach(bl_cmd);

  // project
  std::string pj_diff, pj_out;
  double pj_t = 0.0;
  auto* pj_cmd = app.add_subcommand("project", "Keep the ceil(t*d) largest non-head entries");
  pj_cmd->add_option("--diff", pj_diff)->required()->check(CLI::ExistingFile);
  pj_cmd->add_option("--sparsity", pj_t)->required();
  pj_cmd->add_option("--out", pj_out)->required();

  // finetune-mask
  std::string fm_base, fm_diff, fm_task, fm_out;
  TrainOverrides fm_over;
  auto* fm_cmd = app.add_subcommand("finetune-mask", "Retrain a diff's values on its fixed support");
  fm_cmd->add_option("--base", fm_base)->required()->check(CLI::ExistingFile);
  fm_cmd->add_option("--diff", fm_diff)->required()->check(CLI::ExistingFile);
  fm_cmd->add_option("--task", fm_task)->required();
  fm_cmd->add_option("--out", fm_out)->required();
  fm_over.attach(fm_cmd);

  // apply
  std::string ap_base, ap_diff, ap_out;
  auto* ap_cmd = app.add_subcommand("apply", "Patch a checkpoint with a diff");
  ap_cmd->add_option("--base", ap_base)->required()->check(CLI::ExistingFile);
  ap_cmd->add_option("--diff", ap_diff)->required()->check(CLI::ExistingFile);
  ap_cmd->add_option("--out", ap_out)->required();

  // stats
  std::string st_diff, st_base, st_groups = "per-segment", st_csv;
  auto* st_cmd = app.add_subcommand("stats", "Sparsity report, zero-group fraction and storage estimate");
  st_cmd->add_option("--diff", st_diff)->required()->check(CLI::ExistingFile);
  st_cmd->add_option("--base", st_base)->check(CLI::ExistingFile);
  st_cmd->add_option("--groups", st_groups)->check(CLI::IsMember({"per-segment"}));
  st_cmd->add_option("--csv", st_csv, "also write the per-layer report as CSV");

  // eval
  std::string ev_ckpt, ev_task;
  auto* ev_cmd = app.add_subcommand("eval", "Validation accuracy of a checkpoint");
  ev_cmd->add_option("--ckpt", ev_ckpt)->required()->check(CLI::ExistingFile);
  ev_cmd->add_option("--task", ev_task)->required();

  // sweep
  std::string sw_config, sw_base, sw_out;
  unsigned sw_threads = 1;
  auto* sw_cmd = app.add_subcommand("sweep", "Accuracy over a grid of sparsities, methods and seeds");
  sw_cmd->add_option("--config", sw_config)->required()->check(CLI::ExistingFile);
  sw_cmd->add_option("--base", sw_base, "pretrained checkpoint; pretrains from the config if omitted")
      ->check(CLI::ExistingFile);
  sw_cmd->add_option("--out", sw_out, "CSV path; stdout if omitted");
  sw_cmd->add_option("--threads", sw_threads)->check(CLI::Range(1u, 256u));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "diffprune: error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*pretrain_cmd) {
      RunConfig cfg = pt_config.empty() ? RunConfig{} : load_config(pt_config);
      if (pt_seed) cfg.pretrain.seed = *pt_seed;
      const ToyModel model(cfg.model);
      const TaskDataset base = task_named("base", cfg);
      const Checkpoint ckpt = pretrain(model, base, cfg);
      write_file_atomic(pt_out, encode_checkpoint(ckpt));
      print_accuracy(accuracy(model, std::span<const float>(ckpt.flat), base.validation));
    } else if (*fd_cmd) {
      require(fd_structured || fd_unstructured, ErrorCode::kInvalidArgument,
              "finetune-diff needs --structured or --unstructured");
      Loaded base = load_base(fd_base);
      fd_over.apply(base.cfg);
      base.cfg.structured = fd_structured;
      const ToyModel model = model_for(base.ckpt);
      const TaskDataset task = task_named(fd_task, base.cfg);
      DiffInit init = base.cfg.init;
      init.l = base.cfg.train.l;
      init.r = base.cfg.train.r;
      const GatedDiff trained =
          train_l0(model, base.ckpt.flat, make_gated_diff(model.space(), fd_structured, init), task, base.cfg.train);
      const DiffVector delta = finalize(trained, finalize_seed(base.cfg.train.seed));
      write_diff(fd_out, delta, base.cfg,
                 {{"kind", "diff"}, {"stage", "finalized"}, {"task", fd_task},
                  {"method", fd_structured ? "structured" : "unstructured"}});
    } else if (*bl_cmd) {
      Loaded base = load_base(bl_base);
      bl_over.apply(base.cfg);
      const ToyModel model = model_for(base.ckpt);
      const TaskDataset task = task_named(bl_task, base.cfg);
      const Method method = parse_method(bl_kind);
      const MethodResult result = run_method(method, model, base.ckpt.flat, task, base.cfg.train, base.cfg.init);
      write_diff(bl_out, result.delta, base.cfg,
                 {{"kind", "diff"}, {"stage", "baseline"}, {"task", bl_task}, {"method", method_name(method)}});
    } else if (*pj_cmd) {
      SparseDiffFile file = load_diff(pj_diff);
      require(file.diff.space != nullptr, ErrorCode::kSegmentMismatch, "diff file has no segment table");
      const DiffVector projected = project_l0(file.diff, pj_t);
      file.metadata["cfg.target_sparsity"] = detail::format_double(pj_t);
      file.metadata["stage"] = "projected";
      write_file_atomic(pj_out, encode(projected, file.metadata));
    } else if (*fm_cmd) {
      Loaded base = load_base(fm_base);
      fm_over.apply(base.cfg);
      const ToyModel model = model_for(base.ckpt);
      SparseDiffFile file = load_diff(fm_diff);
      require(file.diff.dim == base.ckpt.flat.size(), ErrorCode::kDimensionMismatch,
              "diff dim " + std::to_string(file.diff.dim) + " != checkpoint dim " +
                  std::to_string(base.ckpt.flat.size()));
      file.diff.space = model.space();
      const TaskDataset task = task_named(fm_task, base.cfg);
      const DiffVector tuned = finetune_fixed_mask(model, base.ckpt.flat, file.diff, task, base.cfg.train);
      Metadata extra = file.metadata;
      extra["stage"] = "finetuned";
      extra["task"] = fm_task;
      write_diff(fm_out, tuned, base.cfg, extra);
    } else if (*ap_cmd) {
      const Checkpoint base = decode_checkpoint(read_file(ap_base));
      const SparseDiffFile file = load_diff(ap_diff);
      Checkpoint patched = apply_patch(base, file.diff);
      if (auto it = file.metadata.find("task"); it != file.metadata.end()) patched.metadata["task"] = it->second;
      patched.metadata["kind"] = "patched";
      write_file_atomic(ap_out, encode_checkpoint(patched));
    } else if (*st_cmd) {
      SparseDiffFile file = load_diff(st_diff);
      if (!st_base.empty()) {
        const Checkpoint base = decode_checkpoint(read_file(st_base));
        require(file.diff.dim == base.flat.size(), ErrorCode::kDimensionMismatch,
                "diff dim " + std::to_string(file.diff.dim) + " != checkpoint dim " +
                    std::to_string(base.flat.size()));
        file.diff.space = std::make_shared<const FlatParamSpace>(base.space);
      }
      require(file.diff.space != nullptr, ErrorCode::kSegmentMismatch,
              "diff file has no segment table; pass --base");
      const DiffVector& delta = file.diff;
      double target = 0.0;
      if (auto it = file.metadata.find("cfg.target_sparsity"); it != file.metadata.end()) {
        target = detail::parse_double("target_sparsity", it->second);
      }
      const SparsityReport report = per_layer_sparsity(delta, target);
      std::cout << "dim=" << delta.dim << '\n'
                << "nonhead_dim=" << delta.space->nonhead_dim() << '\n'
                << "nonzero=" << delta.nnz() << '\n'
                << "nonhead_nonzero=" << report.total_nonzero << '\n'
                << "budget=" << sparsity_budget(target, delta.space->nonhead_dim()) << '\n';
      for (const LayerShare& s : report.per_layer)
        std::cout << "layer." << s.layer << '=' << s.count << ' ' << csv_number(s.fraction) << '\n';
      std::cout << "zero_group_fraction=" << csv_number(zero_group_fraction(delta, default_grouping(*delta.space)))
                << '\n';
      for (StorageScheme scheme : {StorageScheme::kFullWeights, StorageScheme::kPositionsAndWeights}) {
        const StorageEstimate est = storage_cost(delta.dim, delta.nnz(), scheme);
        std::cout << "storage." << to_string(scheme) << "=" << est.bytes << " bytes " << csv_number(est.megabytes())
                  << " MB " << csv_number(est.mebibytes()) << " MiB\n";
      }
      if (!st_csv.empty()) {
        std::ostringstream csv;
        write_csv(csv, report);
        const std::string text = csv.str();
        write_file_atomic(st_csv, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
      }
    } else if (*ev_cmd) {
      const Loaded ckpt = load_base(ev_ckpt);
      const ToyModel model = model_for(ckpt.ckpt);
      const TaskDataset task = task_named(ev_task, ckpt.cfg);
      print_accuracy(accuracy(model, std::span<const float>(ckpt.ckpt.flat), task.validation));
    } else if (*sw_cmd) {
      const std::string text = read_config_text(sw_config);
      RunConfig cfg;
      Checkpoint base;
      if (sw_base.empty()) {
        cfg = parse_config(text);
        base = pretrain(ToyModel(cfg.model), task_named("base", cfg), cfg);
      } else {
        base = decode_checkpoint(read_file(sw_base));
        cfg = config_from_metadata(base.metadata);
        apply_config_text(cfg, text);
      }
      const ToyModel model = model_for(base);
      std::vector<TaskDataset> tasks;
      for (const std::string& name : cfg.sweep.tasks) tasks.push_back(task_named(name, cfg));
      const std::vector<SweepRow> rows = sparsity_sweep(model, base.flat, tasks, cfg, sw_threads);
      std::ostringstream csv;
      write_csv(csv, rows);
      const std::string out = csv.str();
      if (sw_out.empty()) {
        std::cout << out;
      } else {
        write_file_atomic(sw_out, {reinterpret_cast<const std::uint8_t*>(out.data()), out.size()});
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "diffprune: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
