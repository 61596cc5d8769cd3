#include "lope/cli/app.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>
#include <fmt/ranges.h>

#include <CLI11.hpp>
#include <filesystem>
#include <nlohmann/json.hpp>

#include "lope/cli/ablation.hpp"
#include "lope/cli/metrics.hpp"
#include "lope/errors.hpp"
#include "lope/io.hpp"
#include "lope/pipeline.hpp"

namespace lope::cli {

namespace fs = std::filesystem;

namespace {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("-c,--config", opts.config_path, "experiment config file (key = value)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", opts.sets, "override a config key, e.g. --set stage1.epochs=5");
}

config::ExperimentConfig resolve_config(const CommonOptions& opts) {
  auto cfg = opts.config_path.empty() ? config::ExperimentConfig{} : config::load(opts.config_path);
  for (const auto& s : opts.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ValidationError(fmt::format("--set expects key=value, got '{}'", s));
    config::set_value(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

pipeline::ExperimentData load_data(const config::ExperimentConfig& cfg, const std::string& dir) {
  if (dir.empty()) return pipeline::make_data(cfg);
  const fs::path d(dir);
  const auto v = cfg.task.vocab_size;
  const auto c = cfg.task.num_classes;
  pipeline::ExperimentData data;
  data.split.train = noise::read_dataset(d / "train.tsv", v, c);
  data.split.eval = noise::read_dataset(d / "eval.tsv", v, c);
  data.calibration = noise::read_dataset(d / "calib.tsv", v, c);
  return data;
}

std::string hex(std::uint64_t v) { return fmt::format("{:016x}", v); }

int cmd_gen(const CommonOptions& common, const std::string& out_dir, std::ostream& out) {
  const auto cfg = resolve_config(common);
  const auto data = pipeline::make_data(cfg);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  noise::write_dataset(data.split.train, dir / "train.tsv");
  noise::write_dataset(data.split.eval, dir / "eval.tsv");
  noise::write_dataset(data.calibration, dir / "calib.tsv");
  noise::write_manifest(data.split.manifest, dir / "manifest.tsv");
  io::write_file_atomic(dir / "config.txt", config::serialize(cfg));
  fmt::print(out, "wrote {} train, {} eval, {} calibration examples and {} manifest entries to {}\n",
             data.split.train.size(), data.split.eval.size(), data.calibration.size(),
             data.split.manifest.size(), dir.string());
  fmt::print(out, "seed {} config_hash {}\n", cfg.seed, hex(config::config_hash(cfg)));
  return kExitOk;
}

int cmd_train(const CommonOptions& common, const std::string& out_dir, const std::string& data_dir,
              std::ostream& out) {
  const auto cfg = resolve_config(common);
  const auto data = load_data(cfg, data_dir);
  const auto result = pipeline::run_pipeline(cfg, data);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  training::save_checkpoint(result.checkpoint, dir / "checkpoint.bin");
  io::write_file_atomic(dir / "config.txt", config::serialize(cfg));
  std::vector<RunReport> runs{{"lope", cfg.seed, result.report}};
  if (result.baseline) {
    training::Checkpoint base{training::kCheckpointVersion, *result.baseline, std::nullopt,
                              result.checkpoint.rng, result.checkpoint.config_hash};
    training::save_checkpoint(base, dir / "baseline.bin");
    runs.push_back({"baseline", cfg.seed, result.baseline_report});
  }
  export_metrics(runs, config::config_hash(cfg), dir);
  for (const auto& sums : result.report.checksums) {
    fmt::print(out, "{}: changed blocks [{}], frozen blocks intact: {}\n", sums.stage,
               fmt::join(sums.changed(), " "), sums.frozen_intact() ? "yes" : "NO");
  }
  const auto& last = result.report.epochs.back();
  fmt::print(out, "final {} epoch {}: loss {:.4f} train_acc {:.4f} eval_acc {:.4f}\n", last.stage,
             last.epoch, last.loss, last.train_acc, last.eval_acc);
  fmt::print(out, "checkpoint {} (seed {}, config_hash {})\n", (dir / "checkpoint.bin").string(),
             cfg.seed, hex(result.checkpoint.config_hash));
  return kExitOk;
}

int cmd_eval(const CommonOptions& common, const std::string& checkpoint_path,
             const std::string& data_dir, const std::string& baseline_path,
             const std::string& record_path, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(common);
  const auto ckpt = training::load_checkpoint(checkpoint_path);
  const auto hash = config::config_hash(cfg);
  if (ckpt.config_hash != hash) {
    fmt::print(err,
               "warning: checkpoint was trained with config_hash {}, evaluating with {}; pass the "
               "training config (its config.txt) to reproduce the training data\n",
               hex(ckpt.config_hash), hex(hash));
  }
  const auto data = load_data(cfg, data_dir);
  std::optional<training::Checkpoint> baseline;
  if (!baseline_path.empty()) baseline = training::load_checkpoint(baseline_path);
  const auto r = pipeline::evaluate(cfg, ckpt, data.split.eval, baseline ? &baseline->backbone : nullptr);

  fmt::print(out, "accuracy {:.4f}\n", r.masked);
  fmt::print(out, "masked_acc {:.4f} masked_nocomp_acc {:.4f} unmasked_acc {:.4f}\n", r.masked,
             r.masked_nocomp, r.unmasked);
  if (r.baseline) fmt::print(out, "baseline_acc {:.4f}\n", *r.baseline);

  if (!record_path.empty()) {
    nlohmann::ordered_json rec{{"checkpoint", checkpoint_path},
                               {"seed", cfg.seed},
                               {"config_hash", hex(hash)},
                               {"checkpoint_config_hash", hex(ckpt.config_hash)},
                               {"eval_examples", data.split.eval.size()},
                               {"masked_acc", r.masked},
                               {"masked_nocomp_acc", r.masked_nocomp},
                               {"unmasked_acc", r.unmasked}};
    if (r.baseline) rec["baseline_acc"] = *r.baseline;
    io::write_file_atomic(record_path, rec.dump(2) + "\n");
  }
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t configs, bool layer_only, std::ostream& out) {
  training::GradCheckOptions opts;
  opts.configs_per_regime = configs;
  opts.include_model = !layer_only;
  const auto report = training::grad_check_suite(seed, opts);
  fmt::print(out, "{:<46} {:>12}\n", "level/regime/block", "worst_rel");
  for (const auto& [key, worst] : report.worst_by_block()) {
    fmt::print(out, "{:<46} {:>12.3e}{}\n", key, worst, worst > report.tolerance ? "  FAIL" : "");
  }
  std::size_t failed = 0;
  for (const auto& e : report.entries) failed += e.pass ? 0 : 1;
  fmt::print(out, "{} comparisons, {} failed, tolerance {:g}, seed {}\n", report.entries.size(), failed,
             report.tolerance, seed);
  fmt::print(out, "{}\n", report.passed() ? "PASS" : "FAIL");
  return report.passed() ? kExitOk : kExitCheckFailed;
}

int cmd_ablate(const CommonOptions& common, const std::string& grid_name, std::size_t seeds,
               const std::string& out_dir, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(common);
  const auto grid = parse_grid(grid_name);
  const auto threads = thread_limit();
  fmt::print(err, "grid {}: {} conditions x {} seeds on {} thread(s)\n", grid_name,
             grid_spec(grid, cfg).conditions.size(), seeds, threads);
  const auto result = run_ablation(cfg, grid, seeds, threads, [&err](const AblationRow& row) {
    fmt::print(err, "  done {} seed {}\n", row.condition, row.seed);
  });
  const auto table = format_table_csv(result);
  if (!out_dir.empty()) {
    const fs::path dir(out_dir);
    fs::create_directories(dir);
    io::write_file_atomic(dir / "table.csv", table);
    io::write_file_atomic(dir / "table_summary.json", format_table_summary_json(result));
    export_metrics(result.runs, result.config_hash, dir);
  }
  out << table;
  fmt::print(out, "\n{:<24}", "condition");
  for (const auto& m : result.spec.metrics) fmt::print(out, " {:>20}", m + " (mean)");
  fmt::print(out, "\n");
  for (const auto& cond : result.spec.conditions) {
    fmt::print(out, "{:<24}", cond.name);
    for (std::size_t m = 0; m < result.spec.metrics.size(); ++m) {
      std::vector<double> v;
      for (const auto& row : result.rows) {
        if (row.condition == cond.name) v.push_back(row.values[m]);
      }
      const auto s = mean_stddev(v);
      fmt::print(out, " {:>12.4f} ± {:<5.3f}", s.mean, s.stddev);
    }
    fmt::print(out, "\n");
  }
  return kExitOk;
}

int cmd_config(const CommonOptions& common, bool describe, std::ostream& out) {
  if (describe) {
    for (const auto& k : config::documented_keys()) {
      fmt::print(out, "# {}\n{} = {}\n", k.description, k.key, k.default_value);
    }
    return kExitOk;
  }
  out << config::serialize(resolve_config(common));
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"lope: two-stage poisoning-expert LoRA training at desk scale", "lope"};
  app.require_subcommand(1);

  CommonOptions gen_opts, train_opts, eval_opts, ablate_opts, config_opts;
  std::string gen_out, train_out, train_data, eval_ckpt, eval_data, eval_baseline, eval_record,
      ablate_grid, ablate_out;
  std::uint64_t gc_seed = 614;
  std::size_t gc_configs = 20;
  bool gc_layer_only = false;
  std::size_t ablate_seeds = 5;
  bool describe = false;

  auto* gen = app.add_subcommand("gen", "generate train/eval/calibration datasets and the noise manifest");
  add_common(gen, gen_opts);
  gen->add_option("-o,--out", gen_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "run stage 1, stage 2 and calibration; write a checkpoint");
  add_common(train, train_opts);
  train->add_option("-o,--out", train_out, "output directory")->required();
  train->add_option("--data", train_data, "directory written by `gen` (default: regenerate)");

  auto* eval = app.add_subcommand("eval", "clean-eval accuracy of a checkpoint");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "directory written by `gen` (default: regenerate)");
  eval->add_option("--baseline", eval_baseline, "baseline checkpoint written by `train`");
  eval->add_option("--record", eval_record, "write a JSON metrics record here");

  auto* gc = app.add_subcommand("gradcheck", "compare analytic gradients with finite differences");
  gc->add_option("--seed", gc_seed, "suite seed");
  gc->add_option("--configs", gc_configs, "random configurations per regime")->check(CLI::PositiveNumber);
  gc->add_flag("--layer-only", gc_layer_only, "skip the whole-model checks");

  auto* ablate = app.add_subcommand("ablate", "run an ablation grid over seeds");
  add_common(ablate, ablate_opts);
  ablate->add_option("--grid", ablate_grid, "noise, compensation, ratio, mask, experts or baseline")
      ->required();
  ablate->add_option("--seeds", ablate_seeds, "number of seeds (config seed, seed+1, ...)")
      ->check(CLI::PositiveNumber);
  ablate->add_option("-o,--out", ablate_out, "write table.csv, table_summary.json, metrics.csv, summary.json");

  auto* cfg = app.add_subcommand("config", "print the resolved config");
  add_common(cfg, config_opts);
  cfg->add_flag("--describe", describe, "list every key with its default and meaning");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    fmt::print(err, "error: {}\nrun `lope --help` for usage\n", e.what());
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(gen_opts, gen_out, out);
    if (*train) return cmd_train(train_opts, train_out, train_data, out);
    if (*eval) return cmd_eval(eval_opts, eval_ckpt, eval_data, eval_baseline, eval_record, out, err);
    if (*gc) return cmd_gradcheck(gc_seed, gc_configs, gc_layer_only, out);
    if (*ablate) return cmd_ablate(ablate_opts, ablate_grid, ablate_seeds, ablate_out, out, err);
    if (*cfg) return cmd_config(config_opts, describe, out);
  } catch (const std::exception& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitValidation;
  }
  return kExitUsage;
}

}  // namespace lope::cli
