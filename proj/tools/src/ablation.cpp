#include "lope/cli/ablation.hpp"

#include <fmt/format.h>

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <nlohmann/json.hpp>
#include <thread>

#include "lope/errors.hpp"
#include "lope/pipeline.hpp"

namespace lope::cli {

namespace {

constexpr std::pair<Grid, std::string_view> kGridNames[] = {
    {Grid::Noise, "noise"}, {Grid::Compensation, "compensation"}, {Grid::Ratio, "ratio"},
    {Grid::Mask, "mask"},   {Grid::Experts, "experts"},           {Grid::Baseline, "baseline"},
};

const std::vector<std::string> kAccuracyMetrics = {"masked_acc", "masked_nocomp_acc", "unmasked_acc"};

std::string level_string(double level) { return fmt::format("{}", level); }

struct Job {
  std::size_t condition = 0;
  std::uint64_t seed = 0;
};

struct JobResult {
  AblationRow row;
  std::vector<RunReport> runs;
};

JobResult run_job(const config::ExperimentConfig& base, const GridSpec& spec, const Job& job) {
  const auto& cond = spec.conditions[job.condition];
  auto cfg = base;
  for (const auto& [key, value] : cond.overrides) config::set_value(cfg, key, value);
  config::set_value(cfg, "seed", fmt::format("{}", job.seed));
  cfg.validate();

  const auto data = pipeline::make_data(cfg);
  const auto result = pipeline::run_pipeline(cfg, data);
  const auto eval = pipeline::evaluate(cfg, result.checkpoint, data.split.eval,
                                       result.baseline ? &*result.baseline : nullptr);

  JobResult out;
  out.row.condition = cond.name;
  out.row.seed = job.seed;
  if (spec.grid == Grid::Baseline) {
    out.row.values = {eval.masked, eval.unmasked, eval.baseline.value()};
  } else {
    out.row.values = {eval.masked, eval.masked_nocomp, eval.unmasked};
  }
  out.runs.push_back({cond.name, job.seed, result.report});
  if (result.baseline) out.runs.push_back({cond.name + "/baseline", job.seed, result.baseline_report});
  return out;
}

}  // namespace

std::string_view to_string(Grid grid) {
  for (const auto& [g, name] : kGridNames) {
    if (g == grid) return name;
  }
  return "?";
}

Grid parse_grid(std::string_view name) {
  for (const auto& [g, n] : kGridNames) {
    if (n == name) return g;
  }
  throw ValidationError(fmt::format(
      "unknown grid '{}' (expected noise, compensation, ratio, mask, experts or baseline)", name));
}

std::vector<Grid> all_grids() {
  std::vector<Grid> out;
  for (const auto& [g, name] : kGridNames) out.push_back(g);
  return out;
}

GridSpec grid_spec(Grid grid, const config::ExperimentConfig& base) {
  GridSpec spec;
  spec.grid = grid;
  spec.metrics = kAccuracyMetrics;
  switch (grid) {
    case Grid::Noise: {
      spec.conditions.push_back({"none", {{"stage1.hynoise", "none"}}});
      for (const char* type : {"continuous", "discrete", "hybrid"}) {
        for (double level : {0.035, 0.05, 0.08}) {
          spec.conditions.push_back({fmt::format("{}@{}", type, level),
                                     {{"stage1.hynoise", type},
                                      {"stage1.noise_rate", level_string(level)},
                                      {"stage1.alpha", level_string(level)}}});
        }
      }
      break;
    }
    case Grid::Compensation: {
      const auto normals = base.model.num_experts - base.model.num_poison;
      for (std::size_t k = 0; k <= normals; ++k) {
        spec.conditions.push_back(
            {fmt::format("comp={}", k), {{"inference.compensated_experts", fmt::format("{}", k)}}});
      }
      break;
    }
    case Grid::Ratio:
      for (double ratio : {0.035, 0.05, 0.10, 0.15}) {
        spec.conditions.push_back({fmt::format("ratio={}", ratio),
                                   {{"stage1.hynoise", "hybrid"},
                                    {"stage1.noise_rate", level_string(ratio)},
                                    {"stage1.alpha", level_string(ratio)}}});
      }
      break;
    case Grid::Mask:
      spec.conditions.push_back({"default", {}});
      break;
    case Grid::Experts: {
      // NE normal experts, PE poisoning experts; every normal expert is active.
      const std::pair<int, int> shapes[] = {{3, 1}, {3, 2}, {2, 2}};
      for (auto [ne, pe] : shapes) {
        spec.conditions.push_back({fmt::format("NE={},PE={}", ne, pe),
                                   {{"model.num_experts", fmt::format("{}", ne + pe)},
                                    {"model.num_poison", fmt::format("{}", pe)},
                                    {"model.top_k", fmt::format("{}", ne)}}});
      }
      break;
    }
    case Grid::Baseline:
      spec.conditions.push_back({"default", {{"baseline", "true"}}});
      spec.metrics = {"masked_acc", "unmasked_acc", "baseline_acc"};
      break;
  }
  return spec;
}

AblationResult run_ablation(const config::ExperimentConfig& base, Grid grid, std::size_t seeds,
                            std::size_t threads,
                            const std::function<void(const AblationRow&)>& progress) {
  if (seeds == 0) throw ValidationError("ablation needs at least one seed");
  base.validate();
  AblationResult result;
  result.spec = grid_spec(grid, base);
  result.config_hash = config::config_hash(base);

  std::vector<Job> jobs;
  for (std::size_t c = 0; c < result.spec.conditions.size(); ++c) {
    for (std::size_t s = 0; s < seeds; ++s) jobs.push_back({c, base.seed + s});
  }
  // Validate every condition up front so a bad grid fails before training.
  for (const auto& cond : result.spec.conditions) {
    auto cfg = base;
    for (const auto& [key, value] : cond.overrides) config::set_value(cfg, key, value);
    cfg.validate();
  }

  std::vector<JobResult> done(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      const auto i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      {
        std::lock_guard lock(mutex);
        if (failure) return;
      }
      try {
        done[i] = run_job(base, result.spec, jobs[i]);
        if (progress) {
          std::lock_guard lock(mutex);
          progress(done[i].row);
        }
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const auto workers = std::max<std::size_t>(1, std::min(threads, jobs.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  for (auto& d : done) {
    result.rows.push_back(std::move(d.row));
    for (auto& r : d.runs) result.runs.push_back(std::move(r));
  }
  return result;
}

std::string format_table_csv(const AblationResult& result) {
  std::string out = "condition,seed";
  for (const auto& m : result.spec.metrics) out += "," + m;
  out += '\n';
  for (const auto& row : result.rows) {
    out += fmt::format("{},{}", csv_field(row.condition), row.seed);
    for (double v : row.values) out += fmt::format(",{}", v);
    out += '\n';
  }
  return out;
}

std::string format_table_summary_json(const AblationResult& result) {
  nlohmann::ordered_json conditions = nlohmann::ordered_json::array();
  for (const auto& cond : result.spec.conditions) {
    nlohmann::ordered_json entry{{"condition", cond.name}};
    std::vector<std::uint64_t> seeds;
    for (const auto& row : result.rows) {
      if (row.condition == cond.name) seeds.push_back(row.seed);
    }
    entry["runs"] = seeds.size();
    entry["seeds"] = seeds;
    for (std::size_t m = 0; m < result.spec.metrics.size(); ++m) {
      std::vector<double> values;
      for (const auto& row : result.rows) {
        if (row.condition == cond.name) values.push_back(row.values[m]);
      }
      const auto s = mean_stddev(values);
      entry[result.spec.metrics[m]] = {{"mean", s.mean}, {"stddev", s.stddev}};
    }
    conditions.push_back(std::move(entry));
  }
  nlohmann::ordered_json doc{{"grid", std::string(to_string(result.spec.grid))},
                             {"config_hash", fmt::format("{:016x}", result.config_hash)},
                             {"conditions", conditions}};
  return doc.dump(2) + "\n";
}

std::size_t thread_limit() {
  if (const char* env = std::getenv("LOPE_THREADS"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const auto v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace lope::cli
