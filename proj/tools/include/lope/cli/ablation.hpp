#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lope/cli/metrics.hpp"
#include "lope/config.hpp"

namespace lope::cli {

enum class Grid : std::uint8_t { Noise, Compensation, Ratio, Mask, Experts, Baseline };

std::string_view to_string(Grid grid);
Grid parse_grid(std::string_view name);
std::vector<Grid> all_grids();

struct Condition {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;  // config key, value
};

struct GridSpec {
  Grid grid = Grid::Mask;
  std::vector<Condition> conditions;
  std::vector<std::string> metrics;  // table columns after condition and seed
};

/// Conditions of a grid for the given base config:
///   noise         none + {continuous, discrete, hybrid} x levels {0.035, 0.05, 0.08}
///   compensation  compensated normal experts 0..all
///   ratio         hybrid injection ratio {0.035, 0.05, 0.10, 0.15}
///   mask          the base config alone
///   experts       NE=3,PE=1 / NE=3,PE=2 / NE=2,PE=2
///   baseline      LoPE against the single-stage baseline
GridSpec grid_spec(Grid grid, const config::ExperimentConfig& base);

struct AblationRow {
  std::string condition;
  std::uint64_t seed = 0;
  std::vector<double> values;  // aligned with GridSpec::metrics
};

struct AblationResult {
  GridSpec spec;
  std::uint64_t config_hash = 0;
  std::vector<AblationRow> rows;  // condition-major, then seed
  std::vector<RunReport> runs;    // training curves, same order
};

/// Seeds are base.seed, base.seed + 1, ... Conditions run on up to `threads`
/// worker threads; results do not depend on the thread count.
AblationResult run_ablation(const config::ExperimentConfig& base, Grid grid, std::size_t seeds,
                            std::size_t threads,
                            const std::function<void(const AblationRow&)>& progress = {});

/// Tidy table: condition,seed,<metrics...>.
std::string format_table_csv(const AblationResult& result);

/// Per condition mean and stddev of every metric.
std::string format_table_summary_json(const AblationResult& result);

/// LOPE_THREADS if set and positive, else the hardware concurrency (at least 1).
std::size_t thread_limit();

}  // namespace lope::cli
