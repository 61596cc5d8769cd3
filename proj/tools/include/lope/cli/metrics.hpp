#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lope/training.hpp"

namespace lope::cli {

inline constexpr std::string_view kMetricsHeader =
    "condition,seed,stage,epoch,loss,train_acc,eval_acc,wall_ms";

struct RunReport {
  std::string condition;
  std::uint64_t seed = 0;
  training::TrainReport report;
};

struct Stat {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

Stat mean_stddev(std::span<const double> values);

/// Quotes a CSV field when it contains a comma, quote or newline.
std::string csv_field(std::string_view value);

/// One row per condition x seed x epoch, in input order.
std::string format_metrics_csv(std::span<const RunReport> runs);

/// Per condition (first-appearance order): run count and mean/stddev of the
/// final epoch's loss, train_acc and eval_acc across seeds.
std::string format_summary_json(std::span<const RunReport> runs, std::uint64_t config_hash);

/// Writes metrics.csv and summary.json into `dir` (atomically).
void export_metrics(std::span<const RunReport> runs, std::uint64_t config_hash,
                    const std::filesystem::path& dir);

}  // namespace lope::cli
