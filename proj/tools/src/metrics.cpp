#include "lope/cli/metrics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "lope/errors.hpp"
#include "lope/io.hpp"

namespace lope::cli {

Stat mean_stddev(std::span<const double> values) {
  Stat s;
  s.n = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  if (s.n > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(s.n - 1));
  }
  return s;
}

std::string csv_field(std::string_view value) {
  if (value.find_first_of(",\"\n") == std::string_view::npos) return std::string(value);
  std::string out = "\"";
  for (char c : value) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string format_metrics_csv(std::span<const RunReport> runs) {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const auto& run : runs) {
    for (const auto& e : run.report.epochs) {
      out += fmt::format("{},{},{},{},{},{},{},{}\n", csv_field(run.condition), run.seed, e.stage,
                         e.epoch, e.loss, e.train_acc, e.eval_acc, e.wall_ms);
    }
  }
  return out;
}

std::string format_summary_json(std::span<const RunReport> runs, std::uint64_t config_hash) {
  std::vector<std::string> order;
  for (const auto& r : runs) {
    if (std::find(order.begin(), order.end(), r.condition) == order.end()) order.push_back(r.condition);
  }
  nlohmann::ordered_json conditions = nlohmann::ordered_json::array();
  for (const auto& name : order) {
    std::vector<double> loss, train, eval;
    std::vector<std::uint64_t> seeds;
    for (const auto& r : runs) {
      if (r.condition != name || r.report.epochs.empty()) continue;
      const auto& last = r.report.epochs.back();
      loss.push_back(last.loss);
      train.push_back(last.train_acc);
      eval.push_back(last.eval_acc);
      seeds.push_back(r.seed);
    }
    auto stat = [](std::span<const double> v) {
      const auto s = mean_stddev(v);
      return nlohmann::ordered_json{{"mean", s.mean}, {"stddev", s.stddev}};
    };
    conditions.push_back({{"condition", name},
                          {"runs", seeds.size()},
                          {"seeds", seeds},
                          {"final_loss", stat(loss)},
                          {"final_train_acc", stat(train)},
                          {"final_eval_acc", stat(eval)}});
  }
  nlohmann::ordered_json doc{{"config_hash", fmt::format("{:016x}", config_hash)},
                             {"conditions", conditions}};
  return doc.dump(2) + "\n";
}

void export_metrics(std::span<const RunReport> runs, std::uint64_t config_hash,
                    const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_file_atomic(dir / "metrics.csv", format_metrics_csv(runs));
  io::write_file_atomic(dir / "summary.json", format_summary_json(runs, config_hash));
}

}  // namespace lope::cli
