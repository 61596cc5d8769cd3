// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Pipeline runs are shared between criteria when their
// resolved configs coincide.

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <bit>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lope/adapter.hpp"
#include "lope/cli/ablation.hpp"
#include "lope/cli/metrics.hpp"
#include "lope/config.hpp"
#include "lope/noise.hpp"
#include "lope/pipeline.hpp"
#include "lope/training.hpp"

namespace {

using namespace lope;
using Clock = std::chrono::steady_clock;
using adapter::DependencyVector;
using adapter::LopeLayer;
using numerics::Matrix;
using numerics::RngStream;
using numerics::Vector;

constexpr std::size_t kSeeds = 5;
constexpr double kSlack = 0.005;  // 0.5 pp

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// Pipeline runs

struct RunResult {
  pipeline::EvalResult eval;
  training::TrainReport report;
  std::string checkpoint_bytes;
  double seconds = 0.0;
};

config::ExperimentConfig base_config() {
  config::ExperimentConfig c;
  c.record_wall_time = false;
  return c;
}

config::ExperimentConfig with(config::ExperimentConfig c, const cli::Condition& cond,
                              std::uint64_t seed) {
  for (const auto& [k, v] : cond.overrides) config::set_value(c, k, v);
  config::set_value(c, "seed", std::to_string(seed));
  return c;
}

RunResult run_once(const config::ExperimentConfig& cfg) {
  const auto start = Clock::now();
  const auto data = pipeline::make_data(cfg);
  auto run = pipeline::run_pipeline(cfg, data);
  RunResult r;
  r.eval = pipeline::evaluate(cfg, run.checkpoint, data.split.eval);
  r.report = std::move(run.report);
  r.checkpoint_bytes = training::serialize_checkpoint(run.checkpoint);
  r.seconds = seconds_since(start);
  return r;
}

class RunCache {
 public:
  // Runs every not-yet-cached config on up to `threads` workers.
  void prefetch(const std::vector<config::ExperimentConfig>& configs, std::size_t threads) {
    std::vector<const config::ExperimentConfig*> todo;
    std::set<std::string> seen;
    for (const auto& c : configs) {
      const auto key = config::serialize(c);
      if (cache_.contains(key) || !seen.insert(key).second) continue;
      todo.push_back(&c);
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    auto worker = [&] {
      for (std::size_t i; (i = next.fetch_add(1)) < todo.size();) {
        auto r = run_once(*todo[i]);
        std::lock_guard lock(mu);
        cache_.emplace(config::serialize(*todo[i]), std::move(r));
      }
    };
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < std::min(threads, todo.size()); ++t) pool.emplace_back(worker);
  }

  const RunResult& get(const config::ExperimentConfig& cfg) {
    const auto key = config::serialize(cfg);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, run_once(cfg)).first;
    return it->second;
  }

  void put(const config::ExperimentConfig& cfg, RunResult r) {
    cache_.emplace(config::serialize(cfg), std::move(r));
  }

 private:
  std::map<std::string, RunResult> cache_;
};

struct ConditionStats {
  std::string name;
  std::vector<double> masked, nocomp, unmasked;
  double seconds = 0.0;

  double mean(const std::vector<double>& v) const { return cli::mean_stddev(v).mean; }
};

ConditionStats collect(RunCache& cache, const cli::Condition& cond) {
  ConditionStats s{cond.name, {}, {}, {}, 0.0};
  const auto base = base_config();
  for (std::size_t k = 0; k < kSeeds; ++k) {
    const auto& r = cache.get(with(base, cond, base.seed + k));
    s.masked.push_back(r.eval.masked);
    s.nocomp.push_back(r.eval.masked_nocomp);
    s.unmasked.push_back(r.eval.unmasked);
    s.seconds += r.seconds;
  }
  return s;
}

const cli::Condition& find_condition(const cli::GridSpec& spec, const std::string& name) {
  for (const auto& c : spec.conditions) {
    if (c.name == name) return c;
  }
  throw std::runtime_error("missing grid condition " + name);
}

// ---------------------------------------------------------------------------
// Random layers for the algebraic checks

LopeLayer random_layer(RngStream& rng) {
  const std::size_t n = 2 + rng.index(5);
  const std::size_t poisons = 1 + rng.index(std::min<std::size_t>(2, n - 1));
  std::vector<std::size_t> poison;
  for (std::size_t p = n - poisons; p < n; ++p) poison.push_back(p);
  const std::size_t d_in = 1 + rng.index(6), d_out = 1 + rng.index(5), r = 1 + rng.index(4);
  const std::size_t k = 1 + rng.index(n - poisons);
  std::vector<Matrix> experts;
  for (std::size_t i = 0; i < n; ++i) experts.push_back(numerics::random_normal(d_out, r, 1.0, rng));
  return {numerics::random_normal(d_out, d_in, 1.0, rng), numerics::random_normal(r, d_in, 1.0, rng),
          std::move(experts), numerics::random_normal(r, n, 1.5, rng), std::move(poison), k};
}

Vector random_vector(std::size_t n, RngStream& rng) {
  Vector v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

DependencyVector random_theta(const LopeLayer& layer, RngStream& rng) {
  auto dep = DependencyVector::zeros(layer.num_experts());
  for (auto i : layer.normal_experts()) dep.theta[i] = rng.uniform(-0.95, 0.95);
  return dep;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome gradient_oracle() {
  const auto start = Clock::now();
  const auto report = training::grad_check_suite(614);
  const double secs = seconds_since(start);
  std::size_t fewest = SIZE_MAX;
  for (const char* regime : {"stage1", "stage2", "stage2_compensated", "inference"}) {
    fewest = std::min(fewest, report.configs_checked("layer", regime));
  }
  double worst = 0.0;
  for (const auto& e : report.entries) worst = std::max(worst, e.rel_error);
  return {report.passed() && fewest >= 20 && secs < 30.0,
          fmt::format("{} comparisons, >= {} configs per regime, worst rel error {:.2e}, {:.2f} s",
                      report.entries.size(), fewest, worst, secs)};
}

Outcome freeze_integrity(RunCache& cache) {
  const auto cfg = base_config();
  const auto& run = cache.get(cfg);
  std::vector<std::string> violations;
  std::size_t checked = 0;
  for (const auto& stage : run.report.checksums) {
    for (const auto& b : stage.blocks) {
      const bool base = b.block == "embedding" || b.block.ends_with(".W0");
      const auto expert = b.block.find(".B");
      bool guarded = base;
      if (expert != std::string::npos) {
        const auto idx = std::stoul(b.block.substr(expert + 2));
        const bool poison = idx >= cfg.model.num_experts - cfg.model.num_poison;
        guarded = stage.stage == "stage1" ? !poison : poison;
      }
      if (!guarded) continue;
      ++checked;
      if (b.before != b.after) violations.push_back(stage.stage + ":" + b.block);
    }
  }
  return {violations.empty() && checked > 0,
          fmt::format("{} guarded block checksums across both stages, {} changed{}", checked,
                      violations.size(),
                      violations.empty() ? "" : " (" + violations.front() + ")")};
}

Outcome masking_identity() {
  RngStream rng(614, 3);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto layer = random_layer(rng);
    const auto x = random_vector(layer.d_in(), rng);
    const auto theta = random_theta(layer, rng);
    const auto inf = adapter::forward_inference(layer, x, theta);

    // Stage-2 forward with omega_D forced to zero and the surviving active
    // weights renormalized; beta comes from the stage-2 rule.
    const auto g = adapter::gate(layer, x);
    const auto active = adapter::top_k_indices(g.omega, layer.normal_experts(), layer.top_k());
    double mass = 0.0;
    for (auto i : active) mass += g.omega[i];
    Vector omega(layer.num_experts(), 0.0);
    for (auto i : active) omega[i] = g.omega[i] / mass;
    adapter::ForwardOverrides o;
    o.omega = omega;
    o.active = active;
    const auto s2 = adapter::forward_stage2(layer, x, &theta, o);
    for (std::size_t j = 0; j < inf.y.size(); ++j) worst = std::max(worst, std::abs(inf.y[j] - s2.y[j]));
  }
  return {worst <= 1e-12, fmt::format("100 random pairs, max |diff| {:.2e}", worst)};
}

Outcome compensation_conservation() {
  RngStream rng(614, 4);
  double worst = 0.0;
  bool bitwise = true;
  for (int t = 0; t < 100; ++t) {
    const auto layer = random_layer(rng);
    const auto x = random_vector(layer.d_in(), rng);
    const auto theta = random_theta(layer, rng);
    const auto tr = adapter::forward_stage2(layer, x, &theta);
    double plain = 0.0, amplified = 0.0;
    for (auto i : tr.active) {
      plain += tr.omega[i];
      amplified += (1.0 + theta.theta[i]) * tr.omega[i];
    }
    worst = std::max(worst, std::abs(tr.beta * amplified - plain));

    const auto zero = DependencyVector::zeros(layer.num_experts());
    const auto comp = adapter::forward_stage2(layer, x, &zero);
    const auto none = adapter::forward_stage2(layer, x, nullptr);
    bitwise = bitwise && comp.y == none.y && comp.coefficients == none.coefficients;
  }
  return {worst <= 1e-12 && bitwise,
          fmt::format("max |beta*sum - sum| {:.2e}, theta=0 bitwise {}", worst, bitwise ? "yes" : "no")};
}

Outcome noise_statistics() {
  noise::DiscreteNoiseSpec spec;
  spec.ops = {noise::NoiseOp::Shuffle, noise::NoiseOp::Insert, noise::NoiseOp::Delete,
              noise::NoiseOp::Replace};
  spec.rate = 0.05;
  for (noise::Token t = 0; t < 32; ++t) spec.alphabet.push_back(t);
  RngStream rng(614, 5);
  std::size_t edits = 0, positions = 0;
  for (int c = 0; c < 1000; ++c) {
    noise::TokenSeq seq(100);
    for (auto& tok : seq) tok = static_cast<noise::Token>(rng.index(32));
    edits += noise::inject_discrete(seq, spec, rng).manifest.size();
    positions += seq.size();
  }
  const double rate = static_cast<double>(edits) / static_cast<double>(positions);

  const double alpha = 0.05;
  const auto e = numerics::random_normal(2000, 16, 2.0, rng);
  std::vector<std::uint8_t> mask(e.rows());
  for (auto& m : mask) m = rng.bernoulli(0.8) ? 1 : 0;
  const auto out = noise::inject_continuous(e, mask, noise::ContinuousNoiseSpec{alpha}, rng);
  double sup = 0.0;
  bool untouched = true;
  for (std::size_t t = 0; t < e.rows(); ++t) {
    for (std::size_t j = 0; j < e.cols(); ++j) {
      if (mask[t] == 0) {
        untouched = untouched && std::bit_cast<std::uint64_t>(out(t, j)) == std::bit_cast<std::uint64_t>(e(t, j));
      } else {
        sup = std::max(sup, std::abs(out(t, j) - e(t, j)));
      }
    }
  }
  return {rate >= 0.045 && rate <= 0.055 && sup <= alpha && untouched,
          fmt::format("edit rate {:.4f} over {} positions, sup |delta| {:.6f} <= {}, masked rows {}",
                      rate, positions, sup, alpha, untouched ? "bitwise unchanged" : "CHANGED")};
}

Outcome determinism(RunCache& cache) {
  const auto cfg = base_config();
  auto csv = [](const RunResult& r) {
    std::vector<cli::RunReport> runs = {{"default", 614, r.report}};
    return cli::format_metrics_csv(runs);
  };
  auto a = run_once(cfg);
  auto b = run_once(cfg);
  const bool ckpt = a.checkpoint_bytes == b.checkpoint_bytes;
  const bool metrics = csv(a) == csv(b);
  const auto bytes = a.checkpoint_bytes.size();
  cache.put(cfg, std::move(a));
  return {ckpt && metrics, fmt::format("checkpoint {} bytes {}, metrics CSV {}", bytes,
                                       ckpt ? "identical" : "DIFFER", metrics ? "identical" : "DIFFER")};
}

Outcome masking_direction(RunCache& cache) {
  const auto s = collect(cache, {"default", {}});
  const double m = s.mean(s.masked), nc = s.mean(s.nocomp), um = s.mean(s.unmasked);
  std::size_t wins = 0;
  for (std::size_t k = 0; k < kSeeds; ++k) wins += s.masked[k] > s.unmasked[k] ? 1 : 0;
  const bool pass = m >= nc && nc >= um - kSlack && wins >= 4 && s.seconds < 600.0;
  return {pass, fmt::format("masked {:.4f}, masked-nocomp {:.4f}, unmasked {:.4f}; masked wins {}/{}; {:.0f} s",
                            m, nc, um, wins, kSeeds, s.seconds)};
}

Outcome noise_ordering(RunCache& cache) {
  const auto spec = cli::grid_spec(cli::Grid::Noise, base_config());
  std::map<std::string, double> mean;
  for (const char* name : {"none", "continuous@0.05", "discrete@0.05", "hybrid@0.05"}) {
    const auto s = collect(cache, find_condition(spec, name));
    mean[name] = s.mean(s.masked);
  }
  const double h = mean["hybrid@0.05"], d = mean["discrete@0.05"], c = mean["continuous@0.05"],
               n = mean["none"];
  const bool pass = h >= d && d >= n - kSlack && h >= c && c >= n - kSlack;
  return {pass, fmt::format("hybrid {:.4f}, discrete {:.4f}, continuous {:.4f}, none {:.4f}", h, d, c, n)};
}

Outcome ratio_sweep(RunCache& cache) {
  const auto spec = cli::grid_spec(cli::Grid::Ratio, base_config());
  std::string best;
  double best_acc = -1.0;
  std::string detail;
  for (const auto& cond : spec.conditions) {
    const auto s = collect(cache, cond);
    const double m = s.mean(s.masked);
    detail += fmt::format("{}{} {:.4f}", detail.empty() ? "" : ", ", cond.name, m);
    if (m > best_acc) {
      best_acc = m;
      best = cond.name;
    }
  }
  return {best != "ratio=0.15", detail + "; best " + best};
}

Outcome expert_grid() {
  auto base = base_config();
  for (const auto& [k, v] : std::vector<std::pair<std::string, std::string>>{
           {"data.train_size", "200"}, {"data.eval_size", "100"}, {"data.calib_size", "20"},
           {"stage1.epochs", "2"}, {"stage2.epochs", "2"}}) {
    config::set_value(base, k, v);
  }
  const auto result = cli::run_ablation(base, cli::Grid::Experts, 2, cli::thread_limit());
  const std::vector<std::string> want = {"NE=3,PE=1", "NE=3,PE=2", "NE=2,PE=2"};
  std::vector<std::string> got;
  for (const auto& c : result.spec.conditions) got.push_back(c.name);

  const auto summary = nlohmann::json::parse(cli::format_table_summary_json(result));
  std::size_t with_means = 0;
  for (const auto& c : summary.at("conditions")) {
    bool complete = true;
    for (const auto& m : result.spec.metrics) complete = complete && c.at(m).contains("mean");
    with_means += complete ? 1 : 0;
  }
  const bool rows = result.rows.size() == want.size() * 2;
  return {got == want && with_means == want.size() && rows,
          fmt::format("conditions [{}], {} with per-metric means, {} rows", fmt::join(got, "; "),
                      with_means, result.rows.size())};
}

}  // namespace

int main() {
  RunCache cache;
  // Warm the cache for the long criteria so spare cores are used.
  {
    const auto base = base_config();
    std::vector<config::ExperimentConfig> configs;
    std::vector<cli::Condition> conds = {{"default", {}}};
    const auto noise = cli::grid_spec(cli::Grid::Noise, base);
    for (const char* name : {"none", "continuous@0.05", "discrete@0.05"}) {
      conds.push_back(find_condition(noise, name));
    }
    for (const auto& c : cli::grid_spec(cli::Grid::Ratio, base).conditions) conds.push_back(c);
    for (const auto& c : conds) {
      for (std::size_t k = 1; k < kSeeds; ++k) configs.push_back(with(base, c, base.seed + k));
      configs.push_back(with(base, c, base.seed));
    }
    if (cli::thread_limit() > 1) cache.prefetch(configs, cli::thread_limit());
  }

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> check;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient oracle", gradient_oracle},
      {2, "freeze integrity", [&] { return freeze_integrity(cache); }},
      {3, "masking identity", masking_identity},
      {4, "compensation conservation", compensation_conservation},
      {5, "noise statistics", noise_statistics},
      {6, "determinism", [&] { return determinism(cache); }},
      {7, "masking direction", [&] { return masking_direction(cache); }},
      {8, "noise type ordering", [&] { return noise_ordering(cache); }},
      {9, "injection ratio sweep", [&] { return ratio_sweep(cache); }},
      {10, "expert grid harness", expert_grid},
  };
  // Criterion 6 runs first so its fresh runs seed the cache for 2 and 7.
  const std::vector<std::size_t> order = {0, 5, 1, 2, 3, 4, 6, 7, 8, 9};
  std::vector<std::string> lines(criteria.size());
  int failed = 0;
  for (auto idx : order) {
    const auto& c = criteria[idx];
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failed;
    lines[idx] = fmt::format("criterion {:>2} {:<26} {}  {}", c.id, c.name, o.pass ? "PASS" : "FAIL", o.detail);
    fmt::print(stderr, "[done] {}\n", lines[idx]);
  }
  for (const auto& l : lines) fmt::print("{}\n", l);
  fmt::print("{} of {} criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
  return failed == 0 ? 0 : 1;
}
