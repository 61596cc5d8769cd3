#include "lope/config.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <charconv>
#include <functional>
#include <set>

#include "lope/errors.hpp"
#include "lope/io.hpp"

namespace lope::config {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ValidationError(fmt::format("{}: '{}' is not a valid number", key, value));
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ValidationError(fmt::format("{}: expected true or false, got '{}'", key, value));
}

std::vector<noise::NoiseOp> parse_ops(std::string_view key, std::string_view value) {
  std::vector<noise::NoiseOp> ops;
  if (value == "none") return ops;
  while (!value.empty()) {
    const auto comma = value.find(',');
    const auto item = trim(value.substr(0, comma));
    try {
      ops.push_back(noise::parse_noise_op(item));
    } catch (const std::exception& e) {
      throw ValidationError(fmt::format("{}: {}", key, e.what()));
    }
    if (comma == std::string_view::npos) break;
    value.remove_prefix(comma + 1);
  }
  return ops;
}

std::string format_ops(const std::vector<noise::NoiseOp>& ops) {
  if (ops.empty()) return "none";
  std::vector<std::string_view> names;
  for (auto op : ops) names.push_back(noise::to_string(op));
  return fmt::format("{}", fmt::join(names, ","));
}

struct Field {
  std::string key;
  std::string description;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, std::string_view)> set;
};

template <typename T>
Field number_field(std::string key, std::string description, T ExperimentConfig::*member) {
  auto k = key;
  return {std::move(key), std::move(description),
          [member](const ExperimentConfig& c) { return fmt::format("{}", c.*member); },
          [member, k](ExperimentConfig& c, std::string_view v) { c.*member = parse_number<T>(k, v); }};
}

// Fields of nested structs are reached through an accessor.
template <typename T, typename Access>
Field nested_number(std::string key, std::string description, Access access) {
  auto k = key;
  return {std::move(key), std::move(description),
          [access](const ExperimentConfig& c) {
            return fmt::format("{}", access(const_cast<ExperimentConfig&>(c)));
          },
          [access, k](ExperimentConfig& c, std::string_view v) { access(c) = parse_number<T>(k, v); }};
}

template <typename Access>
Field nested_bool(std::string key, std::string description, Access access) {
  auto k = key;
  return {std::move(key), std::move(description),
          [access](const ExperimentConfig& c) {
            return std::string(access(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
          },
          [access, k](ExperimentConfig& c, std::string_view v) { access(c) = parse_bool(k, v); }};
}

template <typename Access>
Field ops_field(std::string key, std::string description, Access access) {
  auto k = key;
  return {std::move(key), std::move(description),
          [access](const ExperimentConfig& c) {
            return format_ops(access(const_cast<ExperimentConfig&>(c)));
          },
          [access, k](ExperimentConfig& c, std::string_view v) { access(c) = parse_ops(k, v); }};
}

void add_stage_fields(std::vector<Field>& f, const std::string& prefix,
                      training::StageConfig ExperimentConfig::*stage) {
  f.push_back(nested_number<std::size_t>(prefix + ".epochs", "training epochs",
                                         [stage](ExperimentConfig& c) -> auto& { return (c.*stage).epochs; }));
  f.push_back(nested_number<std::size_t>(prefix + ".batch_size", "examples per SGD step",
                                         [stage](ExperimentConfig& c) -> auto& { return (c.*stage).batch_size; }));
  f.push_back(nested_number<double>(prefix + ".lr", "SGD learning rate",
                                    [stage](ExperimentConfig& c) -> auto& { return (c.*stage).learning_rate; }));
  f.push_back(nested_number<double>(prefix + ".momentum", "SGD momentum in [0, 1)",
                                    [stage](ExperimentConfig& c) -> auto& { return (c.*stage).momentum; }));
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(number_field<std::uint64_t>("seed", "master seed for data, init and training",
                                            &ExperimentConfig::seed));

    f.push_back(nested_number<std::size_t>("task.vocab_size", "token vocabulary size V",
                                           [](ExperimentConfig& c) -> auto& { return c.task.vocab_size; }));
    f.push_back(nested_number<std::size_t>("task.min_length", "shortest generated sequence",
                                           [](ExperimentConfig& c) -> auto& { return c.task.min_length; }));
    f.push_back(nested_number<std::size_t>("task.max_length", "longest generated sequence",
                                           [](ExperimentConfig& c) -> auto& { return c.task.max_length; }));
    f.push_back(nested_number<std::size_t>("task.num_classes", "class count C",
                                           [](ExperimentConfig& c) -> auto& { return c.task.num_classes; }));
    f.push_back({"task.rule", "keyword_count or majority_symbol",
                 [](const ExperimentConfig& c) { return std::string(tasks::to_string(c.task.rule)); },
                 [](ExperimentConfig& c, std::string_view v) {
                   try {
                     c.task.rule = tasks::parse_rule(v);
                   } catch (const std::exception& e) {
                     throw ValidationError(fmt::format("task.rule: {}", e.what()));
                   }
                 }});
    f.push_back(nested_number<noise::Token>("task.keyword", "keyword token for keyword_count",
                                            [](ExperimentConfig& c) -> auto& { return c.task.keyword; }));

    f.push_back(number_field<std::size_t>("data.train_size", "training examples",
                                          &ExperimentConfig::train_size));
    f.push_back(number_field<std::size_t>("data.eval_size", "clean evaluation examples",
                                          &ExperimentConfig::eval_size));
    f.push_back(number_field<std::size_t>("data.calib_size", "clean calibration examples for theta",
                                          &ExperimentConfig::calib_size));
    f.push_back(number_field<double>("data.noise_rate", "per-position corruption rate of the training split",
                                     &ExperimentConfig::data_noise_rate));
    f.push_back(ops_field("data.noise_ops", "comma-separated ops corrupting the training split",
                          [](ExperimentConfig& c) -> auto& { return c.data_noise_ops; }));

    f.push_back(nested_number<std::size_t>("model.embed_dim", "embedding width d",
                                           [](ExperimentConfig& c) -> auto& { return c.model.embed_dim; }));
    f.push_back(nested_number<std::size_t>("model.hidden_dim", "hidden width h",
                                           [](ExperimentConfig& c) -> auto& { return c.model.hidden_dim; }));
    f.push_back(nested_number<std::size_t>("model.rank", "adapter rank r",
                                           [](ExperimentConfig& c) -> auto& { return c.model.rank; }));
    f.push_back(nested_number<std::size_t>("model.num_experts", "experts per layer, poisoning included",
                                           [](ExperimentConfig& c) -> auto& { return c.model.num_experts; }));
    f.push_back(nested_number<std::size_t>("model.num_poison", "poisoning experts per layer",
                                           [](ExperimentConfig& c) -> auto& { return c.model.num_poison; }));
    f.push_back(nested_number<std::size_t>("model.top_k", "router top-K",
                                           [](ExperimentConfig& c) -> auto& { return c.model.top_k; }));

    add_stage_fields(f, "stage1", &ExperimentConfig::stage1);
    f.push_back({"stage1.hynoise", "none, continuous, discrete or hybrid",
                 [](const ExperimentConfig& c) { return std::string(training::to_string(c.stage1.hynoise)); },
                 [](ExperimentConfig& c, std::string_view v) {
                   try {
                     c.stage1.hynoise = training::parse_hynoise(v);
                   } catch (const std::exception& e) {
                     throw ValidationError(fmt::format("stage1.hynoise: {}", e.what()));
                   }
                 }});
    f.push_back(nested_number<double>("stage1.noise_rate", "discrete injection rate",
                                      [](ExperimentConfig& c) -> auto& { return c.stage1.discrete.rate; }));
    f.push_back(ops_field("stage1.noise_ops", "discrete injection ops",
                          [](ExperimentConfig& c) -> auto& { return c.stage1.discrete.ops; }));
    f.push_back(nested_number<double>("stage1.alpha", "continuous noise bound",
                                      [](ExperimentConfig& c) -> auto& { return c.stage1.continuous.alpha; }));
    f.push_back(nested_number<double>("stage1.continuous_prob", "fraction of examples given continuous noise",
                                      [](ExperimentConfig& c) -> auto& { return c.stage1.continuous_prob; }));

    add_stage_fields(f, "stage2", &ExperimentConfig::stage2);
    f.push_back(nested_bool("stage2.compensate", "train stage 2 with dependency compensation",
                            [](ExperimentConfig& c) -> auto& { return c.stage2.compensate_during_stage2; }));

    f.push_back({"inference.compensated_experts", "normal experts keeping compensation (all or a count)",
                 [](const ExperimentConfig& c) {
                   return c.compensated_experts ? fmt::format("{}", *c.compensated_experts)
                                                : std::string("all");
                 },
                 [](ExperimentConfig& c, std::string_view v) {
                   if (v == "all") {
                     c.compensated_experts.reset();
                   } else {
                     c.compensated_experts = parse_number<std::size_t>("inference.compensated_experts", v);
                   }
                 }});
    f.push_back(nested_bool("baseline", "also train the single-stage baseline",
                            [](ExperimentConfig& c) -> auto& { return c.train_baseline; }));
    f.push_back(nested_bool("metrics.wall_time", "record per-epoch wall time (false = byte-stable CSV)",
                            [](ExperimentConfig& c) -> auto& { return c.record_wall_time; }));
    return f;
  }();
  return table;
}

const Field& find_field(std::string_view key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ValidationError(fmt::format("unknown config key '{}'", key));
}

}  // namespace

void ExperimentConfig::validate() const {
  task.validate();
  model.validate();
  if (model.vocab_size != task.vocab_size || model.num_classes != task.num_classes) {
    throw ValidationError("model vocabulary and classes must match the task");
  }
  if (train_size == 0 || eval_size == 0 || calib_size == 0) {
    throw ValidationError("data.train_size, data.eval_size and data.calib_size must be positive");
  }
  data_noise().validate();
  stage1_config().validate();
  stage2_config().validate();
  if (compensated_experts && *compensated_experts > model.num_experts - model.num_poison) {
    throw ValidationError(fmt::format("inference.compensated_experts {} exceeds the {} normal experts",
                                      *compensated_experts, model.num_experts - model.num_poison));
  }
}

noise::DiscreteNoiseSpec ExperimentConfig::data_noise() const {
  noise::DiscreteNoiseSpec spec;
  spec.ops = data_noise_ops;
  spec.rate = data_noise_rate;
  spec.seed = seed;
  for (std::size_t t = 0; t < task.vocab_size; ++t) spec.alphabet.push_back(static_cast<noise::Token>(t));
  return spec;
}

training::StageConfig ExperimentConfig::stage1_config() const {
  auto c = stage1;
  c.seed = seed;
  c.discrete.seed = seed;
  c.discrete.alphabet.clear();
  for (std::size_t t = 0; t < task.vocab_size; ++t) c.discrete.alphabet.push_back(static_cast<noise::Token>(t));
  return c;
}

training::StageConfig ExperimentConfig::stage2_config() const {
  auto c = stage2;
  c.seed = seed;
  c.hynoise = training::HyNoiseType::None;
  return c;
}

void set_value(ExperimentConfig& config, std::string_view key, std::string_view value) {
  find_field(key).set(config, trim(value));
  config.task.seed = config.seed;
  config.model.vocab_size = config.task.vocab_size;
  config.model.num_classes = config.task.num_classes;
}

std::string serialize(const ExperimentConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += fmt::format("{} = {}\n", f.key, f.get(config));
  return out;
}

ExperimentConfig parse(std::string_view text) {
  ExperimentConfig config;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    auto line = trim(text.substr(0, nl));
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ValidationError(fmt::format("config line {}: expected 'key = value'", line_no));
    }
    const auto key = trim(line.substr(0, eq));
    if (!seen.emplace(key).second) {
      throw ValidationError(fmt::format("config line {}: key '{}' given twice", line_no, key));
    }
    try {
      set_value(config, key, line.substr(eq + 1));
    } catch (const ValidationError& e) {
      throw ValidationError(fmt::format("config line {}: {}", line_no, e.what()));
    }
  }
  config.task.seed = config.seed;
  config.validate();
  return config;
}

ExperimentConfig load(const std::filesystem::path& path) {
  try {
    return parse(io::read_file(path));
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  const auto text = serialize(config);
  return numerics::fnv1a(std::as_bytes(std::span(text.data(), text.size())));
}

std::vector<KeyDoc> documented_keys() {
  const ExperimentConfig defaults;
  std::vector<KeyDoc> out;
  for (const auto& f : fields()) out.push_back({f.key, f.get(defaults), f.description});
  return out;
}

}  // namespace lope::config
