#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tail/adapters.hpp"
#include "tail/bench.hpp"
#include "tail/harness.hpp"

namespace tail {

struct SuiteConfig {
  std::string id;
  SuiteKind kind = SuiteKind::pretrain;
  Index tasks = 8;
  std::uint64_t seed = 0;  // task-definition stream, mixed with data_seed

  bool operator==(const SuiteConfig&) const = default;
};

struct Seeds {
  std::uint64_t data_seed = 1000;
  std::uint64_t train_seed = 0;
  std::uint64_t eval_seed = 2000;

  bool operator==(const Seeds&) const = default;
};

struct BenchConfig {
  BenchParams params;
  Index demos_per_task = 50;
  Index train_per_task = 40;
  Seeds seeds;
  std::vector<SuiteConfig> suites;

  // Throws ConfigError for unknown ids.
  const SuiteConfig& suite(const std::string& id) const;
  bool operator==(const BenchConfig&) const = default;
};

struct CurriculumConfig {
  std::string pretrain = "kitchen";
  Index pretrain_epochs = 100;
  std::vector<std::string> stages;   // setup (1): sequential suites
  std::string long_horizon;          // setup (2): one stage per task; empty disables
  std::string strategy = "tail-lora";
  std::string base_digest;           // optional pin checked by adapt

  bool operator==(const CurriculumConfig&) const = default;
};

struct ExperimentConfig {
  std::string profile = "desk-defaults";
  PolicySpec policy;
  AdapterSpec adapter;
  TrainConfig train;
  BenchConfig bench;
  CurriculumConfig curriculum;

  // Cross-section checks: distinct seeds, known stage ids, suite capacities,
  // adapter shapes against the host. Throws ConfigError.
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

// Built-in profiles: "desk-defaults" and "paper-defaults".
ExperimentConfig profile_config(const std::string& name);
std::vector<std::string> profile_names();

nlohmann::json to_json(const ExperimentConfig& c);
// Missing keys take the values of the named profile (desk-defaults unless
// "profile" says otherwise); unknown keys are a ConfigError.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
// A file path or a profile name.
ExperimentConfig load_config(const std::string& path_or_profile);

// tail-<methods> (methods joined by '+', e.g. tail-lora+prefix), the bare
// method names, or fft / fpf / er / ewc.
struct StrategyChoice {
  std::string name;  // canonical
  Strategy strategy = Strategy::tail;
  AdapterSpec adapter;
};
StrategyChoice resolve_strategy(const std::string& name, const AdapterSpec& base);

Perception make_perception(const ExperimentConfig& c);
std::vector<TaskSpec> make_tasks(const ExperimentConfig& c, const SuiteConfig& s);
SuiteDataset generate_suite(const ExperimentConfig& c, const SuiteConfig& s, int workers = 1);

// Per-task slices of a long-horizon suite, one stage each.
std::vector<SuiteDataset> split_tasks(const SuiteDataset& d);

}  // namespace tail
