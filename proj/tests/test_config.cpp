#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "tail/config.hpp"
#include "tail/errors.hpp"

using namespace tail;
using json = nlohmann::json;

TEST_CASE("profiles validate and round-trip through JSON") {
  for (const std::string& name : profile_names()) {
    CAPTURE(name);
    const ExperimentConfig c = load_config(name);
    CHECK(c.profile == name);
    CHECK(c.train.seed == c.bench.seeds.train_seed);
    CHECK(experiment_config_from_json(to_json(c)) == c);
  }
}

TEST_CASE("partial config falls back to the profile") {
  const ExperimentConfig c = experiment_config_from_json({{"train", {{"epochs", 7}}}});
  ExperimentConfig want = load_config("desk-defaults");
  want.train.epochs = 7;
  CHECK(c == want);

  const ExperimentConfig p = experiment_config_from_json({{"profile", "paper-defaults"}});
  CHECK(p.policy.embed_dim == 768);
}

TEST_CASE("unknown keys are rejected at every level") {
  CHECK_THROWS_AS(experiment_config_from_json({{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"policy", {{"bogus", 1}}}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"bench", {{"seeds", {{"bogus", 1}}}}}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"curriculum", {{"bogus", 1}}}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"train", {{"seed", 3}}}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"profile", "nope"}}), ConfigError);
}

TEST_CASE("seeds must be distinct") {
  CHECK_THROWS_AS(experiment_config_from_json({{"bench", {{"seeds", {{"eval_seed", 0}}}}}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"bench", {{"seeds", {{"data_seed", 2000}}}}}}), ConfigError);
  CHECK_NOTHROW(experiment_config_from_json({{"bench", {{"seeds", {{"train_seed", 42}}}}}}));
}

TEST_CASE("curriculum cross-checks") {
  CHECK_THROWS_AS(experiment_config_from_json({{"curriculum", {{"stages", {"spatial", "nowhere"}}}}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"curriculum", {{"stages", {"goal", "goal"}}}}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"curriculum", {{"stages", {"kitchen"}}}}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"curriculum", {{"pretrain", "spatial"}}}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"curriculum", {{"long_horizon", "goal"}}}}), ConfigError);
  CHECK_NOTHROW(experiment_config_from_json({{"curriculum", {{"long_horizon", ""}}}}));
}

TEST_CASE("suite capacity and adapter shapes are config errors") {
  json j = to_json(load_config("desk-defaults"));
  j["bench"]["suites"][3]["tasks"] = 9;  // object suite, 4 objects
  CHECK_THROWS_AS(experiment_config_from_json(j), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"adapter", {{"lora_rank", 100000}}}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"bench", {{"train_per_task", 50}}}}), ConfigError);
}

TEST_CASE("strategy names") {
  const AdapterSpec base;
  CHECK(resolve_strategy("tail-lora", base).name == "tail-lora");
  CHECK(resolve_strategy("lora", base).name == "tail-lora");
  const StrategyChoice c = resolve_strategy("tail-prefix+lora", base);
  CHECK(c.name == "tail-lora+prefix");
  CHECK(c.strategy == Strategy::tail);
  CHECK(c.adapter.has(AdapterMethod::prefix));
  CHECK(c.adapter.has(AdapterMethod::lora));
  for (const char* s : {"fft", "fpf", "er", "ewc"}) {
    CAPTURE(s);
    CHECK(resolve_strategy(s, base).name == s);
    CHECK(resolve_strategy(s, base).strategy == strategy_from_name(s));
  }
  CHECK_THROWS_AS(resolve_strategy("tail-", base), ConfigError);
  CHECK_THROWS_AS(resolve_strategy("tail-lora+", base), ConfigError);
  CHECK_THROWS_AS(resolve_strategy("dropout", base), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"curriculum", {{"strategy", "nope"}}}}), ConfigError);
}

TEST_CASE("trainable fractions of the shipped profiles") {
  const ExperimentConfig desk = load_config("desk-defaults");
  const double f = count_trainable(desk.policy, desk.adapter, Strategy::tail).fraction();
  CHECK(f > 0.005);
  CHECK(f < 0.05);
  CHECK(count_trainable(desk.policy, desk.adapter, Strategy::fft).fraction() == 1.0);

  const ExperimentConfig paper = load_config("paper-defaults");
  const double pf = count_trainable(paper.policy, paper.adapter, Strategy::tail).fraction();
  CHECK(pf >= 0.01);
  CHECK(pf <= 0.02);
}

TEST_CASE("suite generation is keyed by data_seed") {
  ExperimentConfig c = load_config("desk-defaults");
  c.bench.demos_per_task = 3;
  c.bench.train_per_task = 2;
  const SuiteConfig& spatial = c.bench.suite("spatial");
  const SuiteDataset a = generate_suite(c, spatial);
  const SuiteDataset b = generate_suite(c, spatial);
  REQUIRE(a.tasks.size() == 8);
  CHECK(a.tasks[0].train.size() == 2);
  CHECK(a.tasks[0].val.size() == 1);
  CHECK(a.tasks[3].train[1].actions == b.tasks[3].train[1].actions);

  c.bench.seeds.data_seed = 1001;
  const SuiteDataset d = generate_suite(c, spatial);
  CHECK(d.tasks[0].train[0].perception.row(0) != a.tasks[0].train[0].perception.row(0));
  CHECK_THROWS_AS(c.bench.suite("nope"), ConfigError);
}

TEST_CASE("split_tasks gives one stage per task") {
  ExperimentConfig c = load_config("desk-defaults");
  c.bench.demos_per_task = 2;
  c.bench.train_per_task = 1;
  const SuiteDataset lh = generate_suite(c, c.bench.suite("libero10"));
  const auto parts = split_tasks(lh);
  REQUIRE(parts.size() == lh.tasks.size());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    CHECK(parts[i].tasks.size() == 1);
    CHECK(parts[i].tasks[0].task.task_id == lh.tasks[i].task.task_id);
    CHECK(parts[i].suite_id != parts[(i + 1) % parts.size()].suite_id);
  }
}

TEST_CASE("shipped config files load") {
  const std::filesystem::path dir = TAIL_CONFIG_DIR;
  int n = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() != ".json") continue;
    CAPTURE(e.path().string());
    CHECK_NOTHROW(load_config(e.path().string()));
    ++n;
  }
  CHECK(n > 0);
  CHECK_THROWS_AS(load_config((dir / "missing.json").string()), ConfigError);
}
