#include "tail/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "tail/checkpoint.hpp"
#include "tail/errors.hpp"
#include "tail/json_util.hpp"

namespace tail {

using json = nlohmann::json;

const SuiteConfig& BenchConfig::suite(const std::string& id) const {
  for (const SuiteConfig& s : suites)
    if (s.id == id) return s;
  throw ConfigError("no suite with id '" + id + "' in bench.suites");
}

void ExperimentConfig::validate() const {
  policy.validate();
  train.validate();
  const Seeds& s = bench.seeds;
  if (s.data_seed == s.train_seed || s.data_seed == s.eval_seed || s.train_seed == s.eval_seed)
    throw ConfigError("bench.seeds: data_seed, train_seed and eval_seed must be distinct");
  if (bench.demos_per_task < 2 || bench.train_per_task < 1 || bench.train_per_task >= bench.demos_per_task)
    throw ConfigError("bench: need 1 <= train_per_task < demos_per_task");
  if (bench.params.n_objects < 1) throw ConfigError("bench.params.n_objects must be >= 1");

  std::set<std::string> ids;
  for (const SuiteConfig& suite : bench.suites) {
    if (suite.id.empty() || suite.id.find_first_of("/\\., ") != std::string::npos)
      throw ConfigError("bench.suites: bad suite id '" + suite.id + "'");
    if (!ids.insert(suite.id).second) throw ConfigError("bench.suites: duplicate id '" + suite.id + "'");
    make_tasks(*this, suite);  // capacity check
  }
  if (bench.suite(curriculum.pretrain).kind != SuiteKind::pretrain)
    throw ConfigError("curriculum.pretrain must name a suite of kind pretrain");
  if (curriculum.pretrain_epochs < 1) throw ConfigError("curriculum.pretrain_epochs must be >= 1");
  std::set<std::string> seen;
  for (const std::string& id : curriculum.stages) {
    bench.suite(id);
    if (id == curriculum.pretrain) throw ConfigError("curriculum.stages must not repeat the pretraining suite");
    if (!seen.insert(id).second) throw ConfigError("curriculum.stages lists '" + id + "' twice");
  }
  if (!curriculum.long_horizon.empty() && bench.suite(curriculum.long_horizon).kind != SuiteKind::long_horizon)
    throw ConfigError("curriculum.long_horizon must name a suite of kind long_horizon");
  const StrategyChoice choice = resolve_strategy(curriculum.strategy, adapter);
  if (choice.strategy == Strategy::tail) choice.adapter.validate(policy);
}

// ---- profiles ------------------------------------------------------------------------

namespace {

ExperimentConfig desk_defaults() {
  ExperimentConfig c;
  c.profile = "desk-defaults";
  c.policy.perception_tokens = 2;
  c.policy.max_seq_len = 4;
  c.policy.gmm_min_std = 0.03;

  c.adapter.lora_rank = 2;
  c.adapter.bottleneck_size = 4;
  c.adapter.roboadapter_size = 8;
  c.adapter.roboadapter_encoder_layers = {0, 1};
  c.adapter.roboadapter_decoder_layers = {0, 1};
  c.adapter.prefix_len = 4;
  c.adapter.prefix_rank = 4;

  c.train.epochs = 30;
  c.train.long_horizon_epochs = 30;
  c.train.lr = 3e-3;
  c.train.warmup_steps = 50;

  c.bench.suites = {{"kitchen", SuiteKind::pretrain, 16, 1},  {"spatial", SuiteKind::spatial, 8, 2},
                    {"goal", SuiteKind::goal, 8, 3},          {"object", SuiteKind::object, 4, 4},
                    {"living", SuiteKind::pretrain, 8, 5},    {"study", SuiteKind::pretrain, 8, 6},
                    {"libero10", SuiteKind::long_horizon, 4, 7}};
  c.curriculum.pretrain = "kitchen";
  c.curriculum.pretrain_epochs = 40;
  c.curriculum.stages = {"spatial", "goal", "object", "living", "study"};
  c.curriculum.long_horizon = "libero10";
  return c;
}

ExperimentConfig paper_defaults() {
  ExperimentConfig c;
  c.profile = "paper-defaults";
  PolicySpec& p = c.policy;
  p.embed_dim = 768;
  p.perception_layers = 12;
  p.perception_heads = 12;
  p.perception_tokens = 4;
  p.decoder_layers = 6;
  p.decoder_heads = 8;
  p.max_seq_len = 8;
  p.gmm_modes = 5;
  p.gmm_min_std = 1e-4;
  p.dropout = 0.15;
  p.film_layers = 2;
  p.fusion_hidden = 256;
  p.head_hidden = 256;
  p.perception_lora_rank = 8;
  p.perception_lora_alpha = 8.0;

  // AdapterSpec defaults are the Appendix B.2 values.
  c.adapter.roboadapter_encoder_layers = {0, 1, 5, 6, 10, 11};
  c.adapter.roboadapter_decoder_layers = {0, 1, 5};

  c.bench.params.n_objects = 8;
  c.bench.suites = {{"kitchen", SuiteKind::pretrain, 40, 1},  {"spatial", SuiteKind::spatial, 8, 2},
                    {"goal", SuiteKind::goal, 8, 3},          {"object", SuiteKind::object, 8, 4},
                    {"living", SuiteKind::pretrain, 8, 5},    {"study", SuiteKind::pretrain, 8, 6},
                    {"libero10", SuiteKind::long_horizon, 10, 7}};
  c.curriculum.pretrain = "kitchen";
  c.curriculum.pretrain_epochs = 100;
  c.curriculum.stages = {"spatial", "goal", "object", "living", "study"};
  c.curriculum.long_horizon = "libero10";
  return c;
}

}  // namespace

std::vector<std::string> profile_names() { return {"desk-defaults", "paper-defaults"}; }

ExperimentConfig profile_config(const std::string& name) {
  if (name == "desk-defaults") return desk_defaults();
  if (name == "paper-defaults") return paper_defaults();
  throw ConfigError("unknown profile '" + name + "' (expected desk-defaults or paper-defaults)");
}

// ---- JSON ---------------------------------------------------------------------------

namespace {

json suite_json(const SuiteConfig& s) {
  return {{"id", s.id}, {"kind", std::string(kind_name(s.kind))}, {"tasks", s.tasks}, {"seed", s.seed}};
}

SuiteConfig suite_from(const json& j) {
  SuiteConfig s;
  StrictObject o(j, "bench.suites[]");
  std::string kind;
  o.get("id", s.id);
  o.get("kind", kind);
  o.get("tasks", s.tasks);
  o.get("seed", s.seed);
  o.finish();
  if (s.id.empty()) throw ConfigError("bench.suites[]: missing id");
  s.kind = kind_from_name(kind);
  return s;
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  json train = to_json(c.train);
  train.erase("seed");  // bench.seeds.train_seed owns it
  const Seeds& s = c.bench.seeds;
  json suites = json::array();
  for (const SuiteConfig& suite : c.bench.suites) suites.push_back(suite_json(suite));
  return {{"format_version", kFormatVersion},
          {"profile", c.profile},
          {"policy", to_json(c.policy)},
          {"adapter", to_json(c.adapter)},
          {"train", train},
          {"bench",
           {{"params", to_json(c.bench.params)},
            {"demos_per_task", c.bench.demos_per_task},
            {"train_per_task", c.bench.train_per_task},
            {"seeds", {{"data_seed", s.data_seed}, {"train_seed", s.train_seed}, {"eval_seed", s.eval_seed}}},
            {"suites", suites}}},
          {"curriculum",
           {{"pretrain", c.curriculum.pretrain},
            {"pretrain_epochs", c.curriculum.pretrain_epochs},
            {"stages", c.curriculum.stages},
            {"long_horizon", c.curriculum.long_horizon},
            {"strategy", c.curriculum.strategy},
            {"base_digest", c.curriculum.base_digest}}}};
}

ExperimentConfig experiment_config_from_json(const json& in) {
  if (!in.is_object()) throw ConfigError("config: expected a JSON object");
  const std::string profile = in.contains("profile") && in["profile"].is_string() ? in["profile"].get<std::string>()
                                                                                 : std::string("desk-defaults");
  json j = to_json(profile_config(profile));
  if (in.contains("train") && in["train"].is_object() && in["train"].contains("seed"))
    throw ConfigError("train.seed: set bench.seeds.train_seed instead");
  j.merge_patch(in);

  ExperimentConfig c;
  StrictObject o(j, "config");
  int version = kFormatVersion;
  o.get("format_version", version);
  if (version != kFormatVersion) throw ConfigError("config: unsupported format_version " + std::to_string(version));
  o.get("profile", c.profile);
  c.policy = policy_spec_from_json(*o.child("policy"));
  c.adapter = adapter_spec_from_json(*o.child("adapter"));
  c.train = train_config_from_json(*o.child("train"));

  StrictObject b(*o.child("bench"), "bench");
  c.bench.params = bench_params_from_json(*b.child("params"));
  b.get("demos_per_task", c.bench.demos_per_task);
  b.get("train_per_task", c.bench.train_per_task);
  {
    const json* seeds = b.child("seeds");
    StrictObject so(*seeds, "bench.seeds");
    for (const char* key : {"data_seed", "train_seed", "eval_seed"})
      if (!seeds->contains(key)) throw ConfigError("bench.seeds." + std::string(key) + " is required");
    so.get("data_seed", c.bench.seeds.data_seed);
    so.get("train_seed", c.bench.seeds.train_seed);
    so.get("eval_seed", c.bench.seeds.eval_seed);
    so.finish();
  }
  const json* suites = b.child("suites");
  if (!suites->is_array()) throw ConfigError("bench.suites: expected an array");
  for (const json& s : *suites) c.bench.suites.push_back(suite_from(s));
  b.finish();

  StrictObject cu(*o.child("curriculum"), "curriculum");
  cu.get("pretrain", c.curriculum.pretrain);
  cu.get("pretrain_epochs", c.curriculum.pretrain_epochs);
  cu.get("stages", c.curriculum.stages);
  cu.get("long_horizon", c.curriculum.long_horizon);
  cu.get("strategy", c.curriculum.strategy);
  cu.get("base_digest", c.curriculum.base_digest);
  cu.finish();
  o.finish();

  c.train.seed = c.bench.seeds.train_seed;
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path_or_profile) {
  const auto names = profile_names();
  if (std::find(names.begin(), names.end(), path_or_profile) != names.end()) {
    ExperimentConfig c = profile_config(path_or_profile);
    c.train.seed = c.bench.seeds.train_seed;
    c.validate();
    return c;
  }
  std::ifstream f(path_or_profile);
  if (!f) throw ConfigError("cannot open config '" + path_or_profile + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path_or_profile + "' is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

// ---- strategies ----------------------------------------------------------------------

StrategyChoice resolve_strategy(const std::string& name, const AdapterSpec& base) {
  StrategyChoice out;
  out.adapter = base;
  for (const char* plain : {"fft", "fpf", "er", "ewc"})
    if (name == plain) {
      out.name = name;
      out.strategy = strategy_from_name(name);
      return out;
    }
  std::string methods = name.rfind("tail-", 0) == 0 ? name.substr(5) : name;
  if (methods.empty()) throw ConfigError("unknown strategy '" + name + "'");
  std::set<AdapterMethod> set;
  std::size_t start = 0;
  while (start <= methods.size()) {
    const std::size_t plus = methods.find('+', start);
    const std::string m = methods.substr(start, plus == std::string::npos ? std::string::npos : plus - start);
    try {
      set.insert(method_from_name(m));
    } catch (const std::exception&) {
      throw ConfigError("unknown strategy '" + name + "'");
    }
    if (plus == std::string::npos) break;
    start = plus + 1;
  }
  out.strategy = Strategy::tail;
  out.adapter.methods = set;
  out.name = "tail-";
  bool first = true;
  for (AdapterMethod m : set) {
    out.name += (first ? "" : "+") + std::string(method_name(m));
    first = false;
  }
  return out;
}

// ---- data ------------------------------------------------------------------------------

Perception make_perception(const ExperimentConfig& c) {
  return Perception(hash_combine(c.bench.seeds.data_seed, 0x9e7c), c.bench.params.n_objects,
                    c.policy.perception_dim());
}

std::vector<TaskSpec> make_tasks(const ExperimentConfig& c, const SuiteConfig& s) {
  return make_suite(s.kind, s.tasks, hash_combine(c.bench.seeds.data_seed, s.seed), c.bench.params,
                    c.policy.embed_dim, s.id);
}

SuiteDataset generate_suite(const ExperimentConfig& c, const SuiteConfig& s, int workers) {
  return generate_suite(make_tasks(c, s), c.bench.demos_per_task, c.bench.train_per_task, c.bench.seeds.data_seed,
                        c.bench.params, make_perception(c), workers);
}

std::vector<SuiteDataset> split_tasks(const SuiteDataset& d) {
  std::vector<SuiteDataset> out;
  for (const TaskData& t : d.tasks) {
    SuiteDataset one;
    one.suite_id = d.suite_id + ".t" + std::to_string(t.task.task_id);
    one.data_seed = d.data_seed;
    one.params = d.params;
    one.tasks = {t};
    out.push_back(std::move(one));
  }
  return out;
}

}  // namespace tail
