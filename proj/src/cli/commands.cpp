#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <thread>

#include "tail/checkpoint.hpp"
#include "tail/cli.hpp"
#include "tail/errors.hpp"

namespace tail::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw DataError("cannot open " + p.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  f << text;
  if (!f) throw DataError("cannot write " + p.string());
}

json echo(const LoadedConfig& c) { return {{"input", c.input}, {"resolved", to_json(c.cfg)}}; }

// The bench section without the train seed, which may differ between runs
// that share data.
json bench_key(const ExperimentConfig& cfg) {
  json b = to_json(cfg)["bench"];
  b["seeds"].erase("train_seed");
  return b;
}

EvalSetup eval_setup(const ExperimentConfig& cfg, int workers) {
  return {make_perception(cfg), cfg.bench.params, cfg.bench.seeds.eval_seed, workers};
}

void check_data(const ExperimentConfig& cfg, const fs::path& data) {
  const json m = read_json(data / "manifest.json");
  if (!m.contains("bench") || m["bench"] != bench_key(cfg))
    throw DataError("data under " + data.string() + " was generated with a different bench config");
}

SuiteDataset load_suite(const ExperimentConfig& cfg, const fs::path& data, const std::string& id) {
  cfg.bench.suite(id);
  check_data(cfg, data);
  return load_dataset(data / id);
}

// Accepts the pretrain output directory or the checkpoint inside it.
fs::path checkpoint_dir(const fs::path& base) {
  if (fs::exists(base / "checkpoint" / "manifest.json")) return base / "checkpoint";
  return base;
}

PolicyWeights load_base(const ExperimentConfig& cfg, const fs::path& base) {
  PolicyWeights w = load_checkpoint(checkpoint_dir(base));
  if (!(w.spec() == cfg.policy))
    throw ConfigError("base checkpoint " + base.string() + " has a different policy spec than the config");
  const std::string& pin = cfg.curriculum.base_digest;
  if (!pin.empty() && pin != w.digest())
    throw DigestMismatch("base digest " + w.digest() + " does not match curriculum.base_digest " + pin);
  return w;
}

std::string percent(double f) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << f << " (" << std::setprecision(2) << 100.0 * f << "%)";
  return s.str();
}

}  // namespace

LoadedConfig load(const std::string& path_or_profile, std::optional<std::uint64_t> seed) {
  LoadedConfig c;
  const auto names = profile_names();
  if (std::find(names.begin(), names.end(), path_or_profile) != names.end()) {
    c.input = {{"profile", path_or_profile}};
  } else {
    std::ifstream f(path_or_profile);
    if (!f) throw ConfigError("cannot open config '" + path_or_profile + "'");
    try {
      c.input = json::parse(f);
    } catch (const json::exception& e) {
      throw ConfigError("config '" + path_or_profile + "' is not valid JSON: " + e.what());
    }
  }
  json doc = c.input;
  if (seed) {
    if (!doc.is_object()) throw ConfigError("config: expected a JSON object");
    doc["bench"]["seeds"]["train_seed"] = *seed;
  }
  c.cfg = experiment_config_from_json(doc);
  return c;
}

int resolve_workers(int requested) {
  if (const char* d = std::getenv("TAIL_DETERMINISTIC"); d && std::string(d) == "1") return 1;
  if (requested < 0) throw ConfigError("--workers must be >= 0");
  if (requested == 0) return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
  return requested;
}

// ---- gen-data --------------------------------------------------------------------------

void gen_data(const LoadedConfig& c, const fs::path& out, int workers, std::ostream& log) {
  const ExperimentConfig& cfg = c.cfg;
  fs::create_directories(out);
  json suites = json::array();
  for (const SuiteConfig& s : cfg.bench.suites) {
    log << "generating " << s.id << " (" << kind_name(s.kind) << ", " << s.tasks << " tasks x "
        << cfg.bench.demos_per_task << " demos)\n"
        << std::flush;
    const SuiteDataset d = generate_suite(cfg, s, workers);
    fs::remove_all(out / s.id);
    save_dataset(d, out / s.id);
    json tasks = json::array();
    for (const TaskData& t : d.tasks) tasks.push_back(to_json(t.task));
    suites.push_back({{"id", s.id}, {"kind", std::string(kind_name(s.kind))}, {"tasks", tasks}});
  }
  const json manifest = {{"format_version", kFormatVersion},
                         {"bench", bench_key(cfg)},
                         {"seeds", {{"data_seed", cfg.bench.seeds.data_seed}, {"eval_seed", cfg.bench.seeds.eval_seed}}},
                         {"suites", suites},
                         {"config", echo(c)}};
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
}

// ---- pretrain --------------------------------------------------------------------------

void pretrain(const LoadedConfig& c, const PretrainArgs& a, std::ostream& out, std::ostream& log) {
  const ExperimentConfig& cfg = c.cfg;
  const SuiteDataset data = load_suite(cfg, a.data, cfg.curriculum.pretrain);
  PolicyWeights w = PolicyWeights::init(cfg.policy, cfg.bench.seeds.train_seed);
  PretrainOptions opt;
  opt.log = &log;
  opt.state_dir = a.out / "state";
  opt.resume = a.resume;
  opt.stop_after = a.stop_after;
  if (!a.resume) fs::remove_all(opt.state_dir);
  log << "pretraining on " << data.suite_id << " for " << cfg.curriculum.pretrain_epochs << " epochs\n";
  const PretrainResult r = tail::pretrain(w, data, cfg.train, cfg.curriculum.pretrain_epochs,
                                    eval_setup(cfg, a.workers), opt);
  const Index done = static_cast<Index>(r.train.train_nll.size());
  json cps = json::array();
  for (const CheckpointEval& cp : r.checkpoints) cps.push_back({{"epoch", cp.epoch}, {"success", cp.success}});
  const json report = {{"format_version", kFormatVersion},
                       {"suite", data.suite_id},
                       {"epochs", cfg.curriculum.pretrain_epochs},
                       {"completed_epochs", done},
                       {"checkpoints", cps},
                       {"best_checkpoint", r.best_checkpoint},
                       {"success", r.success},
                       {"train_nll", r.train.train_nll},
                       {"val_nll", r.train.val_nll},
                       {"config", echo(c)}};
  if (done < cfg.curriculum.pretrain_epochs) {
    write_text(a.out / "pretrain.partial.json", report.dump(2) + "\n");
    out << "stopped after epoch " << done << "; resume with --resume\n";
    return;
  }
  fs::remove_all(a.out / "checkpoint");
  save_checkpoint(w, a.out / "checkpoint", {{"config", echo(c)}, {"pretrain_success", r.success}});
  write_text(a.out / "pretrain.json", report.dump(2) + "\n");
  fs::remove(a.out / "pretrain.partial.json");
  out << "pretrain success " << std::fixed << std::setprecision(4) << r.success << "\n"
      << "base digest " << w.digest() << "\n";
}

// ---- adapt -------------------------------------------------------------------------------

Setup setup_from_name(const std::string& name) {
  if (name == "suites") return Setup::suites;
  if (name == "long-horizon") return Setup::long_horizon;
  if (name == "all") return Setup::all;
  throw ConfigError("unknown setup '" + name + "' (expected suites, long-horizon or all)");
}

namespace {

void save_stage(const ContinualRun& run, const std::string& stage, const fs::path& dir) {
  if (run.bundles().count(stage)) {
    fs::remove_all(dir / "bundles" / stage);
    save_bundle(run.bundles().at(stage), dir / "bundles" / stage);
  } else {
    fs::remove_all(dir / "checkpoints" / stage);
    save_checkpoint(run.weights(), dir / "checkpoints" / stage);
  }
}

void report_run(const RunLedger& l, std::ostream& out) {
  for (const StageRecord& r : l.stages) {
    out << "  " << std::left << std::setw(14) << r.stage_id << " FWT " << std::fixed << std::setprecision(4) << r.fwt;
    if (r.bwt) out << "  BWT " << *r.bwt;
    out << "\n";
  }
}

}  // namespace

void adapt(const LoadedConfig& c, const AdaptArgs& a, std::ostream& out, std::ostream& log) {
  const ExperimentConfig& cfg = c.cfg;
  const StrategyChoice choice = resolve_strategy(a.strategy.empty() ? cfg.curriculum.strategy : a.strategy,
                                                 cfg.adapter);
  if (choice.strategy == Strategy::tail) choice.adapter.validate(cfg.policy);
  const PolicyWeights base = load_base(cfg, a.base);
  check_data(cfg, a.data);
  const EvalSetup ev = eval_setup(cfg, a.workers);

  auto run_setup = [&](const std::string& setup, const std::vector<std::pair<std::string, const SuiteDataset*>>& stages,
                       Index epochs, const fs::path& dir) {
    json e = echo(c);
    e["setup"] = setup;
    e["strategy"] = choice.name;
    ContinualRun run(base, choice.strategy, choice.adapter, cfg.train, ev, e);
    run.set_log(&log);
    for (const auto& [id, data] : stages) {
      run.adapt(id, *data, epochs);
      save_stage(run, id, dir);
    }
    RunLedger l = run.ledger();
    l.pretrain_digest = base.digest();
    save_ledger(l, dir);
    if (choice.strategy == Strategy::tail && run.weights().digest() != base.digest())
      throw NumericalError("base weights drifted during a TAIL run");
    out << setup << " / " << choice.name << "\n";
    report_run(l, out);
  };

  if (a.setup != Setup::long_horizon) {
    if (cfg.curriculum.stages.empty()) throw ConfigError("curriculum.stages is empty");
    std::vector<SuiteDataset> data;
    data.reserve(cfg.curriculum.stages.size());
    for (const std::string& id : cfg.curriculum.stages) data.push_back(load_dataset(a.data / id));
    std::vector<std::pair<std::string, const SuiteDataset*>> stages;
    for (std::size_t i = 0; i < data.size(); ++i) stages.emplace_back(cfg.curriculum.stages[i], &data[i]);
    run_setup("suites", stages, cfg.train.epochs, a.out);
  }
  if (a.setup != Setup::suites) {
    if (cfg.curriculum.long_horizon.empty()) {
      if (a.setup == Setup::long_horizon) throw ConfigError("curriculum.long_horizon is empty");
      return;
    }
    const SuiteDataset lh = load_dataset(a.data / cfg.curriculum.long_horizon);
    const std::vector<SuiteDataset> parts = split_tasks(lh);
    std::vector<std::pair<std::string, const SuiteDataset*>> stages;
    for (const SuiteDataset& p : parts) stages.emplace_back(p.suite_id, &p);
    run_setup("long_horizon", stages, cfg.train.long_horizon_epochs, a.out / "long_horizon");
  }
}

// ---- eval ----------------------------------------------------------------------------------

void eval(const LoadedConfig& c, const EvalArgs& a, std::ostream& out) {
  const ExperimentConfig& cfg = c.cfg;
  const PolicyWeights base = load_base(cfg, a.base);
  std::optional<AdapterBundle> bundle;
  if (!a.bundle.empty()) bundle = load_bundle(a.bundle, base.digest());
  const AdapterBundle* bp = bundle ? &*bundle : nullptr;
  const SuiteDataset data = load_suite(cfg, a.data, a.suite);
  const Index episodes = a.episodes > 0 ? a.episodes : cfg.train.eval_episodes;
  const std::vector<double> s =
      evaluate_suite(base.spec(), bind(base, bp), forward_config(bp), data, episodes, eval_setup(cfg, a.workers));
  out << std::fixed << std::setprecision(4);
  for (std::size_t i = 0; i < s.size(); ++i) out << "  task " << data.tasks[i].task.task_id << "  " << s[i] << "\n";
  out << "mean success " << mean(s) << "\n";
  if (!a.out.empty())
    write_text(a.out, json({{"suite", a.suite},
                            {"episodes", episodes},
                            {"base_digest", base.digest()},
                            {"bundle", bp ? bp->suite_id : std::string()},
                            {"success", s},
                            {"mean", mean(s)}})
                              .dump(2) +
                          "\n");
}

// ---- inspect --------------------------------------------------------------------------------

void inspect(const LoadedConfig& c, const fs::path& path, std::ostream& out) {
  const ExperimentConfig& cfg = c.cfg;
  PolicySpec host = cfg.policy;
  AdapterSpec adapter = cfg.adapter;
  if (!path.empty()) {
    const json m = read_json(path / "manifest.json");
    Index bytes = 0;
    for (const auto& e : fs::recursive_directory_iterator(path))
      if (e.is_regular_file()) bytes += static_cast<Index>(e.file_size());
    if (m.value("kind", "") == "adapter_bundle") {
      const LoadedTensors t = load_tensors(path);  // full read: rejects corrupt files
      adapter = adapter_spec_from_json(t.manifest.at("spec"));
      Index n = 0;
      for (const auto& [name, tensor] : t.tensors) n += tensor.numel();
      out << "bundle " << t.manifest.value("suite_id", std::string()) << "\n"
          << "  base digest " << t.manifest.value("base_digest", std::string()) << "\n"
          << "  tensors " << t.tensors.size() << " (" << n << " values)\n"
          << "  size " << bytes << " bytes\n";
    } else {
      const PolicyWeights w = load_checkpoint(path);
      host = w.spec();
      out << "checkpoint " << path.string() << "\n"
          << "  digest " << w.digest() << "\n"
          << "  size " << bytes << " bytes\n";
    }
  }
  const ParamCount fft = count_trainable(host, adapter, Strategy::fft);
  out << "parameters " << fft.total << "\n";
  for (const auto& [group, n] : fft.per_group) out << "  " << std::left << std::setw(22) << group << n << "\n";
  out << "trainable fraction by strategy\n";
  for (AdapterMethod m : {AdapterMethod::lora, AdapterMethod::prefix, AdapterMethod::bottleneck,
                          AdapterMethod::roboadapter}) {
    AdapterSpec one = adapter;
    one.methods = {m};
    const ParamCount p = count_trainable(host, one, Strategy::tail);
    out << "  tail-" << std::left << std::setw(12) << method_name(m) << std::right << std::setw(10) << p.trainable
        << "  " << percent(p.fraction()) << "\n";
  }
  for (Strategy s : {Strategy::fft, Strategy::fpf, Strategy::er, Strategy::ewc}) {
    const ParamCount p = count_trainable(host, adapter, s);
    out << "  " << std::left << std::setw(17) << strategy_name(s) << std::right << std::setw(10) << p.trainable
        << "  " << percent(p.fraction()) << "\n";
  }
}

// ---- sweep-rank --------------------------------------------------------------------------------

void sweep_rank(const LoadedConfig& c, const SweepArgs& a, std::ostream& out, std::ostream& log) {
  const ExperimentConfig& cfg = c.cfg;
  struct Row {
    std::string method;
    std::string rank;
    AdapterSpec spec;
  };
  std::vector<Row> rows;
  if (a.combinations) {
    const std::vector<AdapterMethod> pool = {AdapterMethod::prefix, AdapterMethod::bottleneck, AdapterMethod::lora};
    for (unsigned mask = 1; mask < 8; ++mask) {
      AdapterSpec s = cfg.adapter;
      s.methods.clear();
      for (unsigned i = 0; i < 3; ++i)
        if (mask & (1u << i)) s.methods.insert(pool[i]);
      std::string name;
      for (AdapterMethod m : s.methods) name += (name.empty() ? "" : "+") + std::string(method_name(m));
      rows.push_back({resolve_strategy(name, s).name, "-", s});
    }
  } else {
    if (a.ranks.empty()) throw ConfigError("sweep-rank: empty rank list");
    for (AdapterMethod m : {AdapterMethod::lora, AdapterMethod::bottleneck})
      for (Index r : a.ranks) {
        if (r < 1) throw ConfigError("sweep-rank: ranks must be >= 1");
        AdapterSpec s = cfg.adapter;
        s.methods = {m};
        if (m == AdapterMethod::lora) s.lora_rank = r;
        else s.bottleneck_size = r;
        rows.push_back({"tail-" + std::string(method_name(m)), std::to_string(r), s});
      }
  }
  for (const Row& r : rows) r.spec.validate(cfg.policy);  // before any training

  const PolicyWeights base = load_base(cfg, a.base);
  check_data(cfg, a.data);
  std::vector<std::string> stages(cfg.curriculum.stages.begin(),
                                  cfg.curriculum.stages.begin() +
                                      static_cast<std::ptrdiff_t>(std::min<std::size_t>(3, cfg.curriculum.stages.size())));
  if (stages.empty()) throw ConfigError("sweep-rank: curriculum.stages is empty");
  std::vector<SuiteDataset> data;
  for (const std::string& id : stages) data.push_back(load_dataset(a.data / id));
  const EvalSetup ev = eval_setup(cfg, a.workers);

  std::ostringstream csv;
  csv << std::setprecision(17) << "method,rank";
  for (const std::string& s : stages) csv << ",fwt_" << s;
  csv << ",fwt_mean,trainable\n";
  out << std::left << std::setw(28) << "method" << std::setw(6) << "rank";
  for (const std::string& s : stages) out << std::setw(10) << s;
  out << "mean\n";
  for (const Row& r : rows) {
    log << "sweep " << r.method << " rank " << r.rank << "\n";
    ContinualRun run(base, Strategy::tail, r.spec, cfg.train, ev);
    run.set_log(&log);
    std::vector<double> fwt;
    for (std::size_t i = 0; i < stages.size(); ++i) fwt.push_back(run.adapt(stages[i], data[i], cfg.train.epochs).fwt);
    const Index trainable = run.ledger().stages.front().params.trainable;
    csv << r.method << "," << r.rank;
    out << std::left << std::setw(28) << r.method << std::setw(6) << r.rank << std::fixed << std::setprecision(4);
    for (double f : fwt) {
      csv << "," << f;
      out << std::setw(10) << f;
    }
    csv << "," << mean(fwt) << "," << trainable << "\n";
    out << mean(fwt) << "\n";
  }
  if (!a.out.empty()) write_text(a.out / "sweep.csv", csv.str());
}

}  // namespace tail::cli
