#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tail/config.hpp"

namespace tail::cli {

// The resolved config and the document it was read from; both are echoed
// into every ledger.
struct LoadedConfig {
  ExperimentConfig cfg;
  nlohmann::json input;
};
// `seed` replaces bench.seeds.train_seed.
LoadedConfig load(const std::string& path_or_profile, std::optional<std::uint64_t> seed = {});

// 0 means one per hardware thread. TAIL_DETERMINISTIC=1 forces 1.
int resolve_workers(int requested);

void gen_data(const LoadedConfig& c, const std::filesystem::path& out, int workers, std::ostream& log);

struct PretrainArgs {
  std::filesystem::path data, out;
  bool resume = false;
  Index stop_after = 0;
  int workers = 1;
};
void pretrain(const LoadedConfig& c, const PretrainArgs& a, std::ostream& out, std::ostream& log);

enum class Setup { suites, long_horizon, all };
Setup setup_from_name(const std::string& name);

struct AdaptArgs {
  std::filesystem::path base, data, out;
  std::string strategy;  // empty: curriculum.strategy
  Setup setup = Setup::all;
  int workers = 1;
};
void adapt(const LoadedConfig& c, const AdaptArgs& a, std::ostream& out, std::ostream& log);

struct EvalArgs {
  std::filesystem::path base, data;
  std::filesystem::path bundle;      // optional
  std::string suite;
  Index episodes = 0;                // 0: train.eval_episodes
  std::filesystem::path out;         // optional JSON report
  int workers = 1;
};
void eval(const LoadedConfig& c, const EvalArgs& a, std::ostream& out);

// A checkpoint or bundle directory, or nothing to inspect the config's shapes.
void inspect(const LoadedConfig& c, const std::filesystem::path& path, std::ostream& out);

struct SweepArgs {
  std::filesystem::path base, data, out;
  std::vector<Index> ranks;
  bool combinations = false;
  int workers = 1;
};
void sweep_rank(const LoadedConfig& c, const SweepArgs& a, std::ostream& out, std::ostream& log);

// ---- reporting ---------------------------------------------------------------------

// One aggregate: mean and sample std over n runs; n == 0 marks an absent cell.
struct Cell {
  std::string setup, strategy, stage, metric;
  double mean = 0.0, std = 0.0;
  Index n = 0;
  bool operator==(const Cell&) const = default;
};

// Per-stage FWT/BWT plus an "average" row for every (setup, strategy).
// Ledgers with different data or eval seeds are a DataError. Missing S_i
// leaves the BWT cell absent and writes a warning.
std::vector<Cell> aggregate(const std::vector<RunLedger>& ledgers, std::ostream& warn);
std::string cells_csv(const std::vector<Cell>& cells);
std::vector<Cell> cells_from_csv(const std::string& text);
std::string render_table(const std::vector<Cell>& cells);

// Ledger directories, run directories (both setups) or CSV files.
void metrics(const std::vector<std::filesystem::path>& inputs, const std::filesystem::path& csv_out, std::ostream& out,
             std::ostream& warn);

// Loss and success curves of one ledger as a static SVG.
std::string ledger_svg(const RunLedger& l);

// Parses argv and maps errors to exit codes: 0 ok, 2 config, 3 data,
// 4 numerical, 1 anything else.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tail::cli
