#include <CLI11.hpp>

#include <fstream>
#include <ostream>

#include "tail/cli.hpp"
#include "tail/errors.hpp"

namespace tail::cli {

namespace fs = std::filesystem;

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"TAIL continual imitation learning on the desk benchmark", "tail"};
  app.require_subcommand(1);

  std::string config = "desk-defaults";
  std::optional<std::uint64_t> seed;
  int workers = 0;
  std::string out_dir, strategy, data, base, bundle, suite, setup = "all", csv;
  bool resume = false, combinations = false;
  Index stop_after = 0, episodes = 0;
  std::vector<Index> ranks;
  std::vector<std::string> inputs;
  std::string inspect_path;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", config, "Config file or profile name (desk-defaults, paper-defaults)");
    c->add_option("--seed", seed, "Train seed (replaces bench.seeds.train_seed)");
    c->add_option("--workers", workers, "Evaluation workers; 0 uses every hardware thread");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "Generate every suite's demonstrations");
  common(gen);
  gen->add_option("--out", out_dir, "Dataset directory")->required();

  CLI::App* pre = app.add_subcommand("pretrain", "Pretrain the base policy");
  common(pre);
  pre->add_option("--data", data, "Dataset directory")->required();
  pre->add_option("--out", out_dir, "Output directory")->required();
  pre->add_flag("--resume", resume, "Continue from the saved state in --out");
  pre->add_option("--stop-after", stop_after, "Stop after this epoch (resume later)");

  CLI::App* ad = app.add_subcommand("adapt", "Run the continual curriculum");
  common(ad);
  ad->add_option("--base", base, "Pretrain output or checkpoint directory")->required();
  ad->add_option("--data", data, "Dataset directory")->required();
  ad->add_option("--out", out_dir, "Run directory")->required();
  ad->add_option("--strategy", strategy, "tail-<methods>, fft, fpf, er or ewc");
  ad->add_option("--setup", setup, "suites, long-horizon or all");

  CLI::App* ev = app.add_subcommand("eval", "Evaluate a base (and optionally a bundle) on one suite");
  common(ev);
  ev->add_option("--base", base, "Checkpoint directory")->required();
  ev->add_option("--bundle", bundle, "Adapter bundle directory");
  ev->add_option("--data", data, "Dataset directory")->required();
  ev->add_option("--suite", suite, "Suite id")->required();
  ev->add_option("--episodes", episodes, "Episodes per task");
  ev->add_option("--out", out_dir, "JSON report file");

  CLI::App* met = app.add_subcommand("metrics", "FWT/BWT table across ledgers or metrics CSVs");
  met->add_option("inputs", inputs, "Run directories, ledger directories or CSV files")->required();
  met->add_option("--out", csv, "CSV output file");

  CLI::App* ins = app.add_subcommand("inspect", "Parameter counts and trainable fractions");
  common(ins);
  ins->add_option("path", inspect_path, "Checkpoint or bundle directory");

  CLI::App* sw = app.add_subcommand("sweep-rank", "FWT against adapter rank (or the combination grid)");
  common(sw);
  sw->add_option("--base", base, "Pretrain output or checkpoint directory")->required();
  sw->add_option("--data", data, "Dataset directory")->required();
  sw->add_option("--out", out_dir, "Output directory for sweep.csv");
  sw->add_option("--ranks", ranks, "Ranks to sweep")->delimiter(',');
  sw->add_flag("--combinations", combinations, "Sweep subsets of {prefix, bottleneck, lora} instead");

  CLI::App* plot = app.add_subcommand("plot", "Loss and success curves of a ledger as SVG");
  plot->add_option("ledger", base, "Ledger directory")->required();
  plot->add_option("--out", out_dir, "SVG file")->required();

  std::vector<std::string> argv_store = args;
  std::reverse(argv_store.begin(), argv_store.end());
  try {
    app.parse(argv_store);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) {
      gen_data(load(config, seed), out_dir, resolve_workers(workers), err);
    } else if (pre->parsed()) {
      pretrain(load(config, seed), {data, out_dir, resume, stop_after, resolve_workers(workers)}, out, err);
    } else if (ad->parsed()) {
      AdaptArgs a{base, data, out_dir, strategy, setup_from_name(setup), resolve_workers(workers)};
      adapt(load(config, seed), a, out, err);
    } else if (ev->parsed()) {
      eval(load(config, seed), {base, data, bundle, suite, episodes, out_dir, resolve_workers(workers)}, out);
    } else if (met->parsed()) {
      std::vector<fs::path> paths(inputs.begin(), inputs.end());
      metrics(paths, csv, out, err);
    } else if (ins->parsed()) {
      inspect(load(config, seed), inspect_path, out);
    } else if (sw->parsed()) {
      sweep_rank(load(config, seed), {base, data, out_dir, ranks, combinations, resolve_workers(workers)}, out, err);
    } else if (plot->parsed()) {
      const std::string svg = ledger_svg(load_ledger(base));
      std::ofstream f(out_dir, std::ios::binary);
      f << svg;
      if (!f) throw DataError("cannot write " + out_dir);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace tail::cli
