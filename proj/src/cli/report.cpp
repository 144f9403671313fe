#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "tail/cli.hpp"
#include "tail/errors.hpp"

namespace tail::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Cell summarize(const std::vector<double>& xs) {
  Cell c;
  c.n = static_cast<Index>(xs.size());
  if (xs.empty()) return c;
  c.mean = mean(xs);
  if (xs.size() > 1) {
    double ss = 0;
    for (double x : xs) ss += (x - c.mean) * (x - c.mean);
    c.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return c;
}

std::pair<std::string, std::string> group_of(const RunLedger& l) {
  const std::string setup = l.config.is_object() ? l.config.value("setup", std::string("suites")) : "suites";
  std::string strategy = l.config.is_object() ? l.config.value("strategy", std::string()) : std::string();
  if (strategy.empty() && !l.stages.empty()) strategy = l.stages.front().strategy;
  return {setup, strategy};
}

// (data_seed, eval_seed) when the echo carries them.
std::optional<std::pair<std::uint64_t, std::uint64_t>> bench_seeds(const RunLedger& l) {
  try {
    const json& s = l.config.at("resolved").at("bench").at("seeds");
    return std::make_pair(s.at("data_seed").get<std::uint64_t>(), s.at("eval_seed").get<std::uint64_t>());
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

std::vector<Cell> aggregate(const std::vector<RunLedger>& ledgers, std::ostream& warn) {
  std::optional<std::pair<std::uint64_t, std::uint64_t>> seeds;
  for (const RunLedger& l : ledgers)
    if (auto s = bench_seeds(l)) {
      if (seeds && *seeds != *s)
        throw DataError("ledgers come from different bench seeds (data_seed/eval_seed " + std::to_string(seeds->first) +
                        "/" + std::to_string(seeds->second) + " vs " + std::to_string(s->first) + "/" +
                        std::to_string(s->second) + ")");
      seeds = s;
    }

  std::vector<std::pair<std::string, std::string>> keys;
  std::map<std::pair<std::string, std::string>, std::vector<const RunLedger*>> groups;
  for (const RunLedger& l : ledgers) {
    const auto k = group_of(l);
    if (!groups.count(k)) keys.push_back(k);
    groups[k].push_back(&l);
  }

  std::vector<Cell> cells;
  for (const auto& key : keys) {
    const auto& runs = groups[key];
    std::vector<std::string> stages;
    for (const RunLedger* l : runs)
      for (const StageRecord& r : l->stages)
        if (std::find(stages.begin(), stages.end(), r.stage_id) == stages.end()) stages.push_back(r.stage_id);

    // Per run: FWT and BWT of every stage, absent when the data is missing.
    std::vector<std::map<std::string, double>> fwt(runs.size()), bwt(runs.size());
    std::vector<bool> bwt_complete(runs.size(), true), fwt_complete(runs.size(), true);
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const RunLedger& l = *runs[i];
      for (std::size_t k = 0; k < l.stages.size(); ++k) {
        const StageRecord& r = l.stages[k];
        fwt[i][r.stage_id] = r.fwt;
        if (k == 0) continue;
        std::vector<double> F, S;
        bool ok = true;
        for (std::size_t j = 0; j < k; ++j) {
          const auto it = r.revisit.find(l.stages[j].stage_id);
          if (it == r.revisit.end()) {
            warn << "warning: " << key.second << " run " << i << ": no S_i for '" << l.stages[j].stage_id
                 << "' after stage '" << r.stage_id << "'; BWT left absent\n";
            ok = false;
            break;
          }
          F.push_back(l.stages[j].fwt);
          S.push_back(it->second);
        }
        if (ok) bwt[i][r.stage_id] = compute_bwt(F, S);
        else bwt_complete[i] = false;
      }
      for (const std::string& s : stages)
        if (!fwt[i].count(s)) {
          warn << "warning: " << key.second << " run " << i << " has no stage '" << s << "'\n";
          fwt_complete[i] = false;
          bwt_complete[i] = false;
        }
    }

    auto emit = [&](const std::string& stage, const std::string& metric, const std::vector<std::optional<double>>& xs) {
      std::vector<double> present;
      for (const auto& x : xs)
        if (x) present.push_back(*x);
      Cell c = present.size() == xs.size() ? summarize(present) : Cell{};
      c.setup = key.first;
      c.strategy = key.second;
      c.stage = stage;
      c.metric = metric;
      cells.push_back(c);
    };

    for (std::size_t si = 0; si < stages.size(); ++si) {
      const std::string& s = stages[si];
      std::vector<std::optional<double>> f, b;
      bool has_bwt = false;
      for (std::size_t i = 0; i < runs.size(); ++i) {
        f.push_back(fwt[i].count(s) ? std::optional<double>(fwt[i].at(s)) : std::nullopt);
        b.push_back(bwt[i].count(s) ? std::optional<double>(bwt[i].at(s)) : std::nullopt);
        has_bwt = has_bwt || bwt[i].count(s);
      }
      emit(s, "fwt", f);
      emit(s, "bwt", si == 0 && !has_bwt ? std::vector<std::optional<double>>{std::nullopt} : b);
    }
    std::vector<std::optional<double>> fa, ba;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      std::vector<double> fs_, bs;
      for (const auto& [s, v] : fwt[i]) fs_.push_back(v);
      for (const auto& [s, v] : bwt[i]) bs.push_back(v);
      fa.push_back(fwt_complete[i] && !fs_.empty() ? std::optional<double>(mean(fs_)) : std::nullopt);
      ba.push_back(bwt_complete[i] && !bs.empty() ? std::optional<double>(mean(bs)) : std::nullopt);
    }
    emit("average", "fwt", fa);
    emit("average", "bwt", ba);
  }
  return cells;
}

std::string cells_csv(const std::vector<Cell>& cells) {
  std::ostringstream out;
  out << "setup,strategy,stage,metric,mean,std,n\n";
  for (const Cell& c : cells) {
    out << c.setup << "," << c.strategy << "," << c.stage << "," << c.metric << ",";
    if (c.n > 0) out << num(c.mean) << "," << num(c.std);
    else out << ",";
    out << "," << c.n << "\n";
  }
  return out.str();
}

std::vector<Cell> cells_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "setup,strategy,stage,metric,mean,std,n")
    throw DataError("metrics CSV: unexpected header");
  std::vector<Cell> cells;
  Index row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 7) throw DataError("metrics CSV row " + std::to_string(row) + ": expected 7 fields");
    Cell c;
    c.setup = f[0];
    c.strategy = f[1];
    c.stage = f[2];
    c.metric = f[3];
    try {
      c.n = std::stoll(f[6]);
      if (c.n > 0) {
        c.mean = std::stod(f[4]);
        c.std = std::stod(f[5]);
      } else if (!f[4].empty() || !f[5].empty()) {
        throw DataError("absent cell with values");
      }
    } catch (const std::exception&) {
      throw DataError("metrics CSV row " + std::to_string(row) + ": bad number");
    }
    cells.push_back(c);
  }
  return cells;
}

std::string render_table(const std::vector<Cell>& cells) {
  std::vector<std::string> setups;
  for (const Cell& c : cells)
    if (std::find(setups.begin(), setups.end(), c.setup) == setups.end()) setups.push_back(c.setup);

  std::ostringstream out;
  for (const std::string& setup : setups) {
    std::vector<std::string> strategies, stages;
    std::map<std::tuple<std::string, std::string, std::string>, const Cell*> at;
    for (const Cell& c : cells) {
      if (c.setup != setup) continue;
      if (std::find(strategies.begin(), strategies.end(), c.strategy) == strategies.end())
        strategies.push_back(c.strategy);
      if (std::find(stages.begin(), stages.end(), c.stage) == stages.end()) stages.push_back(c.stage);
      at[{c.strategy, c.stage, c.metric}] = &c;
    }
    // "average" last.
    std::stable_partition(stages.begin(), stages.end(), [](const std::string& s) { return s != "average"; });

    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> head = {setup};
    for (const std::string& s : strategies) {
      head.push_back(s + " FWT");
      head.push_back(s + " BWT");
    }
    grid.push_back(head);
    for (const std::string& stage : stages) {
      std::vector<std::string> row = {stage};
      for (const std::string& s : strategies)
        for (const char* m : {"fwt", "bwt"}) {
          const auto it = at.find({s, stage, m});
          if (it == at.end() || it->second->n == 0) {
            row.push_back("-");
            continue;
          }
          char buf[64];
          if (it->second->n > 1)
            std::snprintf(buf, sizeof buf, "%.4f +- %.4f", it->second->mean, it->second->std);
          else
            std::snprintf(buf, sizeof buf, "%.4f", it->second->mean);
          row.push_back(buf);
        }
      grid.push_back(row);
    }
    std::vector<std::size_t> width(head.size(), 0);
    for (const auto& row : grid)
      for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    for (const auto& row : grid) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        out << row[i] << std::string(width[i] - row[i].size(), ' ');
        out << (i + 1 < row.size() ? "  " : "\n");
      }
    }
    out << "\n";
  }
  return out.str();
}

void metrics(const std::vector<fs::path>& inputs, const fs::path& csv_out, std::ostream& out, std::ostream& warn) {
  if (inputs.empty()) throw ConfigError("metrics: no inputs");
  std::size_t csvs = 0;
  for (const fs::path& p : inputs)
    if (p.extension() == ".csv") ++csvs;
  if (csvs != 0 && csvs != inputs.size()) throw ConfigError("metrics: pass either ledgers or CSV files, not both");

  std::vector<Cell> cells;
  if (csvs) {
    for (const fs::path& p : inputs) {
      std::ifstream f(p);
      if (!f) throw DataError("cannot open " + p.string());
      std::stringstream s;
      s << f.rdbuf();
      const auto more = cells_from_csv(s.str());
      cells.insert(cells.end(), more.begin(), more.end());
    }
  } else {
    std::vector<RunLedger> ledgers;
    for (const fs::path& p : inputs) {
      bool found = false;
      for (const fs::path& d : {p, p / "long_horizon"})
        if (fs::exists(d / "ledger.json")) {
          ledgers.push_back(load_ledger(d));
          found = true;
        }
      if (!found) throw DataError("no ledger.json under " + p.string());
    }
    cells = aggregate(ledgers, warn);
  }
  out << render_table(cells);
  if (!csv_out.empty()) {
    if (csv_out.has_parent_path()) fs::create_directories(csv_out.parent_path());
    std::ofstream f(csv_out, std::ios::binary);
    f << cells_csv(cells);
    if (!f) throw DataError("cannot write " + csv_out.string());
  }
}

// ---- svg ------------------------------------------------------------------------------------

namespace {

struct Series {
  std::string label, color;
  std::vector<std::pair<double, double>> pts;
};

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

void panel(std::ostringstream& o, double top, const std::string& title, const std::vector<Series>& series,
           const std::vector<std::pair<double, std::string>>& marks, double xmax) {
  const double left = 60, w = 620, h = 200;
  double lo = 1e300, hi = -1e300;
  for (const Series& s : series)
    for (const auto& [x, y] : s.pts) {
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
  if (lo > hi) lo = 0, hi = 1;
  if (hi - lo < 1e-12) hi = lo + 1;
  auto X = [&](double x) { return left + w * x / std::max(xmax, 1.0); };
  auto Y = [&](double y) { return top + h - h * (y - lo) / (hi - lo); };
  char buf[256];
  std::snprintf(buf, sizeof buf, "<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" stroke=\"#999\"/>\n",
                left, top, w, h);
  o << buf;
  o << "<text x=\"" << left << "\" y=\"" << top - 6 << "\" font-size=\"13\">" << esc(title) << "</text>\n";
  std::snprintf(buf, sizeof buf,
                "<text x=\"%g\" y=\"%g\" font-size=\"10\" text-anchor=\"end\">%.3g</text>\n"
                "<text x=\"%g\" y=\"%g\" font-size=\"10\" text-anchor=\"end\">%.3g</text>\n",
                left - 4, top + 10, hi, left - 4, top + h, lo);
  o << buf;
  for (const auto& [x, label] : marks) {
    std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"#ddd\"/>\n", X(x), top, X(x),
                  top + h);
    o << buf << "<text x=\"" << X(x) + 2 << "\" y=\"" << top + h - 4 << "\" font-size=\"9\" fill=\"#777\">"
      << esc(label) << "</text>\n";
  }
  double ly = top + 14;
  for (const Series& s : series) {
    o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : s.pts) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", X(x), Y(y));
      o << buf;
    }
    o << "\"/>\n";
    o << "<text x=\"" << left + w - 90 << "\" y=\"" << ly << "\" font-size=\"10\" fill=\"" << s.color << "\">"
      << esc(s.label) << "</text>\n";
    ly += 12;
  }
}

}  // namespace

std::string ledger_svg(const RunLedger& l) {
  Series train{"train NLL", "#1f77b4", {}}, val{"val NLL", "#ff7f0e", {}}, success{"success", "#2ca02c", {}};
  std::vector<std::pair<double, std::string>> marks;
  double offset = 0;
  for (const StageRecord& r : l.stages) {
    marks.emplace_back(offset, r.stage_id);
    for (std::size_t e = 0; e < r.train_nll.size(); ++e) train.pts.emplace_back(offset + double(e + 1), r.train_nll[e]);
    for (std::size_t e = 0; e < r.val_nll.size(); ++e) val.pts.emplace_back(offset + double(e + 1), r.val_nll[e]);
    for (const CheckpointEval& c : r.checkpoints)
      if (auto it = c.success.find(r.stage_id); it != c.success.end())
        success.pts.emplace_back(offset + double(c.epoch), mean(it->second));
    offset += static_cast<double>(r.epochs);
  }
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"520\" font-family=\"sans-serif\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  panel(o, 30, "loss", {train, val}, marks, offset);
  panel(o, 290, "success on the current stage", {success}, marks, offset);
  o << "</svg>\n";
  return o.str();
}

}  // namespace tail::cli
