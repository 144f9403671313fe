#include "tail/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "tail/checkpoint.hpp"
#include "tail/errors.hpp"
#include "tail/json_util.hpp"

namespace tail {

using nlohmann::json;

// ---- config ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr >= 0)) throw ConfigError("train.lr must be >= 0");
  if (epochs < 1 || long_horizon_epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be >= 0");
  if (eval_every_epochs < 1 || eval_episodes < 1) throw ConfigError("train: evaluation cadence must be >= 1");
  if (!(grad_clip > 0)) throw ConfigError("train.grad_clip must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0))
    throw ConfigError("train: adam betas must lie in [0, 1) and eps must be positive");
  if (!(ewc_lambda >= 0) || !(ewc_gamma >= 0 && ewc_gamma <= 1)) throw ConfigError("train: bad EWC settings");
  if (fisher_samples < 0) throw ConfigError("train.fisher_samples must be >= 0");
}

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"long_horizon_epochs", c.long_horizon_epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"warmup_steps", c.warmup_steps},
          {"eval_every_epochs", c.eval_every_epochs},
          {"eval_episodes", c.eval_episodes},
          {"grad_clip", c.grad_clip},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"ewc_lambda", c.ewc_lambda},
          {"ewc_gamma", c.ewc_gamma},
          {"fisher_empirical", c.fisher_empirical},
          {"fisher_samples", c.fisher_samples},
          {"eval_prior_stages", c.eval_prior_stages},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  StrictObject o(j, "train");
  o.get("epochs", c.epochs);
  o.get("long_horizon_epochs", c.long_horizon_epochs);
  o.get("batch_size", c.batch_size);
  o.get("lr", c.lr);
  o.get("weight_decay", c.weight_decay);
  o.get("warmup_steps", c.warmup_steps);
  o.get("eval_every_epochs", c.eval_every_epochs);
  o.get("eval_episodes", c.eval_episodes);
  o.get("grad_clip", c.grad_clip);
  o.get("beta1", c.beta1);
  o.get("beta2", c.beta2);
  o.get("adam_eps", c.adam_eps);
  o.get("ewc_lambda", c.ewc_lambda);
  o.get("ewc_gamma", c.ewc_gamma);
  o.get("fisher_empirical", c.fisher_empirical);
  o.get("fisher_samples", c.fisher_samples);
  o.get("eval_prior_stages", c.eval_prior_stages);
  o.get("seed", c.seed);
  o.finish();
  c.validate();
  return c;
}

// ---- data -------------------------------------------------------------------------------

namespace {

std::vector<Demo> demos_of(const SuiteDataset& d, bool train) {
  std::vector<Demo> out;
  for (const TaskData& t : d.tasks)
    for (const Trajectory& tr : train ? t.train : t.val) out.push_back({&tr, &t.task});
  return out;
}

}  // namespace

std::vector<Demo> train_demos(const SuiteDataset& d) { return demos_of(d, true); }
std::vector<Demo> val_demos(const SuiteDataset& d) { return demos_of(d, false); }

std::vector<Window> all_windows(const std::vector<Demo>& demos) {
  std::vector<Window> out;
  for (const Demo& d : demos)
    for (Index s = 0; s < d.traj->length(); ++s) out.push_back({d, s});
  return out;
}

Batch make_batch(const PolicySpec& spec, const std::vector<Window>& windows) {
  if (windows.empty()) throw DataError("empty batch");
  const Index B = static_cast<Index>(windows.size()), n = spec.max_seq_len;
  const Index F = spec.perception_dim(), S = spec.state_dim, A = spec.action_dim, d = spec.embed_dim;
  Vec perc = Vec::Zero(B * n * F), state = Vec::Zero(B * n * S), act = Vec::Zero(B * n * A), w = Vec::Zero(B * n);
  Vec task(B * d);
  for (Index b = 0; b < B; ++b) {
    const Window& win = windows[static_cast<std::size_t>(b)];
    const Trajectory& tr = *win.demo.traj;
    if (tr.perception.cols() != F || tr.state.cols() != S || tr.actions.cols() != A)
      throw ShapeError("make_batch: dataset widths do not match the policy spec");
    if (win.demo.task->instruction_emb.size() != d) throw ShapeError("make_batch: instruction width mismatch");
    const Index len = std::min(n, tr.length() - win.start);
    for (Index t = 0; t < len; ++t) {
      const Index row = win.start + t, pos = b * n + t;
      perc.segment(pos * F, F) = tr.perception.row(row).transpose();
      state.segment(pos * S, S) = tr.state.row(row).transpose();
      act.segment(pos * A, A) = tr.actions.row(row).transpose();
      w[pos] = 1.0;
    }
    task.segment(b * d, d) = win.demo.task->instruction_emb;
  }
  Batch out;
  out.input = {B, n, Tensor({B, n, F}, std::move(perc)), Tensor({B, n, S}, std::move(state)), Tensor({B, d}, std::move(task))};
  out.actions = Tensor({B, n, A}, std::move(act));
  out.weight = Tensor({B, n}, std::move(w));
  return out;
}

std::vector<Window> er_sample_batch(const std::vector<Demo>& buffer, const std::vector<Demo>& current, Index batch_size,
                                    std::mt19937_64& rng) {
  if (current.empty()) throw DataError("er_sample_batch: no current data");
  const Index from_buffer = buffer.empty() ? 0 : (batch_size + 1) / 2;
  std::vector<Window> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  const auto draw = [&](const std::vector<Demo>& pool) {
    const Demo& d = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    out.push_back({d, std::uniform_int_distribution<Index>(0, d.traj->length() - 1)(rng)});
  };
  for (Index i = 0; i < from_buffer; ++i) draw(buffer);
  for (Index i = from_buffer; i < batch_size; ++i) draw(current);
  return out;
}

// ---- optimisation -------------------------------------------------------------------------

double lr_at(const TrainConfig& cfg, Index step, Index total_steps) {
  if (step < cfg.warmup_steps) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  const Index span = total_steps - cfg.warmup_steps;
  if (span <= 0) return cfg.lr;
  return cfg.lr * std::max(0.0, static_cast<double>(total_steps - step) / static_cast<double>(span));
}

void AdamW::step(std::map<std::string, Tensor*>& params, const std::map<std::string, Vec>& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, tensor] : params) {
    const auto g = grads.find(name);
    if (g == grads.end()) continue;
    auto [it, fresh] = moments_.try_emplace(name);
    auto& [m, v] = it->second;
    if (fresh) {
      m = Vec::Zero(tensor->numel());
      v = Vec::Zero(tensor->numel());
    }
    m = cfg_.beta1 * m + (1 - cfg_.beta1) * g->second;
    v = cfg_.beta2 * v + (1 - cfg_.beta2) * g->second.cwiseAbs2();
    Vec theta = tensor->values();
    if (tensor->rank() >= 2) theta *= 1.0 - lr * cfg_.weight_decay;
    theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.adam_eps);
    *tensor = Tensor(tensor->shape(), std::move(theta));
  }
}

double clip_global_norm(std::map<std::string, Vec>& grads, double max_norm) {
  double sq = 0;
  for (const auto& [name, g] : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm)
    for (auto& [name, g] : grads) g *= max_norm / norm;
  return norm;
}

// ---- EWC -----------------------------------------------------------------------------------

Tensor ewc_penalty(const ParamTable& params, const EwcState& state) {
  Tensor total = Tensor::scalar(0.0);
  for (const auto& [name, f] : state.fisher) {
    const Tensor& theta = params(name);
    const Vec& anchor = state.anchor.at(name);
    if (f.size() != theta.numel() || anchor.size() != theta.numel())
      throw ShapeError("ewc_penalty: Fisher for '" + name + "' does not match the parameter");
    const Tensor d = sub(theta, Tensor(theta.shape(), anchor));
    total = add(total, sum(mul(mul(d, d), Tensor(theta.shape(), f))));
  }
  return scale(total, 0.5 * state.lambda);
}

std::map<std::string, Vec> fisher_diagonal(const ParamTable& params, const std::set<std::string>& names, Index samples,
                                           const LogProbFn& log_prob) {
  std::map<std::string, Vec> acc;
  for (const auto& name : names) acc[name] = Vec::Zero(params(name).numel());
  for (Index i = 0; i < samples; ++i) {
    Tape tape;
    ParamTable vars = params;
    std::map<std::string, Tensor> leaves;
    for (const auto& name : names) {
      leaves[name] = tape.variable(params(name));
      vars.set(name, leaves[name]);
    }
    const Gradients g = tape.backward(log_prob(vars, i));
    for (const auto& name : names)
      if (const Vec* gi = g.of(leaves[name])) acc[name] += gi->cwiseAbs2();
  }
  if (samples > 0)
    for (auto& [name, v] : acc) v /= static_cast<double>(samples);
  return acc;
}

void fisher_ema(EwcState& state, const std::map<std::string, Vec>& fresh) {
  if (!state.initialized()) {
    state.fisher = fresh;
    return;
  }
  for (const auto& [name, f] : fresh) {
    auto it = state.fisher.find(name);
    if (it == state.fisher.end()) {
      state.fisher[name] = f;
    } else {
      if (it->second.size() != f.size()) throw ShapeError("fisher_ema: shape change for '" + name + "'");
      it->second = state.gamma * it->second + (1 - state.gamma) * f;
    }
  }
}

namespace {

Vec sample_gmm(const GmmParams& g, std::mt19937_64& rng) {
  Vec w = (g.logits.array() - g.logits.maxCoeff()).exp();
  std::discrete_distribution<Index> pick(w.data(), w.data() + w.size());
  const Index k = pick(rng);
  std::normal_distribution<double> n(0.0, 1.0);
  Vec a(g.means.cols());
  for (Index j = 0; j < a.size(); ++j) a[j] = g.means(k, j) + g.stds(k, j) * n(rng);
  return a;
}

}  // namespace

void fisher_update(EwcState& state, const PolicySpec& spec, const PolicyWeights& w, const std::set<std::string>& names,
                   const std::vector<Demo>& demos, const TrainConfig& cfg, std::uint64_t seed) {
  struct Point {
    Demo demo;
    Index t;
  };
  std::vector<Point> points;
  for (const Demo& d : demos)
    for (Index t = 0; t < d.traj->length(); ++t) points.push_back({d, t});
  std::mt19937_64 rng(seed);
  if (cfg.fisher_samples > 0 && cfg.fisher_samples < static_cast<Index>(points.size())) {
    std::shuffle(points.begin(), points.end(), rng);
    points.resize(static_cast<std::size_t>(cfg.fisher_samples));
  }
  const ParamTable p = bind(w);
  const ForwardConfig fwd{};
  state.lambda = cfg.ewc_lambda;
  state.gamma = cfg.ewc_gamma;

  // Each state is scored at the end of its own history window.
  const auto log_prob = [&](const ParamTable& vars, Index i) {
    const Point& pt = points[static_cast<std::size_t>(i)];
    const Index start = std::max<Index>(0, pt.t - spec.max_seq_len + 1);
    Batch b = make_batch(spec, {{pt.demo, start}});
    const Index last = pt.t - start;
    Vec weight = Vec::Zero(spec.max_seq_len);
    weight[last] = 1.0;
    Vec act = b.actions.values();
    if (!cfg.fisher_empirical) {
      const GmmParams g = gmm_params(spec, policy_forward(spec, p, b.input, fwd), 0, last);
      act.segment(last * spec.action_dim, spec.action_dim) = sample_gmm(g, rng);
    }
    const Tensor nll = gmm_nll(spec, policy_forward(spec, vars, b.input, fwd), Tensor(b.actions.shape(), act),
                               Tensor({1, spec.max_seq_len}, weight));
    return scale(nll, -1.0);
  };
  fisher_ema(state, fisher_diagonal(p, names, static_cast<Index>(points.size()), log_prob));
  state.anchor.clear();
  for (const auto& name : names) state.anchor[name] = w.at(name).values();
}

// ---- training ------------------------------------------------------------------------------

double dataset_nll(const PolicySpec& spec, const ParamTable& p, const ForwardConfig& cfg,
                   const std::vector<Demo>& demos, Index batch_size) {
  const std::vector<Window> windows = all_windows(demos);
  if (windows.empty()) throw DataError("dataset_nll: no data");
  double total = 0, count = 0;
  for (std::size_t i = 0; i < windows.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::vector<Window> chunk(windows.begin() + static_cast<std::ptrdiff_t>(i),
                                    windows.begin() + static_cast<std::ptrdiff_t>(
                                                          std::min(windows.size(), i + static_cast<std::size_t>(batch_size))));
    const Batch b = make_batch(spec, chunk);
    const double w = b.weight.values().sum();
    total += w * gmm_nll(spec, policy_forward(spec, p, b.input, cfg), b.actions, b.weight).item();
    count += w;
  }
  return total / count;
}

TrainResult bc_train(const PolicySpec& spec, PolicyWeights& w, AdapterBundle* bundle, const std::set<std::string>& mask,
                     const std::vector<Demo>& train, const std::vector<Demo>& val, const TrainConfig& cfg,
                     Index epochs, std::uint64_t stream, const TrainHooks& hooks) {
  cfg.validate();
  if (train.empty()) throw DataError("bc_train: empty training set");
  if (mask.empty()) throw ConfigError("bc_train: nothing to train");

  // Trainable tensors: bundle-owned names are updated in the bundle, the rest
  // in a local copy that is written back to `w` after every step.
  TensorMap base_live;
  std::map<std::string, Tensor*> slots;
  for (const auto& name : mask) {
    Tensor* slot = nullptr;
    if (bundle)
      for (TensorMap* m : {&bundle->adapters, &bundle->fusion, &bundle->head})
        if (auto it = m->find(name); it != m->end()) slot = &it->second;
    if (!slot) slot = &(base_live[name] = w.at(name));
    slots[name] = slot;
  }

  std::vector<Window> windows = all_windows(train);
  const Index B = cfg.batch_size;
  const Index per_epoch = (static_cast<Index>(windows.size()) + B - 1) / B;
  const Index total_steps = per_epoch * epochs;
  if (cfg.warmup_steps > total_steps)
    throw ConfigError("train.warmup_steps (" + std::to_string(cfg.warmup_steps) + ") exceeds the " +
                      std::to_string(total_steps) + " steps of this stage");

  std::mt19937_64 rng(hash_combine(cfg.seed, stream));
  std::vector<Index> order(windows.size());
  std::iota(order.begin(), order.end(), Index{0});
  AdamW opt(cfg);
  TrainResult result;
  ForwardConfig fwd = forward_config(bundle);
  fwd.train = true;
  fwd.dropout_seed = hash_combine(cfg.seed, hash_combine(stream, 0xd70));
  ForwardConfig eval_fwd = forward_config(bundle);

  Index step = 0;
  Index first_epoch = 1;
  if (hooks.state && hooks.state->epoch > 0) {
    const TrainState& s = *hooks.state;
    if (s.order.size() != order.size() || s.epoch > epochs)
      throw DataError("bc_train: saved state does not match this training set");
    std::istringstream(s.rng) >> rng;
    order = s.order;
    opt.restore(s.moments, s.opt_steps);
    result = s.result;
    step = s.step;
    first_epoch = s.epoch + 1;
  }

  for (Index epoch = first_epoch; epoch <= epochs; ++epoch) {
    if (!hooks.replay) std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0, epoch_weight = 0;
    for (Index bi = 0; bi < per_epoch; ++bi, ++step) {
      std::vector<Window> chosen;
      if (hooks.replay) {
        chosen = er_sample_batch(*hooks.replay, train, B, rng);
      } else {
        for (Index k = bi * B; k < std::min<Index>((bi + 1) * B, static_cast<Index>(order.size())); ++k)
          chosen.push_back(windows[order[k]]);
      }
      const Batch batch = make_batch(spec, chosen);

      Tape tape;
      ParamTable vars = bind(w, bundle);
      std::map<std::string, Tensor> leaves;
      for (const auto& [name, slot] : slots) {
        leaves[name] = tape.variable(*slot);
        vars.set(name, leaves[name]);
      }
      fwd.step = static_cast<std::uint64_t>(step);
      const Tensor nll = gmm_nll(spec, policy_forward(spec, vars, batch.input, fwd), batch.actions, batch.weight);
      Tensor loss = nll;
      if (hooks.regularizer) loss = add(loss, hooks.regularizer(vars));
      if (!std::isfinite(loss.item()))
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                             " (nll " + std::to_string(nll.item()) + ")");
      const Gradients g = tape.backward(loss);
      std::map<std::string, Vec> grads;
      for (const auto& [name, leaf] : leaves)
        grads[name] = g.of(leaf) ? *g.of(leaf) : Vec::Zero(leaf.numel());
      clip_global_norm(grads, cfg.grad_clip);
      opt.step(slots, grads, lr_at(cfg, step, total_steps));
      for (auto& [name, t] : base_live) w.set(name, t);

      const double bw = batch.weight.values().sum();
      epoch_loss += nll.item() * bw;
      epoch_weight += bw;
    }
    result.train_nll.push_back(epoch_loss / epoch_weight);
    if (!val.empty()) result.val_nll.push_back(dataset_nll(spec, bind(w, bundle), eval_fwd, val, B));
    if (hooks.log) {
      *hooks.log << "  epoch " << epoch << "/" << epochs << " train_nll " << result.train_nll.back();
      if (!val.empty()) *hooks.log << " val_nll " << result.val_nll.back();
      *hooks.log << "\n" << std::flush;
    }
    if (hooks.on_checkpoint && (epoch % cfg.eval_every_epochs == 0 || epoch == epochs)) hooks.on_checkpoint(epoch);
    if (hooks.state) {
      TrainState& s = *hooks.state;
      std::ostringstream r;
      r << rng;
      s.epoch = epoch;
      s.step = step;
      s.rng = r.str();
      s.order = order;
      s.moments = opt.moments();
      s.opt_steps = opt.steps();
      s.result = result;
      s.result.steps = step;
    }
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch);
    if (epoch == hooks.stop_after) break;
  }
  result.steps = step;
  return result;
}

Controller policy_controller(const PolicySpec& spec, const ParamTable& p, const ForwardConfig& cfg,
                             const TaskSpec& task) {
  return [spec, p, cfg, emb = task.instruction_emb](const std::vector<Observation>& history, const SceneState&) {
    try {
      return select_action(policy_forward(spec, p, history, emb, cfg));
    } catch (const NumericalError&) {
      return Vec::Constant(spec.action_dim, std::numeric_limits<double>::quiet_NaN()).eval();
    }
  };
}

// ---- metrics ---------------------------------------------------------------------------------

Fwt compute_fwt(const std::vector<double>& curve) {
  if (curve.empty()) throw DataError("compute_fwt: empty curve");
  const auto it = std::max_element(curve.begin(), curve.end());
  return {*it, static_cast<Index>(it - curve.begin())};
}

namespace {

// Success rates are short decimals (k / episodes). Sums and means run on the
// shortest decimal form of each input, in units of 1e-24, so hand-computed
// values come out exactly; anything that does not fit falls back to doubles.
using Units = __int128;
constexpr int kDecimals = 24;

std::optional<Units> to_units(double v) {
  if (!std::isfinite(v)) return std::nullopt;
  if (v == 0.0) return Units{0};
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::scientific);
  const std::string_view text(buf, static_cast<std::size_t>(res.ptr - buf));
  const std::size_t e = text.find('e');
  Units digits = 0;
  int n_digits = 0;
  for (char c : text.substr(0, e))
    if (c >= '0' && c <= '9') {
      digits = digits * 10 + (c - '0');
      ++n_digits;
    }
  int exponent = 0;
  std::from_chars(text.data() + e + 1 + (text[e + 1] == '+'), text.data() + text.size(), exponent);
  const int shift = exponent - (n_digits - 1) + kDecimals;
  if (shift < 0 || shift + n_digits > 36) return std::nullopt;
  for (int i = 0; i < shift; ++i) digits *= 10;
  return text[0] == '-' ? -digits : digits;
}

// num / den * 1e-24, via a decimal string that from_chars rounds correctly.
double exact_ratio(Units num, Index den) {
  const bool neg = num < 0;
  if (neg) num = -num;
  Units q = num / den, r = num % den;
  std::string text;
  do {
    text.insert(text.begin(), static_cast<char>('0' + static_cast<int>(q % 10)));
    q /= 10;
  } while (q > 0);
  if (r != 0) {
    text += '.';
    for (int i = 0; i < 24 && r != 0; ++i) {
      r *= 10;
      text += static_cast<char>('0' + static_cast<int>(r / den));
      r %= den;
    }
  }
  text = (neg ? "-" : "") + text + "e-" + std::to_string(kDecimals);
  double out = 0;
  std::from_chars(text.data(), text.data() + text.size(), out);
  return out;
}

// sum(plus) - sum(minus), divided by den.
std::optional<double> decimal_mean(const std::vector<double>& plus, const std::vector<double>& minus, Index den) {
  Units total = 0;
  for (const auto* v : {&plus, &minus})
    for (double x : *v) {
      const auto u = to_units(x);
      if (!u) return std::nullopt;
      total += v == &plus ? *u : -*u;
    }
  return exact_ratio(total, den);
}

}  // namespace

double compute_bwt(const std::vector<double>& fwt, const std::vector<double>& revisited) {
  if (fwt.empty()) throw DataError("compute_bwt: needs at least one earlier stage");
  if (revisited.size() != fwt.size()) throw DataError("compute_bwt: missing S_i evaluations");
  const Index n = static_cast<Index>(fwt.size());
  if (auto exact = decimal_mean(revisited, fwt, n)) return *exact;
  double s = 0;
  for (std::size_t i = 0; i < fwt.size(); ++i) s += revisited[i] - fwt[i];
  return s / static_cast<double>(n);
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  if (auto exact = decimal_mean(v, {}, static_cast<Index>(v.size()))) return *exact;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---- ledger ------------------------------------------------------------------------------------

namespace {

json count_json(const ParamCount& c) {
  return {{"per_group", c.per_group}, {"trainable", c.trainable}, {"total", c.total}};
}

ParamCount count_from(const json& j) {
  ParamCount c;
  c.per_group = j.at("per_group").get<std::map<std::string, Index>>();
  c.trainable = j.at("trainable").get<Index>();
  c.total = j.at("total").get<Index>();
  return c;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

json to_json(const StageRecord& r) {
  json cps = json::array();
  for (const CheckpointEval& c : r.checkpoints) cps.push_back({{"epoch", c.epoch}, {"success", c.success}});
  return {{"stage_id", r.stage_id},
          {"suite_id", r.suite_id},
          {"strategy", r.strategy},
          {"epochs", r.epochs},
          {"checkpoints", cps},
          {"best_checkpoint", r.best_checkpoint},
          {"fwt", r.fwt},
          {"revisit", r.revisit},
          {"bwt", r.bwt ? json(*r.bwt) : json(nullptr)},
          {"base_digest", r.base_digest},
          {"params", count_json(r.params)},
          {"er_buffer_size", r.er_buffer_size},
          {"train_nll", r.train_nll},
          {"val_nll", r.val_nll}};
}

StageRecord stage_from_json(const json& j) {
  StageRecord r;
  r.stage_id = j.at("stage_id").get<std::string>();
  r.suite_id = j.at("suite_id").get<std::string>();
  r.strategy = j.at("strategy").get<std::string>();
  r.epochs = j.at("epochs").get<Index>();
  for (const json& c : j.at("checkpoints"))
    r.checkpoints.push_back(
        {c.at("epoch").get<Index>(), c.at("success").get<std::map<std::string, std::vector<double>>>()});
  r.best_checkpoint = j.at("best_checkpoint").get<Index>();
  r.fwt = j.at("fwt").get<double>();
  r.revisit = j.at("revisit").get<std::map<std::string, double>>();
  if (!j.at("bwt").is_null()) r.bwt = j.at("bwt").get<double>();
  r.base_digest = j.at("base_digest").get<std::string>();
  r.params = count_from(j.at("params"));
  r.er_buffer_size = j.at("er_buffer_size").get<Index>();
  r.train_nll = j.at("train_nll").get<std::vector<double>>();
  r.val_nll = j.at("val_nll").get<std::vector<double>>();
  return r;
}

const StageRecord& RunLedger::stage(const std::string& id) const {
  for (const StageRecord& s : stages)
    if (s.stage_id == id) return s;
  throw DataError("stage '" + id + "' is not in the ledger");
}

json to_json(const RunLedger& l) {
  json stages = json::array();
  for (const StageRecord& s : l.stages) stages.push_back(to_json(s));
  return {{"format_version", kFormatVersion},
          {"kind", "run_ledger"},
          {"config", l.config},
          {"pretrain_digest", l.pretrain_digest},
          {"stages", stages}};
}

RunLedger ledger_from_json(const json& j) {
  RunLedger l;
  try {
    if (j.at("kind") != "run_ledger") throw DataError("not a run ledger");
    if (j.at("format_version").get<int>() != kFormatVersion)
      throw DataError("unsupported ledger format_version " + j.at("format_version").dump());
    l.config = j.at("config");
    l.pretrain_digest = j.at("pretrain_digest").get<std::string>();
    for (const json& s : j.at("stages")) l.stages.push_back(stage_from_json(s));
  } catch (const json::exception& e) {
    throw DataError(std::string("bad ledger: ") + e.what());
  }
  return l;
}

std::string metrics_csv(const RunLedger& l) {
  std::ostringstream out;
  out << "stage,epoch,task,split,metric,value\n";
  for (const StageRecord& s : l.stages) {
    for (std::size_t e = 0; e < s.train_nll.size(); ++e)
      out << s.stage_id << "," << e + 1 << ",all,train,nll," << num(s.train_nll[e]) << "\n";
    for (std::size_t e = 0; e < s.val_nll.size(); ++e)
      out << s.stage_id << "," << e + 1 << ",all,val,nll," << num(s.val_nll[e]) << "\n";
    for (const CheckpointEval& c : s.checkpoints)
      for (const auto& [stage, rates] : c.success)
        for (std::size_t t = 0; t < rates.size(); ++t)
          out << s.stage_id << "," << c.epoch << "," << stage << "/" << t << ",eval,success," << num(rates[t]) << "\n";
    const Index best_epoch = s.checkpoints.empty() ? 0 : s.checkpoints[static_cast<std::size_t>(s.best_checkpoint)].epoch;
    out << s.stage_id << "," << best_epoch << ",all,eval,fwt," << num(s.fwt) << "\n";
    for (const auto& [stage, v] : s.revisit)
      out << s.stage_id << "," << best_epoch << "," << stage << ",eval,revisit," << num(v) << "\n";
    if (s.bwt) out << s.stage_id << "," << best_epoch << ",all,eval,bwt," << num(*s.bwt) << "\n";
  }
  return out.str();
}

void save_ledger(const RunLedger& l, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!(f << text)) throw DataError("cannot write " + (dir / name).string());
  };
  write("ledger.json", to_json(l).dump(2) + "\n");
  write("metrics.csv", metrics_csv(l));
  json timing = json::object();
  for (const StageRecord& s : l.stages) timing[s.stage_id] = s.seconds;
  write("timing.json", timing.dump(2) + "\n");
}

RunLedger load_ledger(const std::filesystem::path& dir) {
  std::ifstream f(dir / "ledger.json");
  if (!f) throw DataError("no ledger.json in " + dir.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw DataError("corrupt ledger.json in " + dir.string() + ": " + e.what());
  }
  RunLedger l = ledger_from_json(j);
  std::ifstream t(dir / "timing.json");
  if (t) {
    try {
      const json timing = json::parse(t);
      for (StageRecord& s : l.stages)
        if (timing.contains(s.stage_id)) s.seconds = timing.at(s.stage_id).get<double>();
    } catch (const json::exception&) {
    }
  }
  return l;
}

// ---- continual run ---------------------------------------------------------------------------

std::vector<double> evaluate_suite(const PolicySpec& spec, const ParamTable& p, const ForwardConfig& cfg,
                                   const SuiteDataset& suite, Index episodes, const EvalSetup& eval) {
  std::vector<double> rates;
  for (const TaskData& t : suite.tasks)
    rates.push_back(rollout_eval(policy_controller(spec, p, cfg, t.task), t.task, episodes, eval.eval_seed, eval.params,
                                 eval.perception, spec.max_seq_len, eval.workers)
                        .rate());
  return rates;
}

ContinualRun::ContinualRun(PolicyWeights base, Strategy strategy, AdapterSpec adapter, TrainConfig cfg, EvalSetup eval,
                           json config_echo)
    : weights_(std::move(base)), strategy_(strategy), adapter_(std::move(adapter)), cfg_(cfg), eval_(std::move(eval)) {
  cfg_.validate();
  if (strategy_ == Strategy::tail) adapter_.validate(weights_.spec());
  ledger_.config = std::move(config_echo);
  ledger_.pretrain_digest = weights_.digest();
}

Index ContinualRun::buffer_size() const { return static_cast<Index>(buffer_.size()); }

std::vector<double> ContinualRun::eval_stage(const std::string& stage_id, const PolicyWeights& w,
                                             const AdapterBundle* bundle) const {
  return evaluate_suite(w.spec(), bind(w, bundle), forward_config(bundle), *data_.at(stage_id), cfg_.eval_episodes,
                        eval_);
}

const StageRecord& ContinualRun::adapt(const std::string& stage_id, const SuiteDataset& data, Index epochs) {
  if (data_.count(stage_id)) throw ConfigError("stage '" + stage_id + "' already run");
  const auto t0 = std::chrono::steady_clock::now();
  const PolicySpec& spec = weights_.spec();
  const std::uint64_t stream = hash_combine(0x57a6e, order_.size());
  const std::vector<Demo> train = train_demos(data), val = val_demos(data);
  data_[stage_id] = &data;

  StageRecord rec;
  rec.stage_id = stage_id;
  rec.suite_id = data.suite_id;
  rec.strategy = std::string(strategy_name(strategy_));
  rec.epochs = epochs;
  if (log_) *log_ << "stage " << stage_id << " (" << rec.strategy << ", " << epochs << " epochs)\n" << std::flush;

  std::optional<AdapterBundle> bundle;
  if (strategy_ == Strategy::tail) {
    const AdapterBundle* prev = order_.empty() ? nullptr : &bundles_.at(order_.back());
    bundle = init_adapter(adapter_, weights_, prev, hash_combine(cfg_.seed, stream), data.suite_id);
  }
  AdapterBundle* bp = bundle ? &*bundle : nullptr;
  const std::set<std::string> mask = build_freeze_mask(weights_, strategy_, bp);
  rec.params = count_trainable(weights_, mask, bp);

  PolicyWeights work = weights_;
  PolicyWeights best_weights = weights_;
  std::optional<AdapterBundle> best_bundle;
  double best = -1.0;
  std::vector<double> curve;

  TrainHooks hooks;
  hooks.log = log_;
  if (strategy_ == Strategy::er) {
    if (buffer_.empty() && log_) *log_ << "  replay buffer empty: training on current data only\n";
    if (!buffer_.empty()) hooks.replay = &buffer_;
  }
  if (strategy_ == Strategy::ewc && ewc_.initialized())
    hooks.regularizer = [this](const ParamTable& vars) { return ewc_penalty(vars, ewc_); };
  hooks.on_checkpoint = [&](Index epoch) {
    CheckpointEval c;
    c.epoch = epoch;
    c.success[stage_id] = evaluate_suite(spec, bind(work, bp), forward_config(bp), data, cfg_.eval_episodes, eval_);
    if (strategy_ != Strategy::tail && cfg_.eval_prior_stages)
      for (const auto& prior : order_) c.success[prior] = eval_stage(prior, work, nullptr);
    const double m = mean(c.success[stage_id]);
    if (log_) *log_ << "  checkpoint epoch " << epoch << " success " << m << "\n" << std::flush;
    curve.push_back(m);
    if (m > best) {
      best = m;
      if (bp) best_bundle = *bp;
      else best_weights = work;
    }
    rec.checkpoints.push_back(std::move(c));
  };

  const TrainResult tr = bc_train(spec, work, bp, mask, train, val, cfg_, epochs, stream, hooks);
  rec.train_nll = tr.train_nll;
  rec.val_nll = tr.val_nll;

  const Fwt f = compute_fwt(curve);
  rec.fwt = f.value;
  rec.best_checkpoint = f.checkpoint;
  if (bp) {
    bundles_[stage_id] = *best_bundle;
  } else {
    weights_ = best_weights;
  }

  // S_i: the best model of this stage on every earlier stage.
  std::vector<double> F, S;
  const CheckpointEval& best_eval = rec.checkpoints[static_cast<std::size_t>(f.checkpoint)];
  for (const auto& prior : order_) {
    double s;
    if (strategy_ == Strategy::tail)
      s = mean(eval_stage(prior, weights_, &bundles_.at(prior)));
    else if (best_eval.success.count(prior))
      s = mean(best_eval.success.at(prior));
    else
      s = mean(eval_stage(prior, weights_, nullptr));
    rec.revisit[prior] = s;
    F.push_back(ledger_.stage(prior).fwt);
    S.push_back(s);
  }
  if (!order_.empty()) rec.bwt = compute_bwt(F, S);

  if (strategy_ == Strategy::er) {
    buffer_.insert(buffer_.end(), train.begin(), train.end());
    rec.er_buffer_size = static_cast<Index>(buffer_.size());
  }
  if (strategy_ == Strategy::ewc) fisher_update(ewc_, spec, weights_, mask, train, cfg_, hash_combine(stream, 0xf15));

  rec.base_digest = weights_.digest();
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (log_)
    *log_ << "  FWT " << rec.fwt << (rec.bwt ? "  BWT " + std::to_string(*rec.bwt) : std::string()) << "  ("
          << rec.seconds << " s)\n"
          << std::flush;
  order_.push_back(stage_id);
  ledger_.stages.push_back(std::move(rec));
  return ledger_.stages.back();
}

std::set<std::string> pretrain_mask(const PolicyWeights& w) {
  std::set<std::string> mask;
  for (const auto& [name, p] : w.params())
    if (!w.frozen(p.group) || name.find(".pre_lora.") != std::string::npos) mask.insert(name);
  return mask;
}

namespace {

json checkpoints_json(const std::vector<CheckpointEval>& cps) {
  json out = json::array();
  for (const CheckpointEval& c : cps) out.push_back({{"epoch", c.epoch}, {"success", c.success}});
  return out;
}

struct PretrainProgress {
  TrainState state;
  std::vector<CheckpointEval> checkpoints;
  Index best_checkpoint = 0;
  double best = -1.0;
};

void save_progress(const std::filesystem::path& dir, const json& fingerprint, const PolicyWeights& live,
                   const PolicyWeights& best, const PretrainProgress& p) {
  namespace fs = std::filesystem;
  const fs::path next = dir / "next", current = dir / "current";
  fs::remove_all(next);
  save_checkpoint(live, next / "live");
  save_checkpoint(best, next / "best");
  TensorMap moments;
  for (const auto& [name, mv] : p.state.moments) {
    moments["m:" + name] = Tensor({static_cast<Index>(mv.first.size())}, mv.first);
    moments["v:" + name] = Tensor({static_cast<Index>(mv.second.size())}, mv.second);
  }
  const TrainState& s = p.state;
  json st = {{"fingerprint", fingerprint},
             {"epoch", s.epoch},
             {"step", s.step},
             {"rng", s.rng},
             {"order", s.order},
             {"opt_steps", s.opt_steps},
             {"train_nll", s.result.train_nll},
             {"val_nll", s.result.val_nll},
             {"checkpoints", checkpoints_json(p.checkpoints)},
             {"best_checkpoint", p.best_checkpoint},
             {"best", p.best}};
  save_tensors(next / "optim", moments, {{"train_state", st}});
  fs::remove_all(current);
  fs::rename(next, current);
}

PretrainProgress load_progress(const std::filesystem::path& dir, const json& fingerprint, PolicyWeights& live,
                               PolicyWeights& best) {
  const std::filesystem::path current = dir / "current";
  if (!std::filesystem::exists(current)) throw DataError("pretrain: no saved state under " + dir.string());
  const LoadedTensors t = load_tensors(current / "optim");
  PretrainProgress p;
  try {
    const json& st = t.manifest.at("train_state");
    if (st.at("fingerprint") != fingerprint)
      throw ConfigError("pretrain: saved state was produced by a different config or suite");
    TrainState& s = p.state;
    s.epoch = st.at("epoch").get<Index>();
    s.step = st.at("step").get<Index>();
    s.rng = st.at("rng").get<std::string>();
    s.order = st.at("order").get<std::vector<Index>>();
    s.opt_steps = st.at("opt_steps").get<Index>();
    s.result.train_nll = st.at("train_nll").get<std::vector<double>>();
    s.result.val_nll = st.at("val_nll").get<std::vector<double>>();
    s.result.steps = s.step;
    for (const json& c : st.at("checkpoints"))
      p.checkpoints.push_back(
          {c.at("epoch").get<Index>(), c.at("success").get<std::map<std::string, std::vector<double>>>()});
    p.best_checkpoint = st.at("best_checkpoint").get<Index>();
    p.best = st.at("best").get<double>();
  } catch (const json::exception& e) {
    throw DataError("pretrain: bad saved state: " + std::string(e.what()));
  }
  for (const auto& [name, tensor] : t.tensors) {
    if (name.size() < 3 || (name[0] != 'm' && name[0] != 'v') || name[1] != ':')
      throw DataError("pretrain: bad moment tensor '" + name + "'");
    auto& mv = p.state.moments[name.substr(2)];
    (name[0] == 'm' ? mv.first : mv.second) = tensor.values();
  }
  live = load_checkpoint(current / "live");
  best = load_checkpoint(current / "best");
  return p;
}

}  // namespace

PretrainResult pretrain(PolicyWeights& w, const SuiteDataset& data, const TrainConfig& cfg, Index epochs,
                        const EvalSetup& eval, const PretrainOptions& opt) {
  const json fingerprint = {{"train", to_json(cfg)},
                            {"epochs", epochs},
                            {"suite", data.suite_id},
                            {"data_seed", data.data_seed},
                            {"spec", to_json(w.spec())}};
  PolicyWeights best_weights = w;
  PretrainProgress p;
  if (opt.resume) {
    if (opt.state_dir.empty()) throw ConfigError("pretrain: resume needs a state directory");
    p = load_progress(opt.state_dir, fingerprint, w, best_weights);
    if (opt.log) *opt.log << "  resuming after epoch " << p.state.epoch << "\n";
  }
  const PolicySpec& spec = w.spec();

  TrainHooks hooks;
  hooks.log = opt.log;
  hooks.state = &p.state;
  hooks.stop_after = opt.stop_after;
  hooks.on_checkpoint = [&](Index epoch) {
    CheckpointEval c;
    c.epoch = epoch;
    c.success[data.suite_id] = evaluate_suite(spec, bind(w), {}, data, cfg.eval_episodes, eval);
    const double m = mean(c.success[data.suite_id]);
    if (opt.log) *opt.log << "  checkpoint epoch " << epoch << " success " << m << "\n" << std::flush;
    if (m > p.best) {
      p.best = m;
      best_weights = w;
      p.best_checkpoint = static_cast<Index>(p.checkpoints.size());
    }
    p.checkpoints.push_back(std::move(c));
  };
  if (!opt.state_dir.empty())
    hooks.on_epoch_end = [&](Index) { save_progress(opt.state_dir, fingerprint, w, best_weights, p); };

  PretrainResult out;
  if (p.state.epoch < epochs)
    out.train = bc_train(spec, w, nullptr, pretrain_mask(w), train_demos(data), val_demos(data), cfg, epochs,
                         0x9e7a, hooks);
  else
    out.train = p.state.result;
  out.checkpoints = p.checkpoints;
  out.best_checkpoint = p.best_checkpoint;
  out.success = p.best;
  if (p.state.epoch == epochs) w = best_weights;
  return out;
}

CircleBack ContinualRun::circle_back(const std::string& stage_id, Index epochs) {
  const StageRecord& first = ledger_.stage(stage_id);
  CircleBack out;
  out.initial = first.fwt;
  if (strategy_ == Strategy::tail) {
    out.revisit = mean(eval_stage(stage_id, weights_, &bundles_.at(stage_id)));
    return out;
  }
  const SuiteDataset& data = *data_.at(stage_id);
  std::string id = stage_id + ".revisit";
  for (int i = 2; data_.count(id); ++i) id = stage_id + ".revisit" + std::to_string(i);
  out.revisit = adapt(id, data, epochs).fwt;
  return out;
}

}  // namespace tail
