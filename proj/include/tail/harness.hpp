#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tail/adapters.hpp"
#include "tail/bench.hpp"

namespace tail {

struct TrainConfig {
  Index epochs = 100;
  Index long_horizon_epochs = 50;
  Index batch_size = 64;
  double lr = 1e-4;
  double weight_decay = 0.1;
  Index warmup_steps = 500;
  Index eval_every_epochs = 5;
  Index eval_episodes = 10;
  double grad_clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double ewc_lambda = 5e4;
  double ewc_gamma = 0.9;
  bool fisher_empirical = false;  // use dataset actions instead of a ~ p(.|s)
  Index fisher_samples = 0;       // states per Fisher estimate; 0 means every train state
  bool eval_prior_stages = true;  // non-TAIL checkpoints also score earlier stages
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// ---- data ---------------------------------------------------------------------

struct Demo {
  const Trajectory* traj;
  const TaskSpec* task;
};

// A history window: timesteps [start, start + n) of one demonstration.
struct Window {
  Demo demo;
  Index start;
};

std::vector<Demo> train_demos(const SuiteDataset& d);
std::vector<Demo> val_demos(const SuiteDataset& d);
// Every start position of every demo.
std::vector<Window> all_windows(const std::vector<Demo>& demos);

struct Batch {
  SeqBatch input;
  Tensor actions;  // [B, n, action_dim]
  Tensor weight;   // [B, n]; 0 on padding past a trajectory's end
};
Batch make_batch(const PolicySpec& spec, const std::vector<Window>& windows);

// ER: ceil(B/2) windows from the buffer and floor(B/2) from current data, each
// drawn uniformly over trajectories and then over start positions. An empty
// buffer gives B current windows.
std::vector<Window> er_sample_batch(const std::vector<Demo>& buffer, const std::vector<Demo>& current, Index batch_size,
                                    std::mt19937_64& rng);

// ---- optimisation --------------------------------------------------------------

// Linear warmup to cfg.lr, then linear decay to zero at total_steps.
double lr_at(const TrainConfig& cfg, Index step, Index total_steps);

class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}
  // Applies one update in place. Decay skips vectors (biases, norms).
  void step(std::map<std::string, Tensor*>& params, const std::map<std::string, Vec>& grads, double lr);
  Index steps() const { return t_; }

  using Moments = std::map<std::string, std::pair<Vec, Vec>>;  // name -> (m, v)
  const Moments& moments() const { return moments_; }
  void restore(Moments moments, Index steps) {
    moments_ = std::move(moments);
    t_ = steps;
  }

 private:
  TrainConfig cfg_;
  Moments moments_;
  Index t_ = 0;
};

// Scales grads so their global L2 norm is at most max_norm. Returns the norm
// before clipping.
double clip_global_norm(std::map<std::string, Vec>& grads, double max_norm);

// ---- EWC -------------------------------------------------------------------------

struct EwcState {
  std::map<std::string, Vec> fisher;
  std::map<std::string, Vec> anchor;
  double lambda = 5e4;
  double gamma = 0.9;
  bool initialized() const { return !fisher.empty(); }
};

// sum_i lambda/2 F_i (theta_i - theta*_i)^2 over the parameters in `state`.
Tensor ewc_penalty(const ParamTable& params, const EwcState& state);

// Mean over samples of the squared gradient of log_prob(vars, i).
using LogProbFn = std::function<Tensor(const ParamTable& vars, Index sample)>;
std::map<std::string, Vec> fisher_diagonal(const ParamTable& params, const std::set<std::string>& names, Index samples,
                                           const LogProbFn& log_prob);

// EMA fold of a fresh estimate: gamma * old + (1 - gamma) * fresh; the first
// estimate is taken as is.
void fisher_ema(EwcState& state, const std::map<std::string, Vec>& fresh);

// Fisher of the policy on train states, actions a ~ p(.|s) (or the dataset
// action when cfg.fisher_empirical), folded into `state`; anchors snapshot.
void fisher_update(EwcState& state, const PolicySpec& spec, const PolicyWeights& w, const std::set<std::string>& names,
                   const std::vector<Demo>& demos, const TrainConfig& cfg, std::uint64_t seed);

// ---- training --------------------------------------------------------------------

struct TrainResult {
  std::vector<double> train_nll;  // per epoch
  std::vector<double> val_nll;    // per epoch
  Index steps = 0;
};

// What bc_train needs to continue after a completed epoch.
struct TrainState {
  Index epoch = 0;  // completed epochs
  Index step = 0;
  std::string rng;            // std::mt19937_64 in its stream form
  std::vector<Index> order;   // current window permutation
  AdamW::Moments moments;
  Index opt_steps = 0;
  TrainResult result;
};

struct TrainHooks {
  // Extra differentiable loss term (EWC).
  std::function<Tensor(const ParamTable& vars)> regularizer;
  // Replaces epoch shuffling with ER batches.
  const std::vector<Demo>* replay = nullptr;
  // Called after epochs that are multiples of eval_every_epochs, and after the last.
  std::function<void(Index epoch)> on_checkpoint;
  // Resumed from when its epoch is > 0; refreshed after every epoch.
  TrainState* state = nullptr;
  std::function<void(Index epoch)> on_epoch_end;
  Index stop_after = 0;  // return early after this epoch
  std::ostream* log = nullptr;
};

// Behaviour cloning on the names in `mask`. Trainable tensors live in the
// bundle when it owns the name, otherwise in `w`. Throws NumericalError on a
// non-finite loss.
TrainResult bc_train(const PolicySpec& spec, PolicyWeights& w, AdapterBundle* bundle, const std::set<std::string>& mask,
                     const std::vector<Demo>& train, const std::vector<Demo>& val, const TrainConfig& cfg,
                     Index epochs, std::uint64_t stream, const TrainHooks& hooks = {});

// Mean masked NLL over all windows, no dropout.
double dataset_nll(const PolicySpec& spec, const ParamTable& p, const ForwardConfig& cfg,
                   const std::vector<Demo>& demos, Index batch_size);

Controller policy_controller(const PolicySpec& spec, const ParamTable& p, const ForwardConfig& cfg,
                             const TaskSpec& task);

// ---- metrics -----------------------------------------------------------------------

struct Fwt {
  double value;
  Index checkpoint;
};
// Maximum of the curve, earliest index on ties.
Fwt compute_fwt(const std::vector<double>& curve);
// mean_i (S_i - F_i), computed in decimal so that inputs like 0.7 and 0.5
// give exactly 0.2 rather than 0.19999999999999996.
double compute_bwt(const std::vector<double>& fwt, const std::vector<double>& revisited);

// ---- continual run -------------------------------------------------------------------

struct CheckpointEval {
  Index epoch = 0;
  std::map<std::string, std::vector<double>> success;  // stage id -> per-task success
};

struct StageRecord {
  std::string stage_id;
  std::string suite_id;
  std::string strategy;
  Index epochs = 0;
  std::vector<CheckpointEval> checkpoints;
  Index best_checkpoint = 0;
  double fwt = 0.0;
  std::map<std::string, double> revisit;  // S_i for every earlier stage
  std::optional<double> bwt;
  std::string base_digest;
  ParamCount params;
  Index er_buffer_size = 0;
  std::vector<double> train_nll;
  std::vector<double> val_nll;
  double seconds = 0.0;  // kept out of ledger.json
};

struct RunLedger {
  nlohmann::json config;
  std::string pretrain_digest;
  std::vector<StageRecord> stages;

  // Throws DataError for unknown ids.
  const StageRecord& stage(const std::string& id) const;
};

nlohmann::json to_json(const StageRecord& r);
StageRecord stage_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunLedger& l);
RunLedger ledger_from_json(const nlohmann::json& j);
// ledger.json, metrics.csv and timing.json.
void save_ledger(const RunLedger& l, const std::filesystem::path& dir);
RunLedger load_ledger(const std::filesystem::path& dir);
// Long format: stage,epoch,task,split,metric,value.
std::string metrics_csv(const RunLedger& l);

struct EvalSetup {
  Perception perception;
  BenchParams params;
  std::uint64_t eval_seed = 0;
  int workers = 1;
};

// Decimal-exact like compute_bwt; 0 for an empty vector.
double mean(const std::vector<double>& v);

// Per-task success of a bound policy on every task of a suite.
std::vector<double> evaluate_suite(const PolicySpec& spec, const ParamTable& p, const ForwardConfig& cfg,
                                   const SuiteDataset& suite, Index episodes, const EvalSetup& eval);

// Everything outside the frozen groups, plus the perception encoder's own
// pretraining adapters.
std::set<std::string> pretrain_mask(const PolicyWeights& w);

struct PretrainResult {
  TrainResult train;
  std::vector<CheckpointEval> checkpoints;
  Index best_checkpoint = 0;
  double success = 0.0;  // mean success of the kept (best) checkpoint
};
struct PretrainOptions {
  std::ostream* log = nullptr;
  // Rewritten after every epoch when set: live and best weights, optimiser
  // moments, RNG, history.
  std::filesystem::path state_dir;
  bool resume = false;   // continue from state_dir; `w` is replaced
  Index stop_after = 0;  // leave after this epoch without picking the best
};
// Trains `w` in place on the pretraining suite and keeps the best checkpoint.
// Resuming with another config or suite is a ConfigError.
PretrainResult pretrain(PolicyWeights& w, const SuiteDataset& data, const TrainConfig& cfg, Index epochs,
                        const EvalSetup& eval, const PretrainOptions& opt = {});

struct CircleBack {
  double initial = 0.0;
  double revisit = 0.0;
};

// Datasets passed to adapt() must outlive the run.
class ContinualRun {
 public:
  // tail uses `adapter`; the other strategies ignore it.
  ContinualRun(PolicyWeights base, Strategy strategy, AdapterSpec adapter, TrainConfig cfg, EvalSetup eval,
               nlohmann::json config_echo = {});

  const StageRecord& adapt(const std::string& stage_id, const SuiteDataset& data, Index epochs);
  CircleBack circle_back(const std::string& stage_id, Index epochs);

  const RunLedger& ledger() const { return ledger_; }
  const PolicyWeights& weights() const { return weights_; }
  const std::map<std::string, AdapterBundle>& bundles() const { return bundles_; }
  const EwcState& ewc() const { return ewc_; }
  Index buffer_size() const;
  void set_log(std::ostream* log) { log_ = log; }

 private:
  std::vector<double> eval_stage(const std::string& stage_id, const PolicyWeights& w,
                                 const AdapterBundle* bundle) const;

  PolicyWeights weights_;
  Strategy strategy_;
  AdapterSpec adapter_;
  TrainConfig cfg_;
  EvalSetup eval_;
  RunLedger ledger_;
  std::map<std::string, AdapterBundle> bundles_;
  std::map<std::string, const SuiteDataset*> data_;
  std::vector<std::string> order_;
  std::vector<Demo> buffer_;
  EwcState ewc_;
  std::ostream* log_ = nullptr;
};

}  // namespace tail
