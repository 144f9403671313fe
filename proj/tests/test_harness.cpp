#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <unistd.h>

#include "helpers.hpp"
#include "tail/errors.hpp"
#include "tail/grad_check.hpp"
#include "tail/harness.hpp"

using namespace tail;
using namespace tail::test;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("tail_harness_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

// Two small suites on the tiny host, shared by the curriculum tests.
struct World {
  PolicySpec spec = tiny_spec();
  BenchParams params;
  Perception perception{3, params.n_objects, spec.perception_dim()};
  SuiteDataset a, b, c;
  PolicyWeights base = PolicyWeights::init(spec, 5);

  World() {
    auto suite = [&](SuiteKind kind, const std::string& id, std::uint64_t seed) {
      return generate_suite(make_suite(kind, 2, seed, params, spec.embed_dim, id), 5, 4, 7, params, perception);
    };
    a = suite(SuiteKind::spatial, "a", 1);
    b = suite(SuiteKind::goal, "b", 2);
    c = suite(SuiteKind::object, "c", 3);
  }

  EvalSetup eval() const { return {perception, params, 99, 1}; }

  static TrainConfig train() {
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.lr = 3e-3;
    cfg.warmup_steps = 0;
    cfg.eval_every_epochs = 1;
    cfg.eval_episodes = 2;
    cfg.fisher_samples = 8;
    return cfg;
  }

  static AdapterSpec lora() {
    AdapterSpec s;
    s.lora_rank = 1;
    return s;
  }
};

const World& world() {
  static const World w;
  return w;
}

Trajectory fake_traj(Index task_id, Index length) {
  Trajectory t;
  t.task_id = task_id;
  t.perception = RowMat::Zero(length, 1);
  t.state = RowMat::Zero(length, 1);
  t.actions = RowMat::Zero(length, 1);
  return t;
}

// Upper 1% point of chi-square with 7 degrees of freedom.
constexpr double kChi2_7_01 = 18.4753;

}  // namespace

TEST_CASE("compute_fwt: maximum with the earliest checkpoint on ties") {
  const Fwt f = compute_fwt({0.2, 0.5, 0.4});
  CHECK(f.value == 0.5);
  CHECK(f.checkpoint == 1);
  const Fwt c = compute_fwt({0.3, 0.3});
  CHECK(c.value == 0.3);
  CHECK(c.checkpoint == 0);
  CHECK_THROWS_AS(compute_fwt({}), DataError);
}

TEST_CASE("compute_bwt: hand-computed fixtures reproduce exactly") {
  CHECK(compute_bwt({0.8}, {0.3}) == -0.5);
  CHECK(compute_bwt({0.5, 0.5}, {0.5, 0.7}) == 0.1);
  CHECK(compute_bwt({0.6, 0.9, 0.4}, {0.6, 0.9, 0.4}) == 0.0);
  CHECK_THROWS_AS(compute_bwt({}, {}), DataError);
  CHECK_THROWS_AS(compute_bwt({0.5, 0.5}, {0.5}), DataError);
}

TEST_CASE("compute_bwt and mean are exact on success rates k/10") {
  // Oracle: integer success counts, one correctly rounded division.
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> k(0, 10), len(1, 6);
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = len(rng);
    std::vector<double> F, S;
    long long num = 0;
    for (int i = 0; i < n; ++i) {
      const int f = k(rng), s = k(rng);
      F.push_back(f / 10.0);
      S.push_back(s / 10.0);
      num += s - f;
    }
    CHECK(compute_bwt(F, S) == static_cast<double>(num) / (10.0 * n));
    long long total = 0;
    for (double s : S) total += std::llround(s * 10);
    CHECK(mean(S) == static_cast<double>(total) / (10.0 * n));
  }
  CHECK(mean({0.7, 0.8, 0.9, 1.0}) == 0.85);
  CHECK(mean(std::vector<double>{}) == 0.0);
  CHECK(mean({1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("ewc_penalty: closed form, zero at the anchor, gradient") {
  EwcState st;
  st.lambda = 5e4;
  st.fisher["w"] = Vec::Constant(1, 2e-5);
  st.anchor["w"] = Vec::Zero(1);
  ParamTable p;
  p.set("w", Tensor::from_vector({0.1}));
  CHECK(std::abs(ewc_penalty(p, st).item() - 0.005) < 1e-12);

  p.set("w", Tensor::from_vector({0.0}));
  CHECK(ewc_penalty(p, st).item() == 0.0);

  std::mt19937_64 rng(3);
  for (int seed = 0; seed < 20; ++seed) {
    EwcState s;
    s.lambda = 7.0;
    const Tensor theta = randn({3, 4}, rng);
    const Tensor fisher = uniform({3, 4}, rng, 0.0, 2.0);
    const Tensor anchor = randn({3, 4}, rng);
    s.fisher["m"] = fisher.values();
    s.anchor["m"] = anchor.values();
    const auto f = [&](const Tensor& x) {
      ParamTable t;
      t.set("m", x);
      return ewc_penalty(t, s);
    };
    CHECK(f(theta).item() >= 0.0);
    CHECK(grad_check(f, theta) < 1e-6);

    Tape tape;
    const Tensor leaf = tape.variable(theta);
    const Gradients g = tape.backward(f(leaf));
    const Vec expect = s.lambda * fisher.values().cwiseProduct(theta.values() - anchor.values());
    CHECK((*g.of(leaf) - expect).cwiseAbs().maxCoeff() < 1e-12);
  }

  p.set("w", Tensor::from_vector({0.0, 1.0}));
  CHECK_THROWS_AS(ewc_penalty(p, st), ShapeError);
}

TEST_CASE("fisher_ema: first estimate kept, then the 1.1 fixture") {
  EwcState st;
  st.gamma = 0.9;
  fisher_ema(st, {{"w", Vec::Constant(1, 1.0)}});
  CHECK(st.fisher.at("w")[0] == 1.0);
  fisher_ema(st, {{"w", Vec::Constant(1, 2.0)}});
  CHECK(st.fisher.at("w")[0] == 1.1);
  CHECK_THROWS_AS(fisher_ema(st, {{"w", Vec::Constant(2, 1.0)}}), ShapeError);
}

TEST_CASE("fisher_diagonal: 1-D Gaussian gives 1/sigma^2") {
  const double mu = 0.3, sigma = 0.5;
  const Index n = 100000;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> draw(mu, sigma);
  std::vector<double> a(static_cast<std::size_t>(n));
  for (double& x : a) x = draw(rng);

  ParamTable p;
  p.set("mu", Tensor::from_vector({mu}));
  const auto log_prob = [&](const ParamTable& vars, Index i) {
    const Tensor d = sub(Tensor::from_vector({a[static_cast<std::size_t>(i)]}), vars("mu"));
    return scale(sum(mul(d, d)), -0.5 / (sigma * sigma));
  };
  const auto F = fisher_diagonal(p, {"mu"}, n, log_prob);
  const double expect = 1.0 / (sigma * sigma);
  MESSAGE("Gaussian Fisher " << F.at("mu")[0] << " vs " << expect);
  CHECK(std::abs(F.at("mu")[0] - expect) < 0.05 * expect);
}

TEST_CASE("er_sample_batch: composition and buffer uniformity") {
  std::vector<Trajectory> trajs;
  std::vector<TaskSpec> tasks(10);
  for (Index t = 0; t < 10; ++t) {
    tasks[static_cast<std::size_t>(t)].task_id = t;
    for (int i = 0; i < 3; ++i) trajs.push_back(fake_traj(t, 4 + i));
  }
  std::vector<Demo> buffer, current;
  for (const Trajectory& tr : trajs)
    (tr.task_id < 8 ? buffer : current).push_back({&tr, &tasks[static_cast<std::size_t>(tr.task_id)]});

  std::mt19937_64 rng(2);
  const auto from_buffer = [](const std::vector<Window>& w) {
    Index n = 0;
    for (const Window& x : w) n += x.demo.task->task_id < 8;
    return n;
  };
  for (Index B : {10, 11, 1, 64}) {
    const auto batch = er_sample_batch(buffer, current, B, rng);
    CHECK(static_cast<Index>(batch.size()) == B);
    CHECK(from_buffer(batch) == (B + 1) / 2);
    for (const Window& w : batch) CHECK((w.start >= 0 && w.start < w.demo.traj->length()));
  }
  const auto first = er_sample_batch({}, current, 10, rng);
  CHECK(first.size() == 10);
  CHECK(from_buffer(first) == 0);
  CHECK_THROWS_AS(er_sample_batch(buffer, {}, 10, rng), DataError);

  std::vector<double> counts(8, 0.0);
  double total = 0;
  for (int i = 0; i < 10000; ++i)
    for (const Window& w : er_sample_batch(buffer, current, 10, rng))
      if (w.demo.task->task_id < 8) {
        counts[static_cast<std::size_t>(w.demo.task->task_id)] += 1;
        total += 1;
      }
  double chi2 = 0;
  for (double c : counts) chi2 += (c - total / 8) * (c - total / 8) / (total / 8);
  MESSAGE("buffer chi-square " << chi2 << " (critical " << kChi2_7_01 << ")");
  CHECK(total == 50000);
  CHECK(chi2 < kChi2_7_01);
}

TEST_CASE("lr_at: linear warmup then linear decay to zero") {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.warmup_steps = 10;
  CHECK(lr_at(cfg, 0, 110) == doctest::Approx(1e-4));
  CHECK(lr_at(cfg, 9, 110) == doctest::Approx(1e-3));
  CHECK(lr_at(cfg, 10, 110) == doctest::Approx(1e-3));
  CHECK(lr_at(cfg, 60, 110) == doctest::Approx(5e-4));
  CHECK(lr_at(cfg, 110, 110) == 0.0);
  for (Index s = 11; s < 110; ++s) CHECK(lr_at(cfg, s, 110) < lr_at(cfg, s - 1, 110));
}

TEST_CASE("bc_train: lr = 0 leaves every weight and the loss unchanged") {
  const World& W = world();
  PolicySpec spec = W.spec;
  spec.dropout = 0.0;
  PolicyWeights w = PolicyWeights::init(spec, 1);
  const PolicyWeights before = w;
  TrainConfig cfg = World::train();
  cfg.lr = 0.0;
  const auto r = bc_train(spec, w, nullptr, build_freeze_mask(w, Strategy::fft, nullptr), train_demos(W.a),
                          val_demos(W.a), cfg, 3, 0);
  CHECK(w.digest() == before.digest());
  REQUIRE(r.val_nll.size() == 3);
  CHECK(r.val_nll[1] == r.val_nll[0]);
  CHECK(r.val_nll[2] == r.val_nll[0]);
  CHECK(r.train_nll[2] == doctest::Approx(r.train_nll[0]).epsilon(1e-12));
}

TEST_CASE("bc_train: parameters outside the mask stay bit-identical") {
  const World& W = world();
  PolicyWeights w = W.base;
  TrainConfig cfg = World::train();
  bc_train(W.spec, w, nullptr, build_freeze_mask(w, Strategy::fpf, nullptr), train_demos(W.a), {}, cfg, 2, 0);
  for (ParamGroup g : kAllGroups) {
    const bool trained = g == ParamGroup::fusion || g == ParamGroup::policy_head;
    CHECK_MESSAGE((w.digest(g) != W.base.digest(g)) == trained, group_name(g));
  }
}

TEST_CASE("bc_train: overfits a single (s, a) pair") {
  PolicySpec spec = tiny_spec();
  spec.gmm_modes = 1;
  spec.dropout = 0.0;
  std::mt19937_64 rng(4);
  Trajectory tr = fake_traj(0, 1);
  tr.perception = randn({1, spec.perception_dim()}, rng).values().transpose();
  tr.state = RowMat::Constant(1, 3, 0.4);
  tr.actions = RowMat::Constant(1, 3, 0.05);
  TaskSpec task;
  task.instruction_emb = randn({spec.embed_dim}, rng).values();
  const std::vector<Demo> data = {{&tr, &task}};

  PolicyWeights w = PolicyWeights::init(spec, 2);
  TrainConfig cfg = World::train();
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.0;
  const auto r = bc_train(spec, w, nullptr, build_freeze_mask(w, Strategy::fft, nullptr), data, data, cfg, 2000, 0);
  for (std::size_t e = 1; e < 10; ++e) CHECK(r.train_nll[e] < r.train_nll[e - 1]);
  const double floor = 0.5 * 3 * std::log(2 * std::numbers::pi * spec.gmm_min_std * spec.gmm_min_std);
  MESSAGE("one-sample NLL " << r.val_nll.front() << " -> " << r.val_nll.back() << " (floor " << floor << ")");
  CHECK(r.val_nll.back() >= floor);
  CHECK(r.val_nll.back() < r.val_nll.front() - 10.0);
}

TEST_CASE("bc_train: configuration and numerical errors") {
  const World& W = world();
  PolicyWeights w = W.base;
  TrainConfig cfg = World::train();
  cfg.warmup_steps = 1000;
  const auto mask = build_freeze_mask(w, Strategy::fft, nullptr);
  CHECK_THROWS_AS(bc_train(W.spec, w, nullptr, mask, train_demos(W.a), {}, cfg, 1, 0), ConfigError);
  cfg.warmup_steps = 0;
  CHECK_THROWS_AS(bc_train(W.spec, w, nullptr, mask, {}, {}, cfg, 1, 0), DataError);
  TrainHooks hooks;
  hooks.regularizer = [](const ParamTable&) { return Tensor::scalar(std::numeric_limits<double>::quiet_NaN()); };
  CHECK_THROWS_AS(bc_train(W.spec, w, nullptr, mask, train_demos(W.a), {}, cfg, 1, 0, hooks), NumericalError);
}

TEST_CASE("pretrain: an interrupted run resumes to the same result") {
  const World& W = world();
  TrainConfig cfg = World::train();
  cfg.eval_every_epochs = 2;
  const fs::path dir = scratch_dir("resume");

  PolicyWeights straight = W.base;
  const PretrainResult full = pretrain(straight, W.a, cfg, 4, W.eval());

  PolicyWeights first = W.base;
  PretrainOptions opt;
  opt.state_dir = dir;
  opt.stop_after = 2;
  const PretrainResult half = pretrain(first, W.a, cfg, 4, W.eval(), opt);
  CHECK(half.train.train_nll.size() == 2);

  PolicyWeights resumed = PolicyWeights::init(W.spec, 123);  // replaced from the state
  opt.stop_after = 0;
  opt.resume = true;
  const PretrainResult rest = pretrain(resumed, W.a, cfg, 4, W.eval(), opt);
  CHECK(rest.train.train_nll == full.train.train_nll);
  CHECK(rest.train.val_nll == full.train.val_nll);
  CHECK(rest.train.steps == full.train.steps);
  CHECK(rest.checkpoints.size() == full.checkpoints.size());
  CHECK(rest.success == full.success);
  CHECK(resumed.digest() == straight.digest());

  TrainConfig other = cfg;
  other.lr = 1e-3;
  CHECK_THROWS_AS(pretrain(resumed, W.a, other, 4, W.eval(), opt), ConfigError);
  opt.state_dir = dir / "missing";
  CHECK_THROWS_AS(pretrain(resumed, W.a, cfg, 4, W.eval(), opt), DataError);
  fs::remove_all(dir);
}

TEST_CASE("continual run: TAIL keeps the base and has zero BWT") {
  const World& W = world();
  ContinualRun run(W.base, Strategy::tail, World::lora(), World::train(), W.eval());
  run.adapt("a", W.a, 2);
  run.adapt("b", W.b, 2);
  const StageRecord& c = run.adapt("c", W.c, 2);
  CHECK(run.weights().digest() == W.base.digest());
  CHECK(run.ledger().pretrain_digest == W.base.digest());
  for (const StageRecord& s : run.ledger().stages) CHECK(s.base_digest == W.base.digest());
  CHECK_FALSE(run.ledger().stage("a").bwt.has_value());
  REQUIRE(c.bwt.has_value());
  CHECK(*c.bwt == 0.0);
  CHECK(*run.ledger().stage("b").bwt == 0.0);
  CHECK(c.revisit.at("a") == run.ledger().stage("a").fwt);
  CHECK(run.bundles().size() == 3);
  CHECK(c.params.trainable > 0);
  CHECK(c.params.trainable < c.params.total);

  const CircleBack back = run.circle_back("a", 2);
  CHECK(back.revisit == back.initial);
  CHECK_THROWS_AS(run.circle_back("never", 2), DataError);
  CHECK_THROWS_AS(run.adapt("a", W.a, 1), ConfigError);
}

TEST_CASE("continual run: FFT changes the base, ER grows its buffer, EWC anchors") {
  const World& W = world();
  {
    ContinualRun run(W.base, Strategy::fft, {}, World::train(), W.eval());
    run.adapt("a", W.a, 1);
    CHECK(run.weights().digest() != W.base.digest());
    const StageRecord& b = run.adapt("b", W.b, 1);
    REQUIRE(b.bwt.has_value());
    CHECK(*b.bwt == b.revisit.at("a") - run.ledger().stage("a").fwt);
    CHECK(b.checkpoints.front().success.count("a") == 1);
  }
  {
    ContinualRun run(W.base, Strategy::er, {}, World::train(), W.eval());
    Index expect = 0;
    for (const auto* d : {&W.a, &W.b, &W.c}) {
      const StageRecord& s = run.adapt(d->suite_id, *d, 1);
      expect += d->train_count();
      CHECK(s.er_buffer_size == expect);
      CHECK(run.buffer_size() == expect);
    }
  }
  {
    ContinualRun run(W.base, Strategy::ewc, {}, World::train(), W.eval());
    run.adapt("a", W.a, 1);
    const EwcState& e = run.ewc();
    REQUIRE(e.initialized());
    for (const auto& [name, f] : e.fisher) {
      CHECK(f.minCoeff() >= 0.0);
      CHECK(e.anchor.at(name) == run.weights().at(name).values());
    }
    CHECK(ewc_penalty(bind(run.weights()), e).item() == 0.0);
    run.adapt("b", W.b, 1);
    CHECK(run.weights().digest() != W.base.digest());
  }
}

TEST_CASE("continual run: reruns give a bit-identical ledger that round-trips") {
  const World& W = world();
  auto run_once = [&] {
    ContinualRun run(W.base, Strategy::er, {}, World::train(), W.eval(), nlohmann::json{{"echo", 1}});
    run.adapt("a", W.a, 2);
    run.adapt("b", W.b, 2);
    return run.ledger();
  };
  const RunLedger first = run_once(), second = run_once();
  CHECK(to_json(first).dump() == to_json(second).dump());
  CHECK(metrics_csv(first) == metrics_csv(second));

  const fs::path dir = scratch_dir("ledger");
  save_ledger(first, dir);
  const RunLedger back = load_ledger(dir);
  CHECK(to_json(back).dump() == to_json(first).dump());
  CHECK(back.config == nlohmann::json{{"echo", 1}});
  std::ifstream csv(dir / "metrics.csv");
  std::stringstream text;
  text << csv.rdbuf();
  CHECK(text.str() == metrics_csv(first));
  CHECK(fs::exists(dir / "timing.json"));
  CHECK_THROWS_AS(load_ledger(dir / "missing"), DataError);
  CHECK_THROWS_AS(first.stage("zzz"), DataError);
  fs::remove_all(dir);
}

TEST_CASE("TrainConfig JSON round trip and validation") {
  TrainConfig c;
  c.lr = 3e-4;
  c.fisher_empirical = true;
  CHECK(train_config_from_json(to_json(c)) == c);
  nlohmann::json j = to_json(c);
  j["lrr"] = 1;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
  j = to_json(c);
  j["batch_size"] = 0;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
  j = to_json(c);
  j["lr"] = -1;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
}
