#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>

#include <unistd.h>

#include "helpers.hpp"
#include "tail/bench.hpp"
#include "tail/errors.hpp"

using namespace tail;
using namespace tail::test;
namespace fs = std::filesystem;

namespace {

const BenchParams kParams{};

fs::path scratch_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("tail_bench_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool run_expert(const TaskSpec& task, SceneState s) {
  for (Index t = 0; t < task.horizon && !goal_satisfied(s, task); ++t) s = step(s, expert_action(s, task, kParams), kParams);
  return goal_satisfied(s, task);
}

}  // namespace

TEST_CASE("make_suite") {
  SUBCASE("deterministic") {
    CHECK(make_suite(SuiteKind::goal, 8, 0, kParams, 16, "goal") == make_suite(SuiteKind::goal, 8, 0, kParams, 16, "goal"));
    CHECK_FALSE(make_suite(SuiteKind::goal, 8, 0, kParams, 16, "goal") ==
                make_suite(SuiteKind::goal, 8, 1, kParams, 16, "goal"));
  }
  SUBCASE("object suites share one layout and differ in target") {
    BenchParams p = kParams;
    p.n_objects = 8;
    const auto tasks = make_suite(SuiteKind::object, 8, 0, p, 16, "object");
    std::set<Index> targets;
    for (const TaskSpec& t : tasks) {
      CHECK(t.layout == tasks[0].layout);
      CHECK(t.goals[0].center == tasks[0].goals[0].center);
      targets.insert(t.goals[0].object);
    }
    CHECK(targets.size() == 8);
    CHECK_THROWS_AS(make_suite(SuiteKind::object, 9, 0, p, 16, "object"), ConfigError);
  }
  SUBCASE("goal suites keep the layout and spread the goals") {
    const auto tasks = make_suite(SuiteKind::goal, 8, 3, kParams, 16, "goal");
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      CHECK(tasks[i].layout == tasks[0].layout);
      CHECK(tasks[i].goals[0].object == tasks[0].goals[0].object);
      for (std::size_t j = 0; j < i; ++j)
        CHECK((tasks[i].goals[0].center - tasks[j].goals[0].center).norm() >= 2 * kParams.goal_radius);
    }
  }
  SUBCASE("spatial suites permute one set of positions") {
    const auto tasks = make_suite(SuiteKind::spatial, 8, 4, kParams, 16, "spatial");
    std::set<std::vector<double>> layouts;
    for (const TaskSpec& t : tasks) {
      CHECK(t.goals[0].center == tasks[0].goals[0].center);
      CHECK(t.goals[0].object == 0);
      std::vector<double> flat;
      for (const Vec2& p : t.layout) flat.insert(flat.end(), {p.x(), p.y()});
      layouts.insert(flat);
      for (const Vec2& p : t.layout)
        CHECK(std::count(tasks[0].layout.begin(), tasks[0].layout.end(), p) == 1);
    }
    CHECK(layouts.size() == 8);
    CHECK_THROWS_AS(make_suite(SuiteKind::spatial, 25, 0, kParams, 16, "spatial"), ConfigError);
  }
  SUBCASE("long-horizon tasks have two subgoals on distinct objects") {
    for (const TaskSpec& t : make_suite(SuiteKind::long_horizon, 10, 5, kParams, 16, "long")) {
      REQUIRE(t.goals.size() == 2);
      CHECK(t.goals[0].object != t.goals[1].object);
      CHECK(t.horizon == kParams.long_horizon);
    }
  }
  SUBCASE("goal regions inside the workspace, instructions frozen") {
    for (SuiteKind k : {SuiteKind::pretrain, SuiteKind::spatial, SuiteKind::goal, SuiteKind::object,
                        SuiteKind::long_horizon}) {
      const auto tasks = make_suite(k, 4, 9, kParams, 16, std::string(kind_name(k)));
      for (const TaskSpec& t : tasks) {
        CHECK(t.instruction_emb.size() == 16);
        for (const Subgoal& g : t.goals) {
          CHECK(g.center.minCoeff() >= t.goal_radius);
          CHECK(g.center.maxCoeff() <= 1 - t.goal_radius);
        }
        CHECK(task_from_json(nlohmann::json::parse(to_json(t).dump())) == t);
      }
    }
  }
  SUBCASE("no tasks") { CHECK_THROWS_AS(make_suite(SuiteKind::goal, 0, 0, kParams, 16, "goal"), ConfigError); }
}

TEST_CASE("expert_action") {
  const TaskSpec task = make_suite(SuiteKind::pretrain, 1, 2, kParams, 8, "p")[0];
  const Index target = task.goals[0].object;
  SceneState s = sample_initial(task, kParams, 7);

  SUBCASE("grips when on the target") {
    s.agent = s.objects[static_cast<std::size_t>(target)];
    const Vec a = expert_action(s, task, kParams);
    CHECK(a[2] > 0.5);
    CHECK(a.head(2).norm() < 1e-12);
    const SceneState n = step(s, a, kParams);
    CHECK(n.held == target);
  }
  SUBCASE("releases inside the goal region") {
    s.agent = task.goals[0].center;
    s.held = target;
    s.objects[static_cast<std::size_t>(target)] = s.agent;
    const Vec a = expert_action(s, task, kParams);
    CHECK(a[2] <= 0.5);
    CHECK(goal_satisfied(step(s, a, kParams), task));
  }
  SUBCASE("speed is clipped") {
    s.agent = Vec2(0.0, 0.0);
    s.objects[static_cast<std::size_t>(target)] = Vec2(1.0, 1.0);
    CHECK(expert_action(s, task, kParams).head(2).norm() == doctest::Approx(kParams.max_speed));
  }
}

TEST_CASE("expert solves every task from 1000 initial states") {
  for (SuiteKind k : {SuiteKind::pretrain, SuiteKind::spatial, SuiteKind::goal, SuiteKind::object,
                      SuiteKind::long_horizon}) {
    const auto tasks = make_suite(k, 4, 11, kParams, 8, std::string(kind_name(k)));
    Index failures = 0, steps = 0, runs = 0;
    for (const TaskSpec& t : tasks)
      for (Index i = 0; i < 1000; ++i) {
        SceneState s = sample_initial(t, kParams, demo_seed(5, t, i));
        const SceneState start = s;
        for (; s.step < t.horizon && !goal_satisfied(s, t);) s = step(s, expert_action(s, t, kParams), kParams);
        failures += !goal_satisfied(s, t);
        steps += s.step - start.step;
        ++runs;
      }
    MESSAGE(kind_name(k) << ": mean expert length " << static_cast<double>(steps) / static_cast<double>(runs));
    CHECK(failures == 0);
  }
}

TEST_CASE("transition properties") {
  const TaskSpec task = make_suite(SuiteKind::pretrain, 1, 4, kParams, 8, "p")[0];
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-0.2, 0.2), g(0.0, 1.0);
  SceneState s = sample_initial(task, kParams, 3);
  std::vector<Vec> actions;
  for (int t = 0; t < 2000; ++t) {
    Vec a(3);
    a << u(rng), u(rng), g(rng);
    actions.push_back(a);
    const SceneState n = step(s, a, kParams);
    CHECK(step(s, a, kParams) == n);
    CHECK((n.agent - s.agent).norm() <= kParams.max_speed + 1e-15);
    CHECK(n.agent.minCoeff() >= 0.0);
    CHECK(n.agent.maxCoeff() <= 1.0);
    if (n.held >= 0) CHECK(n.objects[static_cast<std::size_t>(n.held)] == n.agent);
    for (const Vec2& o : n.objects) CHECK((o.minCoeff() >= 0.0 && o.maxCoeff() <= 1.0));
    s = n;
  }
  SceneState r = sample_initial(task, kParams, 3);
  for (const Vec& a : actions) r = step(r, a, kParams);
  CHECK(r == s);
}

TEST_CASE("generate_demos") {
  const auto tasks = make_suite(SuiteKind::goal, 2, 6, kParams, 8, "goal");
  const Perception perc(1, kParams.n_objects, 16);

  SUBCASE("40/10 split, all successful, replayable") {
    const SuiteDataset d = generate_suite(tasks, 50, 40, 3, kParams, perc, 2);
    for (const TaskData& td : d.tasks) {
      CHECK(td.train.size() == 40);
      CHECK(td.val.size() == 10);
      for (const auto* split : {&td.train, &td.val})
        for (const Trajectory& tr : *split) {
          CHECK(goal_satisfied(tr.final, td.task));
          SceneState s = tr.initial;
          for (Index t = 0; t < tr.length(); ++t) {
            CHECK(tr.perception.row(t).transpose() == perc.features(s));
            s = step(s, tr.actions.row(t).transpose(), kParams);
          }
          CHECK(s == tr.final);
        }
    }
  }
  SUBCASE("byte-identical on disk") {
    const fs::path a = scratch_dir("a"), b = scratch_dir("b");
    save_dataset(generate_suite(tasks, 6, 4, 3, kParams, perc, 1), a);
    save_dataset(generate_suite(tasks, 6, 4, 3, kParams, perc, 3), b);
    CHECK(slurp(a / "tensors.bin") == slurp(b / "tensors.bin"));
    CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));

    const SuiteDataset r = load_dataset(a);
    const SuiteDataset orig = generate_suite(tasks, 6, 4, 3, kParams, perc, 1);
    CHECK(r.suite_id == "goal");
    CHECK(r.params == kParams);
    REQUIRE(r.tasks.size() == 2);
    for (std::size_t k = 0; k < 2; ++k) {
      CHECK(r.tasks[k].task == orig.tasks[k].task);
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(r.tasks[k].train[i].perception == orig.tasks[k].train[i].perception);
        CHECK(r.tasks[k].train[i].actions == orig.tasks[k].train[i].actions);
        CHECK(r.tasks[k].train[i].final == orig.tasks[k].train[i].final);
      }
    }
    { std::ofstream(a / "manifest.json") << "{"; }
    CHECK_THROWS_AS(load_dataset(a), DataError);
    fs::remove_all(a);
    fs::remove_all(b);
  }
  SUBCASE("impossible tasks are a hard error") {
    TaskSpec t = tasks[0];
    t.horizon = 2;
    BenchParams p = kParams;
    p.retry_cap = 3;
    CHECK_THROWS_AS(generate_demos(t, 1, 0, p, perc), DataError);
  }
  SUBCASE("bad split") { CHECK_THROWS_AS(generate_suite(tasks, 5, 6, 3, kParams, perc), ConfigError); }
}

TEST_CASE("demo and evaluation seeds never share an initial state") {
  const auto tasks = make_suite(SuiteKind::spatial, 4, 1, kParams, 8, "spatial");
  for (const TaskSpec& t : tasks) {
    std::set<std::vector<double>> demo;
    const auto key = [&](const SceneState& s) {
      std::vector<double> k = {s.agent.x(), s.agent.y()};
      for (const Vec2& o : s.objects) k.insert(k.end(), {o.x(), o.y()});
      return k;
    };
    for (Index i = 0; i < 200; ++i) {
      CHECK((demo_seed(7, t, i) >> 63) == 0);
      demo.insert(key(sample_initial(t, kParams, demo_seed(7, t, i))));
    }
    for (Index i = 0; i < 200; ++i) {
      CHECK((eval_seed(7, t, i) >> 63) == 1);
      CHECK(demo.count(key(sample_initial(t, kParams, eval_seed(7, t, i)))) == 0);
    }
  }
}

TEST_CASE("rollout_eval") {
  const PolicySpec spec;
  const auto tasks = make_suite(SuiteKind::pretrain, 3, 8, kParams, spec.embed_dim, "p");
  const Perception perc(2, kParams.n_objects, spec.perception_dim());

  SUBCASE("expert is the upper bound") {
    for (const TaskSpec& t : tasks) {
      const EvalResult r = rollout_eval(expert_controller(t, kParams), t, 10, 5, kParams, perc, spec.max_seq_len);
      CHECK(r.rate() == 1.0);
    }
  }
  SUBCASE("untrained policy almost never succeeds; workers do not change results") {
    const PolicyWeights w = PolicyWeights::init(spec, 4);
    const ParamTable p = bind(w);
    Index successes = 0;
    for (const TaskSpec& t : tasks) {
      const Controller c = [&](const std::vector<Observation>& h, const SceneState&) {
        return select_action(policy_forward(spec, p, h, t.instruction_emb));
      };
      const EvalResult one = rollout_eval(c, t, 34, 5, kParams, perc, spec.max_seq_len, 1);
      const EvalResult many = rollout_eval(c, t, 34, 5, kParams, perc, spec.max_seq_len, 3);
      CHECK(one.successes == many.successes);
      successes += one.successes;
    }
    CHECK(successes <= 5);
  }
  SUBCASE("non-finite actions fail the episode") {
    const Controller c = [](const std::vector<Observation>&, const SceneState&) {
      return Vec::Constant(3, std::numeric_limits<double>::quiet_NaN()).eval();
    };
    const EvalResult r = rollout_eval(c, tasks[0], 4, 1, kParams, perc, 4);
    CHECK(r.successes == 0);
    CHECK(r.non_finite == 4);
  }
}
