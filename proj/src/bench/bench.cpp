#include "tail/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include "tail/checkpoint.hpp"
#include "tail/errors.hpp"
#include "tail/json_util.hpp"

namespace tail {

using nlohmann::json;

namespace {

constexpr std::uint64_t kEvalTag = 1ULL << 63;

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

std::uint64_t task_key(const TaskSpec& t) {
  return hash_combine(fnv1a(t.suite_id), static_cast<std::uint64_t>(t.task_id));
}

Vec2 clamp01(Vec2 p) { return p.cwiseMax(0.0).cwiseMin(1.0); }

Vec2 clip_speed(Vec2 d, double max_speed) {
  const double n = d.norm();
  return n > max_speed ? Vec2(d * (max_speed / n)) : d;
}

class Sampler {
 public:
  Sampler(std::uint64_t seed, const BenchParams& p) : rng_(seed), p_(p) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  Vec2 point() { return {uniform(0.15, 0.85), uniform(0.15, 0.85)}; }

  bool far_from(const Vec2& q, const std::vector<Vec2>& others, double sep) const {
    return std::all_of(others.begin(), others.end(), [&](const Vec2& o) { return (o - q).norm() >= sep; });
  }

  std::vector<Vec2> layout() {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      std::vector<Vec2> pts;
      for (Index i = 0; i < p_.n_objects && pts.size() < static_cast<std::size_t>(p_.n_objects); ++i)
        for (int tries = 0; tries < 200; ++tries) {
          const Vec2 q = point();
          if (far_from(q, pts, p_.min_separation)) {
            pts.push_back(q);
            break;
          }
        }
      if (static_cast<Index>(pts.size()) == p_.n_objects) return pts;
    }
    throw ConfigError("bench: cannot place " + std::to_string(p_.n_objects) + " objects with separation " +
                      std::to_string(p_.min_separation));
  }

  // A goal centre away from every object box and every earlier goal.
  std::optional<Vec2> goal(const std::vector<Vec2>& avoid, const std::vector<Vec2>& goals, double goal_sep) {
    for (int tries = 0; tries < 2000; ++tries) {
      const Vec2 q = point();
      if (far_from(q, avoid, p_.min_separation) && far_from(q, goals, goal_sep)) return q;
    }
    return std::nullopt;
  }

  Index index(Index n) { return std::uniform_int_distribution<Index>(0, n - 1)(rng_); }
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
  const BenchParams& p_;
};

Vec instruction(std::uint64_t seed, Index d) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Vec v(d);
  for (Index i = 0; i < d; ++i) v[i] = n(rng);
  return v;
}

json vec2_json(const Vec2& v) { return json::array({v.x(), v.y()}); }
Vec2 vec2_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

json scene_json(const SceneState& s) {
  json objs = json::array();
  for (const Vec2& o : s.objects) objs.push_back(vec2_json(o));
  return {{"agent", vec2_json(s.agent)}, {"held", s.held}, {"objects", objs}, {"step", s.step}};
}

SceneState scene_from(const json& j) {
  SceneState s;
  s.agent = vec2_from(j.at("agent"));
  s.held = j.at("held").get<Index>();
  for (const json& o : j.at("objects")) s.objects.push_back(vec2_from(o));
  s.step = j.at("step").get<Index>();
  return s;
}

Tensor rows_tensor(const RowMat& m) {
  return Tensor({m.rows(), m.cols()}, Eigen::Map<const Vec>(m.data(), m.size()));
}

RowMat tensor_rows(const Tensor& t) {
  if (t.rank() != 2) throw DataError("dataset tensor is not a matrix");
  return Eigen::Map<const RowMat>(t.data(), t.dim(0), t.dim(1));
}

template <class Fn>
void parallel_for(Index n, int workers, Fn fn) {
  workers = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (workers == 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (Index i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

json to_json(const BenchParams& p) {
  return {{"n_objects", p.n_objects},       {"grip_threshold", p.grip_threshold},
          {"grip_radius", p.grip_radius},   {"goal_radius", p.goal_radius},
          {"max_speed", p.max_speed},       {"horizon", p.horizon},
          {"long_horizon", p.long_horizon}, {"object_jitter", p.object_jitter},
          {"agent_box", p.agent_box},       {"min_separation", p.min_separation},
          {"retry_cap", p.retry_cap}};
}

BenchParams bench_params_from_json(const json& j) {
  BenchParams p;
  StrictObject o(j, "bench.params");
  o.get("n_objects", p.n_objects);
  o.get("grip_threshold", p.grip_threshold);
  o.get("grip_radius", p.grip_radius);
  o.get("goal_radius", p.goal_radius);
  o.get("max_speed", p.max_speed);
  o.get("horizon", p.horizon);
  o.get("long_horizon", p.long_horizon);
  o.get("object_jitter", p.object_jitter);
  o.get("agent_box", p.agent_box);
  o.get("min_separation", p.min_separation);
  o.get("retry_cap", p.retry_cap);
  o.finish();
  if (p.n_objects < 2) throw ConfigError("bench.params: n_objects must be >= 2");
  if (!(p.max_speed > 0 && p.grip_radius > 0 && p.goal_radius > 0))
    throw ConfigError("bench.params: speeds and radii must be positive");
  if (p.horizon < 1 || p.long_horizon < 1 || p.retry_cap < 1)
    throw ConfigError("bench.params: horizons and retry cap must be positive");
  if (p.object_jitter * 2 >= p.min_separation)
    throw ConfigError("bench.params: object jitter must stay below half the separation");
  return p;
}

std::string_view kind_name(SuiteKind k) {
  switch (k) {
    case SuiteKind::pretrain: return "pretrain";
    case SuiteKind::spatial: return "spatial";
    case SuiteKind::goal: return "goal";
    case SuiteKind::object: return "object";
    case SuiteKind::long_horizon: return "long_horizon";
  }
  return "?";
}

SuiteKind kind_from_name(std::string_view name) {
  for (SuiteKind k : {SuiteKind::pretrain, SuiteKind::spatial, SuiteKind::goal, SuiteKind::object,
                      SuiteKind::long_horizon})
    if (kind_name(k) == name) return k;
  throw ConfigError("unknown suite kind '" + std::string(name) + "'");
}

bool TaskSpec::operator==(const TaskSpec& o) const {
  if (suite_id != o.suite_id || task_id != o.task_id || layout != o.layout || goal_radius != o.goal_radius ||
      horizon != o.horizon || seed != o.seed || goals.size() != o.goals.size())
    return false;
  for (std::size_t i = 0; i < goals.size(); ++i)
    if (goals[i].object != o.goals[i].object || goals[i].center != o.goals[i].center) return false;
  return instruction_emb.size() == o.instruction_emb.size() && instruction_emb == o.instruction_emb;
}

json to_json(const TaskSpec& t) {
  json layout = json::array(), goals = json::array();
  for (const Vec2& p : t.layout) layout.push_back(vec2_json(p));
  for (const Subgoal& g : t.goals) goals.push_back({{"object", g.object}, {"center", vec2_json(g.center)}});
  return {{"suite_id", t.suite_id},
          {"task_id", t.task_id},
          {"layout", layout},
          {"goals", goals},
          {"goal_radius", t.goal_radius},
          {"horizon", t.horizon},
          {"instruction_emb", std::vector<double>(t.instruction_emb.begin(), t.instruction_emb.end())},
          {"seed", t.seed}};
}

TaskSpec task_from_json(const json& j) {
  TaskSpec t;
  try {
    t.suite_id = j.at("suite_id").get<std::string>();
    t.task_id = j.at("task_id").get<Index>();
    for (const json& p : j.at("layout")) t.layout.push_back(vec2_from(p));
    for (const json& g : j.at("goals")) t.goals.push_back({g.at("object").get<Index>(), vec2_from(g.at("center"))});
    t.goal_radius = j.at("goal_radius").get<double>();
    t.horizon = j.at("horizon").get<Index>();
    const auto e = j.at("instruction_emb").get<std::vector<double>>();
    t.instruction_emb = Eigen::Map<const Vec>(e.data(), static_cast<Index>(e.size()));
    t.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw DataError(std::string("bad task spec: ") + e.what());
  }
  return t;
}

std::vector<TaskSpec> make_suite(SuiteKind kind, Index n_tasks, std::uint64_t seed, const BenchParams& params,
                                 Index embed_dim, const std::string& suite_id) {
  if (n_tasks < 1) throw ConfigError("make_suite: n_tasks must be >= 1");
  const std::string kname(kind_name(kind));
  Sampler s(hash_combine(seed, fnv1a(kname)), params);
  const double goal_sep = 2 * params.goal_radius;
  const auto capacity_error = [&](const std::string& why) {
    return ConfigError("make_suite(" + kname + ", " + std::to_string(n_tasks) + "): " + why);
  };

  std::vector<TaskSpec> tasks(static_cast<std::size_t>(n_tasks));
  for (Index k = 0; k < n_tasks; ++k) {
    TaskSpec& t = tasks[static_cast<std::size_t>(k)];
    t.suite_id = suite_id;
    t.task_id = k;
    t.goal_radius = params.goal_radius;
    t.horizon = kind == SuiteKind::long_horizon ? params.long_horizon : params.horizon;
    t.seed = hash_combine(hash_combine(seed, fnv1a(suite_id)), static_cast<std::uint64_t>(k));
    t.instruction_emb = instruction(hash_combine(t.seed, 0x1e5), embed_dim);
  }

  switch (kind) {
    case SuiteKind::pretrain:
      for (TaskSpec& t : tasks) {
        t.layout = s.layout();
        const auto g = s.goal(t.layout, {}, goal_sep);
        if (!g) throw capacity_error("no room for a goal region");
        t.goals = {{s.index(params.n_objects), *g}};
      }
      break;
    case SuiteKind::spatial: {
      std::vector<Index> perm(static_cast<std::size_t>(params.n_objects));
      Index capacity = 1;
      for (Index i = 2; i <= params.n_objects && capacity < n_tasks; ++i) capacity *= i;
      if (n_tasks > capacity) throw capacity_error("only " + std::to_string(capacity) + " distinct layouts");
      const std::vector<Vec2> base = s.layout();
      const auto g = s.goal(base, {}, goal_sep);
      if (!g) throw capacity_error("no room for a goal region");
      std::set<std::vector<Index>> used;
      std::iota(perm.begin(), perm.end(), 0);
      for (TaskSpec& t : tasks) {
        do std::shuffle(perm.begin(), perm.end(), s.rng());
        while (!used.insert(perm).second);
        for (Index i : perm) t.layout.push_back(base[static_cast<std::size_t>(i)]);
        t.goals = {{0, *g}};
      }
      break;
    }
    case SuiteKind::goal: {
      const std::vector<Vec2> layout = s.layout();
      std::vector<Vec2> centers;
      for (TaskSpec& t : tasks) {
        const auto g = s.goal(layout, centers, goal_sep);
        if (!g) throw capacity_error("goal regions do not fit");
        centers.push_back(*g);
        t.layout = layout;
        t.goals = {{0, *g}};
      }
      break;
    }
    case SuiteKind::object: {
      if (n_tasks > params.n_objects)
        throw capacity_error("only " + std::to_string(params.n_objects) + " objects to choose from");
      const std::vector<Vec2> layout = s.layout();
      const auto g = s.goal(layout, {}, goal_sep);
      if (!g) throw capacity_error("no room for a goal region");
      for (TaskSpec& t : tasks) {
        t.layout = layout;
        t.goals = {{t.task_id, *g}};
      }
      break;
    }
    case SuiteKind::long_horizon:
      for (TaskSpec& t : tasks) {
        t.layout = s.layout();
        const Index a = s.index(params.n_objects);
        Index b = s.index(params.n_objects - 1);
        if (b >= a) ++b;
        const auto g1 = s.goal(t.layout, {}, params.min_separation);
        const auto g2 = g1 ? s.goal(t.layout, {*g1}, params.min_separation) : std::nullopt;
        if (!g2) throw capacity_error("no room for two goal regions");
        t.goals = {{a, *g1}, {b, *g2}};
      }
      break;
  }
  return tasks;
}

SceneState sample_initial(const TaskSpec& task, const BenchParams& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  SceneState s;
  s.agent = Vec2(0.5 + params.agent_box * u(rng), 0.5 + params.agent_box * u(rng));
  for (const Vec2& c : task.layout)
    s.objects.push_back(clamp01(c + params.object_jitter * Vec2(u(rng), u(rng))));
  return s;
}

SceneState step(const SceneState& s, const Vec& action, const BenchParams& params) {
  SceneState n = s;
  n.agent = clamp01(s.agent + clip_speed(Vec2(action[0], action[1]), params.max_speed));
  const bool grip = action[2] > params.grip_threshold;
  if (n.held >= 0) n.objects[static_cast<std::size_t>(n.held)] = n.agent;
  if (n.held >= 0 && !grip) {
    n.held = -1;
  } else if (n.held < 0 && grip) {
    double best = params.grip_radius;
    for (std::size_t i = 0; i < n.objects.size(); ++i) {
      const double dist = (n.objects[i] - n.agent).norm();
      if (dist <= best) {
        best = dist;
        n.held = static_cast<Index>(i);
      }
    }
  }
  if (n.held >= 0) n.objects[static_cast<std::size_t>(n.held)] = n.agent;
  ++n.step;
  return n;
}

bool goal_satisfied(const SceneState& s, const TaskSpec& task) {
  return std::all_of(task.goals.begin(), task.goals.end(), [&](const Subgoal& g) {
    return s.held != g.object &&
           (s.objects[static_cast<std::size_t>(g.object)] - g.center).norm() <= task.goal_radius;
  });
}

Vec expert_action(const SceneState& s, const TaskSpec& task, const BenchParams& params) {
  Vec a = Vec::Zero(3);
  const auto move_to = [&](const Vec2& target, double grip) {
    const Vec2 d = clip_speed(target - s.agent, params.max_speed);
    a << d.x(), d.y(), grip;
  };
  // The last leg of an approach grips (or releases) on arrival.
  for (const Subgoal& g : task.goals) {
    const Vec2& obj = s.objects[static_cast<std::size_t>(g.object)];
    if (s.held != g.object && (obj - g.center).norm() <= task.goal_radius) continue;
    if (s.held == g.object) {
      move_to(g.center, (g.center - s.agent).norm() <= params.max_speed ? 0.0 : 1.0);
    } else if (s.held >= 0) {
      return a;  // wrong object: drop it
    } else {
      move_to(obj, (obj - s.agent).norm() <= params.max_speed ? 1.0 : 0.0);
    }
    return a;
  }
  return a;
}

Perception::Perception(std::uint64_t seed, Index n_objects, Index feature_dim) {
  const Index k = scene_dim(n_objects);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(k)));
  R_.resize(feature_dim, k);
  for (Index i = 0; i < R_.size(); ++i) R_.data()[i] = n(rng);
}

Vec Perception::features(const SceneState& s) const {
  const Index n = static_cast<Index>(s.objects.size());
  if (scene_dim(n) != R_.cols()) throw ShapeError("perception: scene has the wrong object count");
  Vec x = Vec::Zero(R_.cols());
  x[0] = s.agent.x();
  x[1] = s.agent.y();
  x[2] = 1.0;
  for (Index i = 0; i < n; ++i) {
    x[3 + 2 * i] = s.objects[static_cast<std::size_t>(i)].x();
    x[4 + 2 * i] = s.objects[static_cast<std::size_t>(i)].y();
    x[3 + 2 * n + i] = s.held == i ? 1.0 : 0.0;
  }
  return R_ * x;
}

Vec proprio(const SceneState& s) {
  Vec v(3);
  v << s.agent.x(), s.agent.y(), s.held >= 0 ? 1.0 : 0.0;
  return v;
}

Observation observe(const SceneState& s, const Perception& perception) {
  return {perception.features(s), proprio(s)};
}

std::uint64_t demo_seed(std::uint64_t data_seed, const TaskSpec& task, Index index) {
  return hash_combine(hash_combine(data_seed, task_key(task)), static_cast<std::uint64_t>(index)) & ~kEvalTag;
}

std::uint64_t eval_seed(std::uint64_t seed, const TaskSpec& task, Index index) {
  return hash_combine(hash_combine(seed, task_key(task)), static_cast<std::uint64_t>(index)) | kEvalTag;
}

std::vector<Trajectory> generate_demos(const TaskSpec& task, Index n, std::uint64_t data_seed,
                                       const BenchParams& params, const Perception& perception) {
  std::vector<Trajectory> out;
  for (Index i = 0; i < n; ++i) {
    bool ok = false;
    for (Index attempt = 0; attempt < params.retry_cap && !ok; ++attempt) {
      const std::uint64_t seed = demo_seed(data_seed, task, i) ^ (static_cast<std::uint64_t>(attempt) << 40);
      SceneState s = sample_initial(task, params, seed & ~kEvalTag);
      if (goal_satisfied(s, task)) continue;
      Trajectory tr;
      tr.task_id = task.task_id;
      tr.seed = seed & ~kEvalTag;
      tr.initial = s;
      std::vector<Vec> feats, states, actions;
      for (Index t = 0; t < task.horizon && !goal_satisfied(s, task); ++t) {
        const Vec a = expert_action(s, task, params);
        feats.push_back(perception.features(s));
        states.push_back(proprio(s));
        actions.push_back(a);
        s = step(s, a, params);
      }
      if (!goal_satisfied(s, task)) continue;
      const Index len = static_cast<Index>(actions.size());
      tr.perception.resize(len, perception.feature_dim());
      tr.state.resize(len, 3);
      tr.actions.resize(len, 3);
      for (Index t = 0; t < len; ++t) {
        tr.perception.row(t) = feats[static_cast<std::size_t>(t)];
        tr.state.row(t) = states[static_cast<std::size_t>(t)];
        tr.actions.row(t) = actions[static_cast<std::size_t>(t)];
      }
      tr.final = s;
      out.push_back(std::move(tr));
      ok = true;
    }
    if (!ok)
      throw DataError("expert failed " + std::to_string(params.retry_cap) + " times on task " + task.suite_id + "/" +
                      std::to_string(task.task_id) + ": " + to_json(task).dump());
  }
  return out;
}

Index SuiteDataset::train_count() const {
  Index n = 0;
  for (const TaskData& t : tasks) n += static_cast<Index>(t.train.size());
  return n;
}

SuiteDataset generate_suite(const std::vector<TaskSpec>& tasks, Index demos_per_task, Index train_per_task,
                            std::uint64_t data_seed, const BenchParams& params, const Perception& perception,
                            int workers) {
  if (tasks.empty()) throw ConfigError("generate_suite: no tasks");
  if (train_per_task < 1 || train_per_task > demos_per_task)
    throw ConfigError("generate_suite: train split must be within 1..demos_per_task");
  SuiteDataset d;
  d.suite_id = tasks.front().suite_id;
  d.data_seed = data_seed;
  d.params = params;
  d.tasks.resize(tasks.size());
  parallel_for(static_cast<Index>(tasks.size()), workers, [&](Index k) {
    TaskData& td = d.tasks[static_cast<std::size_t>(k)];
    td.task = tasks[static_cast<std::size_t>(k)];
    auto demos = generate_demos(td.task, demos_per_task, data_seed, params, perception);
    td.train.assign(std::make_move_iterator(demos.begin()), std::make_move_iterator(demos.begin() + train_per_task));
    td.val.assign(std::make_move_iterator(demos.begin() + train_per_task), std::make_move_iterator(demos.end()));
  });
  return d;
}

void save_dataset(const SuiteDataset& d, const std::filesystem::path& dir) {
  TensorMap tensors;
  json tasks = json::array();
  for (std::size_t k = 0; k < d.tasks.size(); ++k) {
    const TaskData& td = d.tasks[k];
    json splits;
    for (const auto& [split, trajs] : {std::pair{"train", &td.train}, std::pair{"val", &td.val}}) {
      json entries = json::array();
      for (std::size_t i = 0; i < trajs->size(); ++i) {
        const Trajectory& tr = (*trajs)[i];
        const std::string key = "t" + std::to_string(k) + "/" + split + "/" + std::to_string(i) + "/";
        tensors.emplace(key + "perception", rows_tensor(tr.perception));
        tensors.emplace(key + "state", rows_tensor(tr.state));
        tensors.emplace(key + "actions", rows_tensor(tr.actions));
        entries.push_back({{"seed", tr.seed}, {"initial", scene_json(tr.initial)}, {"final", scene_json(tr.final)}});
      }
      splits[split] = entries;
    }
    tasks.push_back({{"spec", to_json(td.task)}, {"trajectories", splits}});
  }
  save_tensors(dir, tensors,
               {{"kind", "dataset"},
                {"suite_id", d.suite_id},
                {"data_seed", d.data_seed},
                {"params", to_json(d.params)},
                {"counts", {{"tasks", d.tasks.size()}, {"train", d.train_count()}}},
                {"tasks", tasks}});
}

SuiteDataset load_dataset(const std::filesystem::path& dir) {
  const LoadedTensors lt = load_tensors(dir);
  const json& m = lt.manifest;
  SuiteDataset d;
  try {
    if (m.at("kind") != "dataset") throw DataError(dir.string() + " is not a dataset");
    d.suite_id = m.at("suite_id").get<std::string>();
    d.data_seed = m.at("data_seed").get<std::uint64_t>();
    d.params = bench_params_from_json(m.at("params"));
    const json& tasks = m.at("tasks");
    for (std::size_t k = 0; k < tasks.size(); ++k) {
      TaskData td;
      td.task = task_from_json(tasks[k].at("spec"));
      for (const char* split : {"train", "val"}) {
        auto& out = std::string_view(split) == "train" ? td.train : td.val;
        const json& entries = tasks[k].at("trajectories").at(split);
        for (std::size_t i = 0; i < entries.size(); ++i) {
          const std::string key = "t" + std::to_string(k) + "/" + split + "/" + std::to_string(i) + "/";
          Trajectory tr;
          tr.task_id = td.task.task_id;
          tr.seed = entries[i].at("seed").get<std::uint64_t>();
          tr.initial = scene_from(entries[i].at("initial"));
          tr.final = scene_from(entries[i].at("final"));
          tr.perception = tensor_rows(lt.tensors.at(key + "perception"));
          tr.state = tensor_rows(lt.tensors.at(key + "state"));
          tr.actions = tensor_rows(lt.tensors.at(key + "actions"));
          out.push_back(std::move(tr));
        }
      }
      d.tasks.push_back(std::move(td));
    }
  } catch (const json::exception& e) {
    throw DataError("bad dataset manifest in " + dir.string() + ": " + e.what());
  } catch (const std::out_of_range& e) {
    throw DataError("dataset " + dir.string() + " is missing tensors");
  } catch (const ConfigError& e) {
    throw DataError("bad dataset manifest in " + dir.string() + ": " + e.what());
  }
  return d;
}

EvalResult rollout_eval(const Controller& controller, const TaskSpec& task, Index n_episodes, std::uint64_t seed,
                        const BenchParams& params, const Perception& perception, Index history, int workers) {
  if (history < 1) throw ConfigError("rollout_eval: history must be >= 1");
  std::vector<char> success(static_cast<std::size_t>(n_episodes), 0), bad(static_cast<std::size_t>(n_episodes), 0);
  parallel_for(n_episodes, workers, [&](Index e) {
    SceneState s = sample_initial(task, params, eval_seed(seed, task, e));
    std::vector<Observation> hist;
    for (Index t = 0; t < task.horizon; ++t) {
      if (goal_satisfied(s, task)) break;
      hist.push_back(observe(s, perception));
      if (static_cast<Index>(hist.size()) > history) hist.erase(hist.begin());
      const Vec a = controller(hist, s);
      if (a.size() != 3 || !a.allFinite()) {
        bad[static_cast<std::size_t>(e)] = 1;
        return;
      }
      s = step(s, a, params);
    }
    success[static_cast<std::size_t>(e)] = goal_satisfied(s, task);
  });
  EvalResult r;
  r.episodes = n_episodes;
  for (Index e = 0; e < n_episodes; ++e) {
    r.successes += success[static_cast<std::size_t>(e)];
    r.non_finite += bad[static_cast<std::size_t>(e)];
  }
  if (r.non_finite)
    std::cerr << "warning: " << r.non_finite << " episode(s) on " << task.suite_id << "/" << task.task_id
              << " stopped on a non-finite action\n";
  return r;
}

Controller expert_controller(const TaskSpec& task, const BenchParams& params) {
  return [task, params](const std::vector<Observation>&, const SceneState& s) { return expert_action(s, task, params); };
}

}  // namespace tail
