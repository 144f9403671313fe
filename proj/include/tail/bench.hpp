#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "tail/policy.hpp"

namespace tail {

using Vec2 = Eigen::Vector2d;

struct BenchParams {
  Index n_objects = 4;
  double grip_threshold = 0.5;
  double grip_radius = 0.05;
  double goal_radius = 0.08;
  double max_speed = 0.08;
  Index horizon = 60;
  Index long_horizon = 120;       // horizon for two-subgoal tasks
  double object_jitter = 0.03;    // half-width of each object's placement box
  double agent_box = 0.1;         // half-width of the agent's start box around the centre
  double min_separation = 0.15;   // between object centres and goal centres
  Index retry_cap = 100;

  bool operator==(const BenchParams&) const = default;
};

nlohmann::json to_json(const BenchParams& p);
BenchParams bench_params_from_json(const nlohmann::json& j);

enum class SuiteKind { pretrain, spatial, goal, object, long_horizon };
std::string_view kind_name(SuiteKind k);
SuiteKind kind_from_name(std::string_view name);

struct Subgoal {
  Index object = 0;
  Vec2 center = Vec2::Zero();
};

struct TaskSpec {
  std::string suite_id;
  Index task_id = 0;
  std::vector<Vec2> layout;     // object placement box centres
  std::vector<Subgoal> goals;   // satisfied together; solved in order by the expert
  double goal_radius = 0.08;
  Index horizon = 60;
  Vec instruction_emb;          // frozen N(0, 1) vector of width d
  std::uint64_t seed = 0;       // initial-state stream

  bool operator==(const TaskSpec& o) const;
};

nlohmann::json to_json(const TaskSpec& t);
TaskSpec task_from_json(const nlohmann::json& j);

struct SceneState {
  Vec2 agent = Vec2::Zero();
  Index held = -1;
  std::vector<Vec2> objects;
  Index step = 0;

  bool operator==(const SceneState&) const = default;
};

// Throws ConfigError when the kind cannot supply n_tasks distinct tasks.
std::vector<TaskSpec> make_suite(SuiteKind kind, Index n_tasks, std::uint64_t seed, const BenchParams& params,
                                 Index embed_dim, const std::string& suite_id);

// Object boxes jittered around the layout, agent in its start box.
SceneState sample_initial(const TaskSpec& task, const BenchParams& params, std::uint64_t seed);
// Pure kinematic transition. action = (dx, dy, grip).
SceneState step(const SceneState& s, const Vec& action, const BenchParams& params);
bool goal_satisfied(const SceneState& s, const TaskSpec& task);
Vec expert_action(const SceneState& s, const TaskSpec& task, const BenchParams& params);

// Frozen random projection R from the flattened scene to perception features.
class Perception {
 public:
  Perception() = default;
  Perception(std::uint64_t seed, Index n_objects, Index feature_dim);
  static Index scene_dim(Index n_objects) { return 3 + 3 * n_objects; }
  Vec features(const SceneState& s) const;
  Index feature_dim() const { return R_.rows(); }

 private:
  RowMat R_;
};

Vec proprio(const SceneState& s);  // agent x, y and the holding flag
Observation observe(const SceneState& s, const Perception& perception);

struct Trajectory {
  Index task_id = 0;
  std::uint64_t seed = 0;
  RowMat perception;  // [n, feature_dim]
  RowMat state;       // [n, 3]
  RowMat actions;     // [n, 3]
  SceneState initial;
  SceneState final;

  Index length() const { return actions.rows(); }
};

// Episode seeds: demo and evaluation streams live in disjoint halves of the
// 64-bit range.
std::uint64_t demo_seed(std::uint64_t data_seed, const TaskSpec& task, Index index);
std::uint64_t eval_seed(std::uint64_t seed, const TaskSpec& task, Index index);

// n expert rollouts; initial states whose rollout fails are resampled up to
// the retry cap, then DataError.
std::vector<Trajectory> generate_demos(const TaskSpec& task, Index n, std::uint64_t data_seed,
                                       const BenchParams& params, const Perception& perception);

struct TaskData {
  TaskSpec task;
  std::vector<Trajectory> train;
  std::vector<Trajectory> val;
};

struct SuiteDataset {
  std::string suite_id;
  std::uint64_t data_seed = 0;
  BenchParams params;
  std::vector<TaskData> tasks;

  Index train_count() const;
};

SuiteDataset generate_suite(const std::vector<TaskSpec>& tasks, Index demos_per_task, Index train_per_task,
                            std::uint64_t data_seed, const BenchParams& params, const Perception& perception,
                            int workers = 1);

void save_dataset(const SuiteDataset& d, const std::filesystem::path& dir);
SuiteDataset load_dataset(const std::filesystem::path& dir);

// A controller sees the observation history; the scene is available for
// scripted controllers only.
using Controller = std::function<Vec(const std::vector<Observation>& history, const SceneState& scene)>;

struct EvalResult {
  Index successes = 0;
  Index episodes = 0;
  Index non_finite = 0;
  double rate() const { return episodes ? static_cast<double>(successes) / static_cast<double>(episodes) : 0.0; }
};

// Closed-loop episodes from evaluation seeds. The controller must be safe to
// call from several threads.
EvalResult rollout_eval(const Controller& controller, const TaskSpec& task, Index n_episodes, std::uint64_t seed,
                        const BenchParams& params, const Perception& perception, Index history, int workers = 1);

Controller expert_controller(const TaskSpec& task, const BenchParams& params);

}  // namespace tail
