#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "germ/action.hpp"
#include "germ/obs.hpp"
#include "germ/rng.hpp"

namespace germ {

enum Skill : int {
  kGoTo = 0,
  kGoAvoid = 1,
  kStop = 2,
  kDistinguish = 3,
  kGoThrough = 4,
};
const char* skill_name(int skill);

// Object id vocabulary shared by instructions and target descriptors:
//   0..3  nav objects (trashcan, piano, chair, cube)
//   4..5  balls (red, blue)
//   6..7  letter boxes (A, B)
//   8..9  tunnels (silver rectangle, black round)
std::pair<int, int> object_pool(int skill);  // inclusive id range per family

struct TaskSpec {
  int skill = kGoTo;
  int object = 0;
  int gait = 0;
  int speed = 0;
  uint64_t seed = 0;

  Instruction instruction() const { return {skill, object, gait, speed}; }
};

// Deterministic task sampler: picks object/gait/speed and a layout seed for
// episode `index` of the given family.
TaskSpec sample_task(int skill, uint64_t root_seed, uint64_t index);

struct EnvConfig {
  int width = 7;
  int height = 7;
  int horizon = 60;
  // |v| must exceed this to translate one cell; keeps small detokenized
  // commands (e.g. the bin holding 0.0) from drifting the agent.
  double motion_threshold = 0.25;
  ActionBounds bounds = ActionBounds::defaults();
  int max_layout_retries = 16;
};

struct StepResult {
  Observation obs;
  bool done = false;
  bool success = false;
};

// Deterministic multi-task gridworld. Coordinates: x = column, y = row with
// y growing southward; headings N,E,S,W index 0..3; +w_z turns left (CCW).
class GridEnv {
 public:
  explicit GridEnv(EnvConfig cfg = {});

  Observation reset(const TaskSpec& spec);
  StepResult step(const Command& cmd);

  Observation observe() const;
  bool done() const { return done_; }
  bool success() const { return success_; }
  int steps() const { return step_count_; }
  const EnvConfig& config() const { return cfg_; }
  const TaskSpec& task() const { return spec_; }

  // Scripted shortest-path controller satisfying the active task's success
  // criterion.
  Command expert_command() const;
  // Expert command with probability 1-epsilon, uniform random otherwise.
  Command suboptimal_command(double epsilon, Rng& rng) const;
  Command random_command(Rng& rng) const;

  // Introspection for tests.
  int agent_x() const { return ax_; }
  int agent_y() const { return ay_; }
  int agent_heading() const { return heading_; }
  int target_x() const { return tx_; }
  int target_y() const { return ty_; }
  int obstacle_x() const { return ox_; }
  int obstacle_y() const { return oy_; }

 private:
  struct Cell {
    int x = 0, y = 0;
    bool operator==(const Cell&) const = default;
  };

  bool in_grid(int x, int y) const;
  bool blocked(int x, int y) const;        // movement blockers
  int occupancy(int x, int y) const;       // PatchClass for observations
  bool nav_success_cell(int x, int y) const;
  std::vector<int> bfs_dist(int sx, int sy, bool avoid_obstacle) const;
  Command neutral_command(bool terminate) const;
  Command move_command(int qx, int qy, int qr, bool terminate) const;
  bool plan_step(int gx, int gy, bool avoid_obstacle, int* dx, int* dy, int* dist) const;
  void generate_layout(Rng& rng);
  bool layout_feasible() const;

  EnvConfig cfg_;
  TaskSpec spec_;
  int ax_ = 0, ay_ = 0, heading_ = 0;
  int tx_ = 0, ty_ = 0;                  // target cell (ball cell for stop)
  int ox_ = -1, oy_ = -1;                // obstacle (go_avoid)
  std::vector<Cell> distractors_;        // blocking non-target objects
  int wall_y_ = -1;                      // go_through wall row
  Cell gap_correct_{}, gap_wrong_{};
  int bx_ = -1, by_ = -1, bdx_ = 0, bdy_ = 0;  // ball state (stop)
  int step_count_ = 0;
  bool done_ = false;
  bool success_ = false;
  bool active_ = false;
};

struct TrajectoryRecord {
  TaskSpec task;
  bool success = false;
  double reward = 0.0;
  std::vector<Observation> obs;  // observation before each command
  std::vector<Command> cmds;

  size_t length() const { return cmds.size(); }
};

// Runs one episode under `policy`, recording observation/command pairs.
// Reward is terminal-only and sparse: 1.0 iff the episode succeeded.
TrajectoryRecord run_episode(GridEnv& env, const TaskSpec& spec,
                             const std::function<Command(GridEnv&)>& policy);

struct CollectConfig {
  int64_t n_episodes = 1000;
  double demo_fraction = 0.7569;
  double suboptimal_epsilon = 0.6;
  uint64_t seed = 0;
  EnvConfig env;
  int vocab_size = 256;
  std::string out_path;
};

struct CollectSummary {
  int64_t episodes = 0;
  int64_t demo_episodes = 0;
  int64_t suboptimal_episodes = 0;
  int64_t successes = 0;
  double realized_demo_fraction = 0.0;
  std::vector<int64_t> per_family_demo = std::vector<int64_t>(5, 0);
  std::vector<int64_t> per_family_subopt = std::vector<int64_t>(5, 0);
  std::vector<int64_t> per_family_success = std::vector<int64_t>(5, 0);
};

// Writes the mixed-quality offline dataset: demo slots replay the scripted
// expert and are kept only when successful; sub-optimal slots replay the
// epsilon-noised expert regardless of outcome.
CollectSummary collect_dataset(const CollectConfig& cfg);

}  // namespace germ
