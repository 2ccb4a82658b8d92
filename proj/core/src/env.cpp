#include "germ/env.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "germ/dataset.hpp"

namespace germ {
namespace {

// Heading vectors: N, E, S, W. y grows southward.
constexpr int kFx[4] = {0, 1, 0, -1};
constexpr int kFy[4] = {-1, 0, 1, 0};

int left_of(int h) { return (h + 3) % 4; }

int quantize(double v, double thr) { return v > thr ? 1 : (v < -thr ? -1 : 0); }

// Inert gait-shape dimensions, filled from the instruction so the logged
// action vector still reflects gait and speed.
constexpr double kGaitTheta[kNumGaits][3] = {
    {0.5, -0.5, 0.5},    // trot
    {0.5, 0.5, -0.5},    // bound
    {0.0, 0.0, 0.0},     // pronk
    {-0.5, 0.5, 0.5},    // pace
};
constexpr double kSpeedFreq[kNumSpeeds] = {0.25, 0.5, 0.85};

}  // namespace

const char* skill_name(int skill) {
  switch (skill) {
    case kGoTo: return "go_to";
    case kGoAvoid: return "go_avoid";
    case kStop: return "stop";
    case kDistinguish: return "distinguish";
    case kGoThrough: return "go_through";
  }
  return "?";
}

std::pair<int, int> object_pool(int skill) {
  switch (skill) {
    case kGoTo:
    case kGoAvoid: return {0, 3};
    case kStop: return {4, 5};
    case kDistinguish: return {6, 7};
    case kGoThrough: return {8, 9};
  }
  fail("E_SPEC", "unknown skill id " + std::to_string(skill));
}

TaskSpec sample_task(int skill, uint64_t root_seed, uint64_t index) {
  Rng rng(mix_seed(root_seed, (static_cast<uint64_t>(skill) << 32) ^ index));
  auto [lo, hi] = object_pool(skill);
  TaskSpec spec;
  spec.skill = skill;
  spec.object = lo + static_cast<int>(rng.uniform_int(hi - lo + 1));
  spec.gait = static_cast<int>(rng.uniform_int(kNumGaits));
  spec.speed = static_cast<int>(rng.uniform_int(kNumSpeeds));
  spec.seed = rng.next_u64();
  return spec;
}

GridEnv::GridEnv(EnvConfig cfg) : cfg_(cfg) {
  cfg_.bounds.validate();
  require(cfg_.width >= 1 && cfg_.height >= 1, "E_CONFIG", "grid extents must be positive");
  require(cfg_.horizon >= 1, "E_CONFIG", "horizon must be positive");
}

bool GridEnv::in_grid(int x, int y) const {
  return x >= 0 && x < cfg_.width && y >= 0 && y < cfg_.height;
}

bool GridEnv::blocked(int x, int y) const {
  if (!in_grid(x, y)) return true;
  if (wall_y_ >= 0 && y == wall_y_) {
    Cell c{x, y};
    if (c == gap_correct_ || c == gap_wrong_) return false;
    return true;
  }
  if (spec_.skill != kStop && x == tx_ && y == ty_) return true;  // target object body
  for (const Cell& d : distractors_)
    if (d.x == x && d.y == y) return true;
  return false;
}

int GridEnv::occupancy(int x, int y) const {
  if (!in_grid(x, y)) return kPatchOutside;
  Cell c{x, y};
  if (wall_y_ >= 0 && y == wall_y_) {
    if (c == gap_correct_) return kPatchTarget;
    if (c == gap_wrong_) return kPatchDistractor;
    return kPatchWall;
  }
  if (x == tx_ && y == ty_) return kPatchTarget;
  if (x == ox_ && y == oy_) return kPatchObstacle;
  for (const Cell& d : distractors_)
    if (d.x == x && d.y == y) return kPatchDistractor;
  return kPatchEmpty;
}

bool GridEnv::nav_success_cell(int x, int y) const {
  return std::abs(x - tx_) + std::abs(y - ty_) == 1;
}

Observation GridEnv::observe() const {
  Observation o;
  o.ax = ax_;
  o.ay = ay_;
  o.heading = heading_;
  int i = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) o.patch[i++] = occupancy(ax_ + dx, ay_ + dy);
  o.target_id = spec_.object;
  o.tx = tx_;
  o.ty = ty_;
  return o;
}

std::vector<int> GridEnv::bfs_dist(int sx, int sy, bool avoid_obstacle) const {
  std::vector<int> dist(cfg_.width * cfg_.height, -1);
  if (!in_grid(sx, sy)) return dist;
  std::deque<int> queue;
  dist[sy * cfg_.width + sx] = 0;
  queue.push_back(sy * cfg_.width + sx);
  while (!queue.empty()) {
    int cur = queue.front();
    queue.pop_front();
    int cx = cur % cfg_.width, cy = cur / cfg_.width;
    for (int h = 0; h < 4; ++h) {
      int nx = cx + kFx[h], ny = cy + kFy[h];
      if (!in_grid(nx, ny) || blocked(nx, ny)) continue;
      if (avoid_obstacle && nx == ox_ && ny == oy_) continue;
      if (spec_.skill == kGoThrough && wall_y_ >= 0 && ny == wall_y_ &&
          Cell{nx, ny} == gap_wrong_)
        continue;  // planner never threads the wrong tunnel
      int ni = ny * cfg_.width + nx;
      if (dist[ni] >= 0) continue;
      dist[ni] = dist[cur] + 1;
      queue.push_back(ni);
    }
  }
  return dist;
}

void GridEnv::generate_layout(Rng& rng) {
  tx_ = ty_ = 0;
  ox_ = oy_ = -1;
  distractors_.clear();
  wall_y_ = -1;
  gap_correct_ = gap_wrong_ = Cell{-1, -1};
  bx_ = by_ = -1;
  bdx_ = bdy_ = 0;

  int W = cfg_.width, H = cfg_.height;
  auto rand_cell = [&](auto&& ok) {
    for (int tries = 0; tries < 64; ++tries) {
      int x = static_cast<int>(rng.uniform_int(W));
      int y = static_cast<int>(rng.uniform_int(H));
      if (ok(x, y)) return Cell{x, y};
    }
    return Cell{-1, -1};
  };

  heading_ = static_cast<int>(rng.uniform_int(4));
  Cell start = rand_cell([](int, int) { return true; });
  ax_ = start.x;
  ay_ = start.y;

  switch (spec_.skill) {
    case kGoTo:
    case kGoAvoid: {
      Cell t = rand_cell([&](int x, int y) {
        return std::abs(x - ax_) + std::abs(y - ay_) >= 3;
      });
      if (t.x < 0) { tx_ = -1; return; }
      tx_ = t.x;
      ty_ = t.y;
      // One distractor object of a different id, never pinning the agent.
      Cell d = rand_cell([&](int x, int y) {
        if ((x == ax_ && y == ay_) || (x == tx_ && y == ty_)) return false;
        return std::abs(x - ax_) + std::abs(y - ay_) >= 2 &&
               std::abs(x - tx_) + std::abs(y - ty_) >= 2;
      });
      if (d.x >= 0) distractors_.push_back(d);
      if (spec_.skill == kGoAvoid) {
        // Drop the obstacle halfway along a shortest path from the agent to
        // the target's adjacency region, so it sits between them.
        std::vector<int> dist_to_goal(W * H, -1);
        std::deque<int> q;
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x)
            if (nav_success_cell(x, y) && !blocked(x, y)) {
              dist_to_goal[y * W + x] = 0;
              q.push_back(y * W + x);
            }
        while (!q.empty()) {
          int c = q.front();
          q.pop_front();
          int cx = c % W, cy = c / W;
          for (int h = 0; h < 4; ++h) {
            int nx = cx + kFx[h], ny = cy + kFy[h];
            if (!in_grid(nx, ny) || blocked(nx, ny)) continue;
            if (dist_to_goal[ny * W + nx] >= 0) continue;
            dist_to_goal[ny * W + nx] = dist_to_goal[c] + 1;
            q.push_back(ny * W + nx);
          }
        }
        if (dist_to_goal[ay_ * W + ax_] < 0) { tx_ = -1; return; }
        std::vector<Cell> path;
        Cell cur{ax_, ay_};
        while (dist_to_goal[cur.y * W + cur.x] > 0) {
          for (int h = 0; h < 4; ++h) {
            int nx = cur.x + kFx[h], ny = cur.y + kFy[h];
            if (!in_grid(nx, ny) || blocked(nx, ny)) continue;
            if (dist_to_goal[ny * W + nx] == dist_to_goal[cur.y * W + cur.x] - 1) {
              cur = Cell{nx, ny};
              path.push_back(cur);
              break;
            }
          }
        }
        if (path.size() < 2) { tx_ = -1; return; }
        Cell mid = path[(path.size() - 1) / 2];
        if (mid == Cell{ax_, ay_} || nav_success_cell(mid.x, mid.y)) { tx_ = -1; return; }
        ox_ = mid.x;
        oy_ = mid.y;
      }
      break;
    }
    case kStop: {
      // Ball enters from a border cell and rolls in a straight line.
      for (int attempt = 0; attempt < 32; ++attempt) {
        int side = static_cast<int>(rng.uniform_int(4));  // 0 N,1 E,2 S,3 W
        int bx, by, bdx, bdy;
        if (side == 0) { bx = static_cast<int>(rng.uniform_int(W)); by = 0; bdx = 0; bdy = 1; }
        else if (side == 1) { bx = W - 1; by = static_cast<int>(rng.uniform_int(H)); bdx = -1; bdy = 0; }
        else if (side == 2) { bx = static_cast<int>(rng.uniform_int(W)); by = H - 1; bdx = 0; bdy = -1; }
        else { bx = 0; by = static_cast<int>(rng.uniform_int(H)); bdx = 1; bdy = 0; }
        if (bx == ax_ && by == ay_) continue;
        // Interceptable: some future ball cell is reachable in time.
        std::vector<int> dist = bfs_dist(ax_, ay_, false);
        bool ok = false;
        int px = bx, py = by;
        for (int t = 1; t <= cfg_.horizon; ++t) {
          px += bdx;
          py += bdy;
          if (!in_grid(px, py)) break;
          int d = dist[py * W + px];
          if (d >= 0 && d <= t) { ok = true; break; }
        }
        if (!ok) continue;
        bx_ = bx; by_ = by; bdx_ = bdx; bdy_ = bdy;
        tx_ = bx_; ty_ = by_;
        break;
      }
      if (bx_ < 0) { tx_ = -1; return; }
      break;
    }
    case kDistinguish: {
      Cell a = rand_cell([&](int x, int y) {
        return std::abs(x - ax_) + std::abs(y - ay_) >= 2;
      });
      if (a.x < 0) { tx_ = -1; return; }
      Cell b = rand_cell([&](int x, int y) {
        if (x == a.x && y == a.y) return false;
        return std::abs(x - a.x) + std::abs(y - a.y) >= 2 &&
               std::abs(x - ax_) + std::abs(y - ay_) >= 2;
      });
      if (b.x < 0) { tx_ = -1; return; }
      // spec.object picks which box letter is correct; the other box is the
      // distractor.
      tx_ = a.x;
      ty_ = a.y;
      distractors_.push_back(b);
      break;
    }
    case kGoThrough: {
      if (H < 5 || W < 3) { tx_ = -1; return; }
      wall_y_ = H / 2;
      int g1 = static_cast<int>(rng.uniform_int(W));
      int g2 = (g1 + 1 + static_cast<int>(rng.uniform_int(W - 1))) % W;
      gap_correct_ = Cell{g1, wall_y_};
      gap_wrong_ = Cell{g2, wall_y_};
      // Agent starts on the south side.
      ay_ = wall_y_ + 1 + static_cast<int>(rng.uniform_int(H - wall_y_ - 1));
      ax_ = static_cast<int>(rng.uniform_int(W));
      tx_ = gap_correct_.x;
      ty_ = gap_correct_.y;
      break;
    }
    default:
      fail("E_SPEC", "unknown skill id " + std::to_string(spec_.skill));
  }
}

bool GridEnv::layout_feasible() const {
  if (tx_ < 0) return false;
  switch (spec_.skill) {
    case kGoTo:
    case kDistinguish: {
      std::vector<int> dist = bfs_dist(ax_, ay_, false);
      for (int y = 0; y < cfg_.height; ++y)
        for (int x = 0; x < cfg_.width; ++x)
          if (nav_success_cell(x, y) && !blocked(x, y) && dist[y * cfg_.width + x] >= 0)
            return true;
      return false;
    }
    case kGoAvoid: {
      if (ox_ < 0) return false;
      std::vector<int> dist = bfs_dist(ax_, ay_, /*avoid_obstacle=*/true);
      for (int y = 0; y < cfg_.height; ++y)
        for (int x = 0; x < cfg_.width; ++x)
          if (nav_success_cell(x, y) && !blocked(x, y) && dist[y * cfg_.width + x] >= 0)
            return true;
      return false;
    }
    case kStop:
      return bx_ >= 0;
    case kGoThrough: {
      std::vector<int> dist = bfs_dist(ax_, ay_, false);
      return dist[gap_correct_.y * cfg_.width + gap_correct_.x] >= 0;
    }
  }
  return false;
}

Observation GridEnv::reset(const TaskSpec& spec) {
  require(spec.skill >= 0 && spec.skill < kNumSkills, "E_SPEC", "bad skill id");
  auto [lo, hi] = object_pool(spec.skill);
  require(spec.object >= lo && spec.object <= hi, "E_SPEC",
          "object id " + std::to_string(spec.object) + " not valid for " +
              skill_name(spec.skill));
  require(spec.gait >= 0 && spec.gait < kNumGaits, "E_SPEC", "bad gait id");
  require(spec.speed >= 0 && spec.speed < kNumSpeeds, "E_SPEC", "bad speed id");

  spec_ = spec;
  for (int attempt = 0; attempt < cfg_.max_layout_retries; ++attempt) {
    Rng rng(mix_seed(spec.seed, attempt));
    generate_layout(rng);
    if (layout_feasible()) {
      step_count_ = 0;
      done_ = false;
      success_ = false;
      active_ = true;
      return observe();
    }
  }
  fail("E_LAYOUT", std::string("no feasible layout for ") + skill_name(spec.skill) +
                       " on a " + std::to_string(cfg_.width) + "x" +
                       std::to_string(cfg_.height) + " grid after " +
                       std::to_string(cfg_.max_layout_retries) + " attempts");
}

StepResult GridEnv::step(const Command& cmd) {
  require(active_ && !done_, "E_DONE", "step called after episode end");
  ++step_count_;

  int qx = quantize(cmd[0], cfg_.motion_threshold);
  int qy = quantize(cmd[1], cfg_.motion_threshold);
  int qr = quantize(cmd[2], cfg_.motion_threshold);

  int prev_ax = ax_, prev_ay = ay_;
  int lh = left_of(heading_);
  int dx = qx * kFx[heading_] + qy * kFx[lh];
  int dy = qx * kFy[heading_] + qy * kFy[lh];
  if ((dx != 0 || dy != 0) && !blocked(ax_ + dx, ay_ + dy)) {
    ax_ += dx;
    ay_ += dy;
  }
  if (qr != 0) heading_ = qr > 0 ? left_of(heading_) : (heading_ + 1) % 4;

  int prev_bx = bx_, prev_by = by_;
  bool ball_left = false;
  if (spec_.skill == kStop && bx_ >= 0) {
    bx_ += bdx_;
    by_ += bdy_;
    tx_ = std::clamp(bx_, 0, cfg_.width - 1);
    ty_ = std::clamp(by_, 0, cfg_.height - 1);
    ball_left = !in_grid(bx_, by_);
  }

  auto finish = [&](bool ok) {
    done_ = true;
    success_ = ok;
    return StepResult{observe(), done_, success_};
  };

  switch (spec_.skill) {
    case kGoAvoid:
      if (ax_ == ox_ && ay_ == oy_) return finish(false);
      if (nav_success_cell(ax_, ay_)) return finish(true);
      break;
    case kGoTo:
      if (nav_success_cell(ax_, ay_)) return finish(true);
      break;
    case kStop: {
      bool contact = (ax_ == bx_ && ay_ == by_) ||
                     (ax_ == prev_bx && ay_ == prev_by && prev_ax == bx_ && prev_ay == by_);
      if (contact) return finish(true);
      if (ball_left) return finish(false);
      break;
    }
    case kDistinguish: {
      bool adjacent = nav_success_cell(ax_, ay_);
      bool facing = ax_ + kFx[heading_] == tx_ && ay_ + kFy[heading_] == ty_;
      if (adjacent && facing) return finish(true);
      break;
    }
    case kGoThrough: {
      if (ax_ == gap_wrong_.x && ay_ == gap_wrong_.y) return finish(false);
      if (ay_ < wall_y_) return finish(true);
      break;
    }
  }

  if (cmd[kTermDim] > cfg_.bounds.term_threshold()) return finish(false);
  if (step_count_ >= cfg_.horizon) return finish(false);
  return StepResult{observe(), false, false};
}

Command GridEnv::neutral_command(bool terminate) const {
  Command c{};
  for (int i = 0; i < 3; ++i) c[i] = 0.0;
  c[3] = kGaitTheta[spec_.gait][0];
  c[4] = kGaitTheta[spec_.gait][1];
  c[5] = kGaitTheta[spec_.gait][2];
  c[6] = kSpeedFreq[spec_.speed];
  c[7] = 0.5;   // body height
  c[8] = 0.0;   // pitch
  c[9] = 0.3;   // stance width
  c[10] = 0.2;  // foot height
  c[kTermDim] = terminate ? 0.75 : -0.75;
  return c;
}

Command GridEnv::move_command(int qx, int qy, int qr, bool terminate) const {
  Command c = neutral_command(terminate);
  c[0] = 0.75 * qx;
  c[1] = 0.75 * qy;
  c[2] = 0.75 * qr;
  return c;
}

// First move of a shortest path to (gx, gy); false when unreachable.
bool GridEnv::plan_step(int gx, int gy, bool avoid_obstacle, int* dx, int* dy,
                        int* dist_out) const {
  int W = cfg_.width, H = cfg_.height;
  std::vector<int> dist(W * H, -1);
  std::deque<int> q;
  if (!in_grid(gx, gy)) return false;
  dist[gy * W + gx] = 0;
  q.push_back(gy * W + gx);
  while (!q.empty()) {
    int cur = q.front();
    q.pop_front();
    int cx = cur % W, cy = cur / W;
    for (int h = 0; h < 4; ++h) {
      int nx = cx + kFx[h], ny = cy + kFy[h];
      if (!in_grid(nx, ny)) continue;
      bool is_agent = nx == ax_ && ny == ay_;
      if (!is_agent && blocked(nx, ny)) continue;
      if (avoid_obstacle && nx == ox_ && ny == oy_) continue;
      if (spec_.skill == kGoThrough && wall_y_ >= 0 && ny == wall_y_ &&
          Cell{nx, ny} == gap_wrong_)
        continue;
      if (dist[ny * W + nx] >= 0) continue;
      dist[ny * W + nx] = dist[cur] + 1;
      q.push_back(ny * W + nx);
    }
  }
  int here = dist[ay_ * W + ax_];
  if (here < 0) return false;
  if (dist_out != nullptr) *dist_out = here;
  if (here == 0) {
    *dx = *dy = 0;
    return true;
  }
  for (int h = 0; h < 4; ++h) {
    int nx = ax_ + kFx[h], ny = ay_ + kFy[h];
    if (!in_grid(nx, ny) || blocked(nx, ny)) continue;
    if (avoid_obstacle && nx == ox_ && ny == oy_) continue;
    if (dist[ny * W + nx] == here - 1) {
      *dx = kFx[h];
      *dy = kFy[h];
      return true;
    }
  }
  return false;
}

Command GridEnv::expert_command() const {
  require(active_ && !done_, "E_DONE", "expert_command on finished episode");
  bool avoid = spec_.skill == kGoAvoid;

  auto to_body = [&](int dx, int dy, bool terminate) {
    int lh = left_of(heading_);
    int qx = dx * kFx[heading_] + dy * kFy[heading_];
    int qy = dx * kFx[lh] + dy * kFy[lh];
    return move_command(qx, qy, 0, terminate);
  };

  switch (spec_.skill) {
    case kGoTo:
    case kGoAvoid:
    case kDistinguish: {
      // Head for the best reachable success-adjacent cell.
      int bdx = 0, bdy = 0, best = -1;
      for (int h = 0; h < 4; ++h) {
        int gx = tx_ + kFx[h], gy = ty_ + kFy[h];
        if (!in_grid(gx, gy) || blocked(gx, gy)) continue;
        int dx, dy, d;
        if (plan_step(gx, gy, avoid, &dx, &dy, &d) && (best < 0 || d < best)) {
          best = d;
          bdx = dx;
          bdy = dy;
        }
      }
      if (best < 0) return neutral_command(true);  // no path: stop
      if (best > 0) {
        bool arriving = best == 1 && spec_.skill != kDistinguish;
        return to_body(bdx, bdy, arriving);
      }
      // Adjacent already; distinguish still has to face the box.
      if (spec_.skill == kDistinguish) {
        int want = -1;
        for (int h = 0; h < 4; ++h)
          if (ax_ + kFx[h] == tx_ && ay_ + kFy[h] == ty_) want = h;
        if (want < 0 || want == heading_) return neutral_command(true);
        // +w_z turns counter-clockwise (heading -> left_of(heading)).
        int ccw = (heading_ - want + 4) % 4;
        int cw = (want - heading_ + 4) % 4;
        int qr = ccw <= cw ? 1 : -1;
        return move_command(0, 0, qr, std::min(ccw, cw) == 1);
      }
      return neutral_command(true);
    }
    case kStop: {
      // Intercept the earliest reachable cell on the ball's future line.
      std::vector<int> dist = bfs_dist(ax_, ay_, false);
      int px = bx_, py = by_;
      for (int t = 1; t <= cfg_.horizon - step_count_; ++t) {
        px += bdx_;
        py += bdy_;
        if (!in_grid(px, py)) break;
        int d = dist[py * cfg_.width + px];
        if (d >= 0 && d <= t) {
          int dx, dy;
          if (plan_step(px, py, false, &dx, &dy, nullptr)) {
            if (dx == 0 && dy == 0) return neutral_command(false);  // wait for the ball
            return to_body(dx, dy, false);
          }
        }
      }
      return neutral_command(true);  // cannot intercept: stop
    }
    case kGoThrough: {
      // Through the correct gap, then one more step north.
      int gx = gap_correct_.x, gy = wall_y_ - 1;
      int dx, dy;
      if (ay_ > wall_y_ || (ay_ == wall_y_ && ax_ == gap_correct_.x)) {
        if (plan_step(gx, gy, false, &dx, &dy, nullptr)) {
          bool arriving = ay_ == wall_y_;  // next move crosses to the north side
          return to_body(dx, dy, arriving);
        }
        return neutral_command(true);
      }
      return neutral_command(true);
    }
  }
  return neutral_command(true);
}

Command GridEnv::random_command(Rng& rng) const {
  Command c{};
  for (int i = 0; i < kCommandDims; ++i)
    c[i] = rng.uniform(cfg_.bounds.lo[i], cfg_.bounds.hi[i]);
  return c;
}

Command GridEnv::suboptimal_command(double epsilon, Rng& rng) const {
  require(epsilon >= 0.0 && epsilon <= 1.0, "E_RANGE", "epsilon must be in [0,1]");
  if (rng.uniform() < epsilon) return random_command(rng);
  return expert_command();
}

TrajectoryRecord run_episode(GridEnv& env, const TaskSpec& spec,
                             const std::function<Command(GridEnv&)>& policy) {
  TrajectoryRecord rec;
  rec.task = spec;
  Observation obs = env.reset(spec);
  while (!env.done()) {
    Command cmd = policy(env);
    rec.obs.push_back(obs);
    rec.cmds.push_back(cmd);
    StepResult r = env.step(cmd);
    obs = r.obs;
  }
  rec.success = env.success();
  rec.reward = rec.success ? 1.0 : 0.0;
  return rec;
}

CollectSummary collect_dataset(const CollectConfig& cfg) {
  require(cfg.demo_fraction >= 0.0 && cfg.demo_fraction <= 1.0, "E_RANGE",
          "demo_fraction must be in [0,1]");
  GridEnv env(cfg.env);
  DatasetWriter writer(cfg.out_path, cfg);

  CollectSummary summary;
  int64_t n_demo = std::llround(static_cast<double>(cfg.n_episodes) * cfg.demo_fraction);
  int64_t n_sub = cfg.n_episodes - n_demo;

  auto expert_policy = [](GridEnv& e) { return e.expert_command(); };

  for (int64_t i = 0; i < n_demo; ++i) {
    int family = static_cast<int>(i % kNumSkills);
    TrajectoryRecord rec;
    // Demonstrations keep only successful episodes; retry with fresh seeds.
    bool ok = false;
    for (uint64_t retry = 0; retry < 32 && !ok; ++retry) {
      TaskSpec spec = sample_task(family, mix_seed(cfg.seed, 0xD3000000ULL + retry),
                                  static_cast<uint64_t>(i));
      rec = run_episode(env, spec, expert_policy);
      ok = rec.success;
    }
    require(ok, "E_COLLECT", "expert failed repeatedly on " +
                                 std::string(skill_name(family)));
    writer.append(rec);
    ++summary.demo_episodes;
    ++summary.per_family_demo[family];
    ++summary.successes;
    ++summary.per_family_success[family];
  }

  for (int64_t i = 0; i < n_sub; ++i) {
    int family = static_cast<int>(i % kNumSkills);
    TaskSpec spec = sample_task(family, mix_seed(cfg.seed, 0x5B000000ULL),
                                static_cast<uint64_t>(i));
    Rng noise(mix_seed(cfg.seed, 0x5B100000ULL + static_cast<uint64_t>(i)));
    auto noisy_policy = [&](GridEnv& e) {
      return e.suboptimal_command(cfg.suboptimal_epsilon, noise);
    };
    TrajectoryRecord rec = run_episode(env, spec, noisy_policy);
    writer.append(rec);
    ++summary.suboptimal_episodes;
    ++summary.per_family_subopt[family];
    if (rec.success) {
      ++summary.successes;
      ++summary.per_family_success[family];
    }
  }

  writer.close();
  summary.episodes = cfg.n_episodes;
  summary.realized_demo_fraction =
      cfg.n_episodes > 0
          ? static_cast<double>(summary.demo_episodes) / static_cast<double>(cfg.n_episodes)
          : 0.0;
  return summary;
}

}  // namespace germ
