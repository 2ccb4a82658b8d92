#pragma once

// Two-state deterministic MDP with two action dimensions of three bins each,
// plus a tabular Q-function and a brute-force value-iteration oracle over
// the 9 joint actions. Used to pin the target construction and training
// loop against exact dynamic programming.

#include <array>
#include <cmath>
#include <vector>

#include "germ/dataset.hpp"
#include "germ/qlearning.hpp"

namespace germ::testsupport {

inline constexpr int kStates = 2;   // A = 0, B = 1
inline constexpr int kBins = 3;
inline constexpr int kDims = 2;

struct MdpStep {
  int next_state = 0;
  double reward = 0.0;
  bool terminal = false;
};

// A: action (1,2) -> B, everything else stays in A; reward 0.
// B: action (2,0) -> terminal with reward 1; (0,*) -> A; else stays in B.
inline MdpStep mdp_step(int state, int a1, int a2) {
  if (state == 0) {
    if (a1 == 1 && a2 == 2) return {1, 0.0, false};
    return {0, 0.0, false};
  }
  if (a1 == 2 && a2 == 0) return {1, 1.0, true};
  if (a1 == 0) return {0, 0.0, false};
  return {1, 0.0, false};
}

// Joint-action Q* by value iteration.
struct JointOracle {
  // q[s][a1][a2]
  std::array<std::array<std::array<double, kBins>, kBins>, kStates> q{};

  double state_value(int s) const {
    double best = -1e9;
    for (int a1 = 0; a1 < kBins; ++a1)
      for (int a2 = 0; a2 < kBins; ++a2) best = std::max(best, q[s][a1][a2]);
    return best;
  }
};

inline JointOracle value_iteration(double gamma, int sweeps = 500) {
  JointOracle o;
  for (int it = 0; it < sweeps; ++it) {
    JointOracle next = o;
    for (int s = 0; s < kStates; ++s)
      for (int a1 = 0; a1 < kBins; ++a1)
        for (int a2 = 0; a2 < kBins; ++a2) {
          MdpStep st = mdp_step(s, a1, a2);
          next.q[s][a1][a2] =
              st.reward + (st.terminal ? 0.0 : gamma * o.state_value(st.next_state));
        }
    o = next;
  }
  return o;
}

// Encodes a state id in the first observation field of a one-frame window.
inline Observation mdp_obs(int state) {
  Observation o;
  o.ax = state;
  return o;
}

// Full-coverage episode set: one episode per (state, joint action), each
// finishing through the terminal action so every record ends with the
// sparse reward attached to its last transition.
inline Dataset mdp_dataset() {
  Dataset ds;
  ds.header.demo_fraction = 1.0;
  ds.header.vocab_size = kBins;
  ds.header.env.bounds.lo.assign(kCommandDims, -1.0);
  ds.header.env.bounds.hi.assign(kCommandDims, 1.0);

  auto cmd_for = [](int a1, int a2) {
    // bin centers of a [-1,1] range with V = 3
    auto center = [](int b) { return -1.0 + (b + 0.5) * (2.0 / kBins); };
    Command c{};
    c[0] = center(a1);
    c[1] = center(a2);
    return c;
  };

  for (int s = 0; s < kStates; ++s) {
    for (int a1 = 0; a1 < kBins; ++a1)
      for (int a2 = 0; a2 < kBins; ++a2) {
        TrajectoryRecord rec;
        rec.task.skill = 0;
        int cur = s;
        int x1 = a1, x2 = a2;
        for (int guard = 0; guard < 8; ++guard) {
          rec.obs.push_back(mdp_obs(cur));
          rec.cmds.push_back(cmd_for(x1, x2));
          MdpStep st = mdp_step(cur, x1, x2);
          if (st.terminal) break;
          cur = st.next_state;
          // canonical continuation: head for the terminal action
          if (cur == 0) {
            x1 = 1;
            x2 = 2;
          } else {
            x1 = 2;
            x2 = 0;
          }
        }
        rec.success = true;
        rec.reward = 1.0;
        ds.records.push_back(rec);
      }
  }
  for (size_t i = 0; i < ds.records.size(); ++i) {
    ds.demo_indices.push_back(i);
    ds.total_transitions += static_cast<int64_t>(ds.records[i].length());
  }
  return ds;
}

// Lookup-table Q-function over (state, prior-bin) keys, realized as a single
// embedding table so the shared trainer, loss, and optimizer drive it
// unchanged. Row s holds the first-dimension Q values for state s; row
// kStates + s*kBins + b1 holds the second-dimension values after bin b1.
class TabularQ : public QRowsModel {
 public:
  explicit TabularQ(bool trainable = true)
      : table_({kStates + kStates * kBins, kBins}, trainable) {}

  int64_t vocab() const override { return kBins; }
  int64_t action_dims() const override { return kDims; }
  int64_t history_frames() const override { return 1; }

  std::vector<std::pair<std::string, Tensor*>> named_params() override {
    return {{"table", &table_}};
  }

  NodeId rows_taken(Tape& tape, std::span<const TransitionSample> batch, bool,
                    Rng&, std::vector<GateDecision>*) override {
    std::vector<int64_t> ids;
    ids.reserve(batch.size() * kDims);
    for (const TransitionSample& s : batch) {
      int64_t state = s.window.back().ax;
      ids.push_back(state);
      ids.push_back(kStates + state * kBins + s.action_bins[0]);
    }
    return tape.embedding_gather(tape.param(table_), std::move(ids));
  }

  NodeId rows_next_first(Tape& tape, std::span<const TransitionSample> batch,
                         std::span<const int> subset) override {
    std::vector<int64_t> ids;
    ids.reserve(subset.size());
    for (int idx : subset) ids.push_back(batch[idx].next_window.back().ax);
    return tape.embedding_gather(tape.param(table_), std::move(ids));
  }

  double q1(int state, int b1) const { return table_.data[state * kBins + b1]; }
  double q2(int state, int b1, int b2) const {
    return table_.data[(kStates + state * kBins + b1) * kBins + b2];
  }

  // Greedy joint action decoded dimension by dimension.
  std::pair<int, int> greedy(int state) const {
    int best1 = 0;
    for (int b = 1; b < kBins; ++b)
      if (q1(state, b) > q1(state, best1)) best1 = b;
    int best2 = 0;
    for (int b = 1; b < kBins; ++b)
      if (q2(state, best1, b) > q2(state, best1, best2)) best2 = b;
    return {best1, best2};
  }

  Tensor& table() { return table_; }

 private:
  Tensor table_;
};

}  // namespace germ::testsupport
