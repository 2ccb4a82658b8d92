#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "germ/error.hpp"

namespace germ {

// Continuous robot command layout:
//   [v_x, v_y, w_z, th1, th2, th3, freq, height, pitch, stance_y, foot_h, term]
// v_x/v_y/w_z drive the toy kinematics; the gait-shape dimensions are carried
// through data and model but are inert in the environment; term > mid-range
// ends the episode.
inline constexpr int kCommandDims = 12;
inline constexpr int kTermDim = 11;

using Command = std::array<double, kCommandDims>;

struct DiscretizedAction {
  std::vector<int> bins;  // one bin per action dimension, each in [0, V)
};

// Per-dimension command ranges. Defaults: [-1, 1] everywhere except
// frequency (dim 6) and body height (dim 7), which are [0, 1].
struct ActionBounds {
  std::vector<double> lo;
  std::vector<double> hi;

  static ActionBounds defaults(int dims = kCommandDims);
  void validate() const;
  double term_threshold() const { return 0.5 * (lo[kTermDim] + hi[kTermDim]); }
};

// Bin-center decoding: value_i = lo + (bin + 0.5) * (hi - lo) / V.
Command detokenize(const DiscretizedAction& bins, const ActionBounds& bounds, int vocab);

// Inverse map: bin_i = clamp(floor((v - lo) / (hi - lo) * V), 0, V-1).
// Values outside bounds are clamped; *clamped_count (optional) is bumped
// once per clamped dimension.
DiscretizedAction discretize(const Command& cmd, const ActionBounds& bounds, int vocab,
                             int64_t* clamped_count = nullptr);

}  // namespace germ
