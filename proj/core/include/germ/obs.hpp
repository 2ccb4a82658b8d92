#pragma once

#include <array>
#include <cstdint>

namespace germ {

// Content classes seen through the agent's 3x3 occupancy patch.
enum PatchClass : int {
  kPatchEmpty = 0,
  kPatchWall = 1,
  kPatchTarget = 2,
  kPatchObstacle = 3,
  kPatchDistractor = 4,
  kPatchOutside = 5,
};
inline constexpr int kNumPatchClasses = 6;
inline constexpr int kPatchCells = 9;  // 3x3, row-major, centered on the agent
inline constexpr int kNumHeadings = 4;  // N, E, S, W

// Symbolic per-frame observation: agent pose, the local occupancy patch, and
// the task target's descriptor id and cell.
struct Observation {
  int ax = 0;
  int ay = 0;
  int heading = 0;
  std::array<int, kPatchCells> patch{};
  int target_id = 0;
  int tx = 0;
  int ty = 0;

  bool operator==(const Observation&) const = default;
};

// Episode-constant instruction fields.
struct Instruction {
  int skill = 0;
  int object = 0;
  int gait = 0;
  int speed = 0;

  bool operator==(const Instruction&) const = default;
};

inline constexpr int kNumSkills = 5;
inline constexpr int kNumObjects = 10;
inline constexpr int kNumGaits = 4;
inline constexpr int kNumSpeeds = 3;

}  // namespace germ
