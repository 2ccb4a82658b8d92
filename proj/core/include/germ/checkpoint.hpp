#pragma once

#include <memory>
#include <string>

#include "germ/action.hpp"
#include "germ/model.hpp"

namespace germ {

// Trainer provenance stored alongside the weights so evaluation can verify
// it is paired with a compatible environment (bounds / vocab / action dims).
struct CheckpointMeta {
  ModelConfig config;
  ActionBounds bounds = ActionBounds::defaults();
  std::string variant = "germ";
  double gamma = 0.98;
  double alpha = 1.0;
  double lr = 3e-4;
  uint64_t seed = 0;
  uint64_t steps = 0;
  int64_t env_horizon = 60;
  double env_motion_threshold = 0.25;
};

// Binary layout (all integers and floats little-endian, fixed field order —
// see README): magic "GERMCKPT", u32 format version, config fields, bounds
// table, trainer meta, then one named block per parameter as u32 name
// length, name bytes, u64 element count, f64 data.
void save_checkpoint(const std::string& path, PolicyDecoder& model,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::unique_ptr<PolicyDecoder> model;
};

LoadedCheckpoint load_checkpoint(const std::string& path, bool trainable = false);

}  // namespace germ
