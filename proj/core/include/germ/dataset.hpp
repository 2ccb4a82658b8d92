#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "germ/env.hpp"

namespace germ {

inline constexpr int kDatasetFormatVersion = 1;

struct DatasetHeader {
  int format_version = kDatasetFormatVersion;
  EnvConfig env;
  int vocab_size = 256;
  int action_dim = kCommandDims;
  int64_t n_episodes = 0;
  double demo_fraction = 0.7569;
  double suboptimal_epsilon = 0.6;
  uint64_t seed = 0;
};

// Line-delimited dataset file: one JSON header record, then one JSON episode
// record per line with fields in fixed order
//   {task, seed, success, reward, steps:[{obs, cmd}]}.
// Floats are decimal-serialized with 17 significant digits so records
// round-trip losslessly and files are byte-stable across runs.
class DatasetWriter {
 public:
  DatasetWriter(const std::string& path, const CollectConfig& cfg);
  void append(const TrajectoryRecord& rec);
  void close();

 private:
  std::ofstream out_;
  std::string path_;
};

struct Dataset {
  DatasetHeader header;
  std::vector<TrajectoryRecord> records;
  std::vector<size_t> demo_indices;    // reward == 1.0 (demonstrations)
  std::vector<size_t> subopt_indices;  // reward == 0.0
  int64_t total_transitions = 0;

  static Dataset load(const std::string& path);
};

// Serialization of one episode record (exposed for round-trip tests).
std::string episode_to_line(const TrajectoryRecord& rec);
TrajectoryRecord episode_from_line(const std::string& line);

}  // namespace germ
