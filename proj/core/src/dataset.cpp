#include "germ/dataset.hpp"

#include <cstdio>

#include "json.hpp"

namespace germ {
namespace {

void put_f64(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

void put_f64_list(std::string& out, const double* v, size_t n) {
  out += '[';
  for (size_t i = 0; i < n; ++i) {
    if (i) out += ',';
    put_f64(out, v[i]);
  }
  out += ']';
}

}  // namespace

std::string episode_to_line(const TrajectoryRecord& rec) {
  std::string l;
  l.reserve(256 + rec.cmds.size() * 320);
  l += "{\"task\":{\"skill\":" + std::to_string(rec.task.skill);
  l += ",\"object\":" + std::to_string(rec.task.object);
  l += ",\"gait\":" + std::to_string(rec.task.gait);
  l += ",\"speed\":" + std::to_string(rec.task.speed);
  l += "},\"seed\":" + std::to_string(rec.task.seed);
  l += ",\"success\":";
  l += rec.success ? "true" : "false";
  l += ",\"reward\":";
  put_f64(l, rec.reward);
  l += ",\"steps\":[";
  for (size_t t = 0; t < rec.cmds.size(); ++t) {
    if (t) l += ',';
    const Observation& o = rec.obs[t];
    l += "{\"obs\":{\"ax\":" + std::to_string(o.ax);
    l += ",\"ay\":" + std::to_string(o.ay);
    l += ",\"hd\":" + std::to_string(o.heading);
    l += ",\"patch\":[";
    for (int p = 0; p < kPatchCells; ++p) {
      if (p) l += ',';
      l += std::to_string(o.patch[p]);
    }
    l += "],\"tid\":" + std::to_string(o.target_id);
    l += ",\"tx\":" + std::to_string(o.tx);
    l += ",\"ty\":" + std::to_string(o.ty);
    l += "},\"cmd\":";
    put_f64_list(l, rec.cmds[t].data(), kCommandDims);
    l += '}';
  }
  l += "]}";
  return l;
}

TrajectoryRecord episode_from_line(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  TrajectoryRecord rec;
  rec.task.skill = j.at("task").at("skill").get<int>();
  rec.task.object = j.at("task").at("object").get<int>();
  rec.task.gait = j.at("task").at("gait").get<int>();
  rec.task.speed = j.at("task").at("speed").get<int>();
  rec.task.seed = j.at("seed").get<uint64_t>();
  rec.success = j.at("success").get<bool>();
  rec.reward = j.at("reward").get<double>();
  for (const auto& s : j.at("steps")) {
    Observation o;
    const auto& jo = s.at("obs");
    o.ax = jo.at("ax").get<int>();
    o.ay = jo.at("ay").get<int>();
    o.heading = jo.at("hd").get<int>();
    const auto& patch = jo.at("patch");
    require(patch.size() == kPatchCells, "E_DATASET", "bad patch extent in record");
    for (int p = 0; p < kPatchCells; ++p) o.patch[p] = patch[p].get<int>();
    o.target_id = jo.at("tid").get<int>();
    o.tx = jo.at("tx").get<int>();
    o.ty = jo.at("ty").get<int>();
    rec.obs.push_back(o);
    const auto& jc = s.at("cmd");
    require(jc.size() == kCommandDims, "E_DATASET", "bad command extent in record");
    Command cmd{};
    for (int i = 0; i < kCommandDims; ++i) cmd[i] = jc[i].get<double>();
    rec.cmds.push_back(cmd);
  }
  return rec;
}

DatasetWriter::DatasetWriter(const std::string& path, const CollectConfig& cfg)
    : path_(path) {
  out_.open(path, std::ios::trunc);
  require(out_.good(), "E_IO", "cannot open dataset for writing: " + path);
  std::string h;
  h += "{\"format_version\":" + std::to_string(kDatasetFormatVersion);
  h += ",\"width\":" + std::to_string(cfg.env.width);
  h += ",\"height\":" + std::to_string(cfg.env.height);
  h += ",\"horizon\":" + std::to_string(cfg.env.horizon);
  h += ",\"motion_threshold\":";
  put_f64(h, cfg.env.motion_threshold);
  h += ",\"bounds_lo\":";
  put_f64_list(h, cfg.env.bounds.lo.data(), cfg.env.bounds.lo.size());
  h += ",\"bounds_hi\":";
  put_f64_list(h, cfg.env.bounds.hi.data(), cfg.env.bounds.hi.size());
  h += ",\"vocab_size\":" + std::to_string(cfg.vocab_size);
  h += ",\"action_dim\":" + std::to_string(kCommandDims);
  h += ",\"n_episodes\":" + std::to_string(cfg.n_episodes);
  h += ",\"demo_fraction\":";
  put_f64(h, cfg.demo_fraction);
  h += ",\"suboptimal_epsilon\":";
  put_f64(h, cfg.suboptimal_epsilon);
  h += ",\"seed\":" + std::to_string(cfg.seed);
  h += "}";
  out_ << h << '\n';
}

void DatasetWriter::append(const TrajectoryRecord& rec) {
  out_ << episode_to_line(rec) << '\n';
  require(out_.good(), "E_IO", "write failed for dataset: " + path_);
}

void DatasetWriter::close() {
  out_.close();
}

Dataset Dataset::load(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "E_IO", "cannot open dataset: " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "E_DATASET",
          "dataset file is empty: " + path);

  Dataset ds;
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const std::exception& e) {
    fail("E_DATASET", "bad dataset header: " + std::string(e.what()));
  }
  ds.header.format_version = h.at("format_version").get<int>();
  require(ds.header.format_version == kDatasetFormatVersion, "E_DATASET_VERSION",
          "dataset format version " + std::to_string(ds.header.format_version) +
              " unsupported (expected " + std::to_string(kDatasetFormatVersion) + ")");
  ds.header.env.width = h.at("width").get<int>();
  ds.header.env.height = h.at("height").get<int>();
  ds.header.env.horizon = h.at("horizon").get<int>();
  ds.header.env.motion_threshold = h.at("motion_threshold").get<double>();
  ds.header.env.bounds.lo = h.at("bounds_lo").get<std::vector<double>>();
  ds.header.env.bounds.hi = h.at("bounds_hi").get<std::vector<double>>();
  ds.header.env.bounds.validate();
  ds.header.vocab_size = h.at("vocab_size").get<int>();
  ds.header.action_dim = h.at("action_dim").get<int>();
  require(ds.header.action_dim == kCommandDims, "E_DATASET",
          "dataset action_dim != " + std::to_string(kCommandDims));
  ds.header.n_episodes = h.at("n_episodes").get<int64_t>();
  ds.header.demo_fraction = h.at("demo_fraction").get<double>();
  ds.header.suboptimal_epsilon = h.at("suboptimal_epsilon").get<double>();
  ds.header.seed = h.at("seed").get<uint64_t>();

  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      ds.records.push_back(episode_from_line(line));
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      fail("E_DATASET", "bad episode record at line " + std::to_string(lineno) + ": " +
                            std::string(e.what()));
    }
    const TrajectoryRecord& rec = ds.records.back();
    if (rec.reward == 1.0)
      ds.demo_indices.push_back(ds.records.size() - 1);
    else
      ds.subopt_indices.push_back(ds.records.size() - 1);
    ds.total_transitions += static_cast<int64_t>(rec.length());
  }
  return ds;
}

}  // namespace germ
