#include "germ/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace germ {
namespace {

constexpr char kMagic[8] = {'G', 'E', 'R', 'M', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

void put_i64(std::ostream& os, int64_t v) { put_u64(os, static_cast<uint64_t>(v)); }

void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<uint64_t>(v)); }

void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

int64_t get_i64(std::istream& is) { return static_cast<int64_t>(get_u64(is)); }

double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

std::string get_str(std::istream& is) {
  uint32_t n = get_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, PolicyDecoder& model,
                     const CheckpointMeta& meta) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(os.good(), "E_IO", "cannot open checkpoint for writing: " + path);

  os.write(kMagic, sizeof(kMagic));
  put_u32(os, kVersion);

  const ModelConfig& c = meta.config;
  put_i64(os, c.action_dim);
  put_i64(os, c.num_layers);
  put_i64(os, c.d_model);
  put_i64(os, c.num_heads);
  put_i64(os, c.d_ff);
  put_i64(os, c.num_experts);
  put_i64(os, c.top_k);
  put_i64(os, c.vocab_size);
  put_i64(os, c.time_length);
  put_i64(os, c.context_len);
  put_i64(os, c.use_moe ? 1 : 0);
  put_i64(os, c.grid_w);
  put_i64(os, c.grid_h);
  put_f64(os, c.init_std);

  put_u32(os, static_cast<uint32_t>(meta.bounds.lo.size()));
  for (double v : meta.bounds.lo) put_f64(os, v);
  for (double v : meta.bounds.hi) put_f64(os, v);

  put_str(os, meta.variant);
  put_f64(os, meta.gamma);
  put_f64(os, meta.alpha);
  put_f64(os, meta.lr);
  put_u64(os, meta.seed);
  put_u64(os, meta.steps);
  put_i64(os, meta.env_horizon);
  put_f64(os, meta.env_motion_threshold);

  auto params = model.named_params();
  put_u32(os, static_cast<uint32_t>(params.size()));
  for (auto& [name, t] : params) {
    put_str(os, name);
    put_u64(os, static_cast<uint64_t>(t->numel()));
    for (double v : t->data) put_f64(os, v);
  }
  require(os.good(), "E_IO", "write failed for checkpoint: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path, bool trainable) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "E_IO", "cannot open checkpoint: " + path);

  char magic[8];
  is.read(magic, sizeof(magic));
  require(is.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0, "E_CKPT_MAGIC",
          "not a checkpoint file: " + path);
  uint32_t version = get_u32(is);
  require(version == kVersion, "E_CKPT_VERSION",
          "unsupported checkpoint version " + std::to_string(version));

  LoadedCheckpoint out;
  ModelConfig& c = out.meta.config;
  c.action_dim = get_i64(is);
  c.num_layers = get_i64(is);
  c.d_model = get_i64(is);
  c.num_heads = get_i64(is);
  c.d_ff = get_i64(is);
  c.num_experts = get_i64(is);
  c.top_k = get_i64(is);
  c.vocab_size = get_i64(is);
  c.time_length = get_i64(is);
  c.context_len = get_i64(is);
  c.use_moe = get_i64(is) != 0;
  c.grid_w = get_i64(is);
  c.grid_h = get_i64(is);
  c.init_std = get_f64(is);

  uint32_t dims = get_u32(is);
  out.meta.bounds.lo.resize(dims);
  out.meta.bounds.hi.resize(dims);
  for (auto& v : out.meta.bounds.lo) v = get_f64(is);
  for (auto& v : out.meta.bounds.hi) v = get_f64(is);

  out.meta.variant = get_str(is);
  out.meta.gamma = get_f64(is);
  out.meta.alpha = get_f64(is);
  out.meta.lr = get_f64(is);
  out.meta.seed = get_u64(is);
  out.meta.steps = get_u64(is);
  out.meta.env_horizon = get_i64(is);
  out.meta.env_motion_threshold = get_f64(is);
  require(is.good(), "E_CKPT_TRUNCATED", "checkpoint header truncated: " + path);

  out.model = std::make_unique<PolicyDecoder>(c, /*init_seed=*/0, trainable);
  auto params = out.model->named_params();
  uint32_t n_blocks = get_u32(is);
  require(n_blocks == params.size(), "E_CKPT_MISMATCH",
          "checkpoint holds " + std::to_string(n_blocks) + " parameter blocks, model has " +
              std::to_string(params.size()));
  for (auto& [name, t] : params) {
    std::string got = get_str(is);
    require(got == name, "E_CKPT_MISMATCH",
            "checkpoint block '" + got + "' does not match expected '" + name + "'");
    uint64_t numel = get_u64(is);
    require(numel == static_cast<uint64_t>(t->numel()), "E_CKPT_MISMATCH",
            "checkpoint block '" + name + "' has wrong extent");
    for (double& v : t->data) v = get_f64(is);
  }
  require(is.good(), "E_CKPT_TRUNCATED", "checkpoint truncated: " + path);
  return out;
}

}  // namespace germ
