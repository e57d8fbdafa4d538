#pragma once

// Single-file checkpoints built on torch::serialize archives.
//
// Layout (keys of the top-level archive):
//   format_version  int      kCheckpointFormat
//   role            string   "teacher" | "student"
//   arch            string   architecture id of "model"
//   num_classes     int
//   in_channels     int
//   config          string   TOML snapshot of the experiment config
//   epoch, step     int      last completed epoch (0-based) and global step
//   top1, top5      double   accuracy recorded at save time
//   model           archive  network weights and buffers
//   diffkd          archive  heads (students only)
//   optimizer       archive  optimizer state
//   rng_state       tensor   state of the diffusion-noise generator

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <torch/torch.h>

#include "diffkd/config.hpp"
#include "diffkd/errors.hpp"
#include "diffkd/metrics.hpp"

namespace diffkd {

inline constexpr int64_t kCheckpointFormat = 1;

struct CheckpointHeader {
  int64_t format_version = kCheckpointFormat;
  std::string role;
  std::string arch;
  int64_t num_classes = 0;
  int64_t in_channels = 3;
  std::string config;
  int64_t epoch = -1;
  int64_t step = 0;
  EvalResult recorded;
};

inline void write_header(torch::serialize::OutputArchive& ar, const CheckpointHeader& h) {
  ar.write("format_version", c10::IValue(h.format_version));
  ar.write("role", c10::IValue(h.role));
  ar.write("arch", c10::IValue(h.arch));
  ar.write("num_classes", c10::IValue(h.num_classes));
  ar.write("in_channels", c10::IValue(h.in_channels));
  ar.write("config", c10::IValue(h.config));
  ar.write("epoch", c10::IValue(h.epoch));
  ar.write("step", c10::IValue(h.step));
  ar.write("top1", c10::IValue(h.recorded.top1));
  ar.write("top5", c10::IValue(h.recorded.top5));
}

inline CheckpointHeader read_header(torch::serialize::InputArchive& ar) {
  CheckpointHeader h;
  c10::IValue v;
  auto need = [&](const char* key) -> c10::IValue& {
    if (!ar.try_read(key, v)) throw CheckpointError(std::string("checkpoint lacks '") + key + "'");
    return v;
  };
  h.format_version = need("format_version").toInt();
  if (h.format_version != kCheckpointFormat) {
    throw CheckpointError("unsupported checkpoint format " + std::to_string(h.format_version));
  }
  h.role = need("role").toStringRef();
  h.arch = need("arch").toStringRef();
  h.num_classes = need("num_classes").toInt();
  h.in_channels = need("in_channels").toInt();
  h.config = need("config").toStringRef();
  h.epoch = need("epoch").toInt();
  h.step = need("step").toInt();
  h.recorded.top1 = need("top1").toDouble();
  h.recorded.top5 = need("top5").toDouble();
  return h;
}

inline torch::serialize::InputArchive open_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw CheckpointError("checkpoint '" + path.string() + "' does not exist");
  }
  torch::serialize::InputArchive ar;
  try {
    ar.load_from(path.string());
  } catch (const c10::Error& e) {
    throw CheckpointError("cannot read checkpoint '" + path.string() + "': " + e.what_without_backtrace());
  }
  return ar;
}

inline CheckpointHeader peek_checkpoint(const std::filesystem::path& path) {
  auto ar = open_checkpoint(path);
  return read_header(ar);
}

inline void save_archive(torch::serialize::OutputArchive& ar, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write then rename so an interrupted save never leaves a truncated checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  ar.save_to(tmp.string());
  std::filesystem::rename(tmp, path);
}

/// FNV-1a over every parameter and buffer, in registration order.
inline uint64_t weights_hash(const torch::nn::Module& module) {
  uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const torch::Tensor& t) {
    auto c = t.detach().contiguous().cpu();
    const auto* bytes = static_cast<const uint8_t*>(c.data_ptr());
    for (size_t i = 0; i < c.nbytes(); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : module.parameters(true)) mix(p);
  for (const auto& b : module.buffers(true)) mix(b);
  return h;
}

}  // namespace diffkd
