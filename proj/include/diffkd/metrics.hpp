#pragma once

// Newline-delimited JSON metric records.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "diffkd/diffkd.hpp"
#include "diffkd/errors.hpp"

namespace diffkd {

struct GammaStats {
  static constexpr int kBuckets = 10;  // equal-width buckets over [0, 1]
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::vector<int64_t> histogram = std::vector<int64_t>(kBuckets, 0);

  static GammaStats from(const torch::Tensor& gamma) {
    GammaStats s;
    auto g = gamma.detach().to(torch::kFloat64).flatten();
    s.mean = g.mean().item<double>();
    s.min = g.min().item<double>();
    s.max = g.max().item<double>();
    auto bucket = (g * kBuckets).floor().clamp(0, kBuckets - 1).to(torch::kLong);
    auto counts = torch::bincount(bucket, {}, kBuckets);
    for (int k = 0; k < kBuckets; ++k) s.histogram[static_cast<size_t>(k)] = counts[k].item<int64_t>();
    return s;
  }
};

struct EvalResult {
  double top1 = 0.0;  // percent
  double top5 = 0.0;  // percent
};

struct MetricRecord {
  int64_t step = 0;
  int64_t epoch = 0;
  std::optional<LossBundle> losses;
  std::optional<GammaStats> gamma_stats;
  std::optional<EvalResult> eval;
};

inline nlohmann::json to_json(const MetricRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  if (r.losses) {
    j["losses"] = {{"task", r.losses->task},
                   {"diff", r.losses->diff},
                   {"ae", r.losses->ae},
                   {"diffkd", r.losses->diffkd},
                   {"total", r.losses->total}};
  }
  if (r.gamma_stats) {
    j["gamma_stats"] = {{"mean", r.gamma_stats->mean},
                        {"min", r.gamma_stats->min},
                        {"max", r.gamma_stats->max},
                        {"histogram", r.gamma_stats->histogram}};
  }
  if (r.eval) j["eval"] = {{"top1", r.eval->top1}, {"top5", r.eval->top5}};
  return j;
}

inline MetricRecord metric_from_json(const nlohmann::json& j) {
  MetricRecord r;
  r.step = j.at("step").get<int64_t>();
  r.epoch = j.at("epoch").get<int64_t>();
  if (j.contains("losses")) {
    const auto& l = j["losses"];
    r.losses = LossBundle{l.at("task").get<double>(), l.at("diff").get<double>(),
                          l.at("ae").get<double>(), l.at("diffkd").get<double>(),
                          l.at("total").get<double>()};
  }
  if (j.contains("gamma_stats")) {
    const auto& g = j["gamma_stats"];
    GammaStats s;
    s.mean = g.at("mean").get<double>();
    s.min = g.at("min").get<double>();
    s.max = g.at("max").get<double>();
    s.histogram = g.at("histogram").get<std::vector<int64_t>>();
    r.gamma_stats = s;
  }
  if (j.contains("eval")) {
    r.eval = EvalResult{j["eval"].at("top1").get<double>(), j["eval"].at("top5").get<double>()};
  }
  return r;
}

class MetricsWriter {
 public:
  MetricsWriter() = default;
  MetricsWriter(const std::filesystem::path& path, bool append) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw IoError("cannot open metrics log '" + path.string() + "'");
  }

  void write(const MetricRecord& r) {
    if (!out_.is_open()) return;
    out_ << to_json(r).dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline std::vector<MetricRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics log '" + path.string() + "'");
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(metric_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace diffkd
