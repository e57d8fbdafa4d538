#pragma once

// Sequential ablation sweeps sharing one teacher checkpoint.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "diffkd/config.hpp"
#include "diffkd/errors.hpp"
#include "diffkd/trainer.hpp"

namespace diffkd {

enum class AblationFactor { nfe, ae_dim };

struct AblationRow {
  std::string value;
  std::vector<double> top1;  // one entry per seed
  std::vector<double> top5;

  double mean_top1() const {
    double s = 0;
    for (double v : top1) s += v;
    return top1.empty() ? 0.0 : s / static_cast<double>(top1.size());
  }
  double std_top1() const {
    if (top1.size() < 2) return 0.0;
    const double m = mean_top1();
    double s = 0;
    for (double v : top1) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(top1.size() - 1));
  }
};

/// Applies one ablation value to a config; "ae-dim" accepts an integer width or "none".
inline ExperimentConfig apply_ablation(ExperimentConfig cfg, AblationFactor factor,
                                       const std::string& value) {
  if (factor == AblationFactor::nfe) {
    cfg.diffkd.nfe = std::stoll(value);
  } else {
    bool any_feature = false;
    for (auto& h : cfg.heads) {
      if (h.tap != HeadTap::feature) continue;
      any_feature = true;
      if (value == "none" || value == "0") {
        h.use_autoencoder = false;
        h.latent_channels = 0;
      } else {
        h.use_autoencoder = true;
        h.latent_channels = std::stoll(value);
      }
    }
    if (!any_feature) throw ConfigError("ae-dim ablation needs a feature head");
  }
  return cfg;
}

inline std::vector<AblationRow> run_ablation(
    const ExperimentConfig& base, AblationFactor factor, const std::vector<std::string>& values,
    const std::vector<int64_t>& seeds, const std::filesystem::path& out_dir,
    const std::function<void(const std::string&, int64_t, const EvalResult&)>& on_run = {}) {
  if (values.empty()) throw ParameterError("ablation needs at least one value");
  std::vector<AblationRow> rows;
  const std::string tag = factor == AblationFactor::nfe ? "nfe" : "ae";
  for (const auto& v : values) {
    AblationRow row;
    row.value = v;
    for (auto seed : seeds) {
      auto cfg = apply_ablation(base, factor, v);
      cfg.seed = seed;
      const auto dir = out_dir / (tag + "_" + v) / ("seed" + std::to_string(seed));
      cfg.logging.metrics = (dir / "metrics.jsonl").string();
      cfg.logging.checkpoint = (dir / "student.pt").string();
      cfg.validate();
      auto result = train(cfg);
      row.top1.push_back(result.eval.top1);
      row.top5.push_back(result.eval.top5);
      if (on_run) on_run(v, seed, result.eval);
    }
    rows.push_back(row);
  }
  return rows;
}

inline void write_ablation_table(std::ostream& os, const std::string& factor,
                                 const std::vector<AblationRow>& rows) {
  os << factor << ",seeds,mean_top1,std_top1,per_seed_top1\n";
  for (const auto& r : rows) {
    os << r.value << "," << r.top1.size() << "," << r.mean_top1() << "," << r.std_top1() << ",";
    for (size_t k = 0; k < r.top1.size(); ++k) os << (k ? ";" : "") << r.top1[k];
    os << "\n";
  }
}

}  // namespace diffkd
