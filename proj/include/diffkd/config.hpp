#pragma once

// Experiment configuration: dataset, architectures, optimization and DiffKD heads.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "diffkd/diffkd.hpp"
#include "diffkd/errors.hpp"
#include "diffkd/toml_lite.hpp"

namespace diffkd {

enum class DatasetKind { cifar10, cifar100, synthetic };

inline DatasetKind parse_dataset(const std::string& s) {
  if (s == "cifar10") return DatasetKind::cifar10;
  if (s == "cifar100") return DatasetKind::cifar100;
  if (s == "synthetic") return DatasetKind::synthetic;
  throw ConfigError("unknown dataset '" + s + "' (expected cifar10, cifar100 or synthetic)");
}

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::cifar10: return "cifar10";
    case DatasetKind::cifar100: return "cifar100";
    case DatasetKind::synthetic: return "synthetic";
  }
  return "unknown";
}

struct DataConfig {
  DatasetKind dataset = DatasetKind::synthetic;
  std::string data_dir = "data";
  int64_t subset_size = 0;  // 0 keeps the full training split
  int64_t eval_size = 0;    // 0 keeps the full evaluation split
  bool augment = true;      // random crop (zero padding) + horizontal flip
  int64_t crop_padding = 2;
  int64_t dataset_seed = 0;
  // Synthetic generator.
  int64_t classes = 10;
  int64_t channels = 3;
  int64_t image_size = 16;
  int64_t train_samples = 5000;
  int64_t eval_samples = 2000;
  int64_t modes_per_class = 4;
  double signal = 1.0;
  double noise = 1.0;
  double distractor = 1.0;
};

struct OptimizerConfig {
  std::string kind = "sgd";  // sgd | adamw
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool nesterov = false;
};

struct ScheduleConfig {
  int64_t epochs = 20;
  int64_t batch_size = 128;
  std::string kind = "step";  // step | cosine
  std::vector<int64_t> milestones = {10, 15};
  double gamma = 0.1;
};

struct TeacherConfig {
  std::string arch = "resnet20";
  std::string checkpoint = "runs/teacher.pt";
  bool provision = true;  // train and freeze a teacher when the checkpoint is missing
  int64_t epochs = 30;
};

struct HeadConfig {
  HeadTap tap = HeadTap::feature;
  bool use_autoencoder = false;
  int64_t latent_channels = 0;
  DistanceKind distance = DistanceKind::mse;
};

struct LoggingConfig {
  int64_t interval = 50;
  std::string metrics = "runs/metrics.jsonl";
  std::string checkpoint = "runs/student.pt";
};

struct ExperimentConfig {
  int64_t seed = 0;
  // Training strategy label; A1 (crop + flip, step decay) is the only executable one.
  std::string strategy = "A1";
  DataConfig data;
  TeacherConfig teacher;
  std::string student_arch = "resnet8";
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  DiffKDConfig diffkd;
  std::vector<HeadConfig> heads;
  LoggingConfig logging;

  void validate() const {
    diffkd.validate();
    if (diffkd.lambda_kd > 0 && heads.empty()) {
      throw ConfigError("at least one [[heads]] entry is required when lambda_kd > 0");
    }
    if (schedule.epochs < 1 || schedule.batch_size < 1) {
      throw ConfigError("epochs and batch_size must be >= 1");
    }
    if (strategy == "B1" || strategy == "B2" || strategy == "B3") {
      throw ConfigError("strategy " + strategy +
                        " (ImageNet schedule with EMA/mixup/cutmix) is recognized but not "
                        "executable in this harness; use A1");
    }
    if (strategy != "A1") throw ConfigError("unknown strategy '" + strategy + "'");
    if (optimizer.kind != "sgd" && optimizer.kind != "adamw") {
      throw ConfigError("unknown optimizer '" + optimizer.kind + "' (expected sgd or adamw)");
    }
    if (schedule.kind != "step" && schedule.kind != "cosine") {
      throw ConfigError("unknown lr schedule '" + schedule.kind + "' (expected step or cosine)");
    }
    for (const auto& h : heads) {
      if (h.use_autoencoder && h.tap != HeadTap::feature) {
        throw ConfigError("the autoencoder applies to feature heads only");
      }
      if (h.use_autoencoder && h.latent_channels <= 0) {
        throw ConfigError("latent_channels must be > 0 when use_autoencoder = true");
      }
    }
  }
};

namespace detail {

// Pulls typed values out of a table and remembers which keys were consumed.
class TableReader {
 public:
  TableReader(const toml::Table* table, std::string name) : table_(table), name_(std::move(name)) {}

  template <typename T>
  void read(const std::string& key, T& out) {
    if (!table_) return;
    auto it = table_->find(key);
    if (it == table_->end()) return;
    used_.insert(key);
    assign(it->second, key, out);
  }

  void finish() const {
    if (!table_) return;
    for (const auto& [k, v] : *table_) {
      if (!used_.count(k)) throw ConfigError("unknown key '" + k + "' in [" + name_ + "]");
    }
  }

 private:
  ConfigError bad(const std::string& key, const char* want) const {
    return ConfigError("[" + name_ + "] " + key + ": expected " + want);
  }
  void assign(const toml::Value& v, const std::string& key, int64_t& out) const {
    if (v.type != toml::Value::Type::integer) throw bad(key, "an integer");
    out = v.i;
  }
  void assign(const toml::Value& v, const std::string& key, double& out) const {
    if (v.type != toml::Value::Type::integer && v.type != toml::Value::Type::floating) {
      throw bad(key, "a number");
    }
    out = v.as_number();
  }
  void assign(const toml::Value& v, const std::string& key, bool& out) const {
    if (v.type != toml::Value::Type::boolean) throw bad(key, "a boolean");
    out = v.b;
  }
  void assign(const toml::Value& v, const std::string& key, std::string& out) const {
    if (v.type != toml::Value::Type::string) throw bad(key, "a string");
    out = v.s;
  }
  void assign(const toml::Value& v, const std::string& key, std::vector<int64_t>& out) const {
    if (v.type != toml::Value::Type::array) throw bad(key, "an array of integers");
    out.clear();
    for (const auto& item : v.items) {
      if (item.type != toml::Value::Type::integer) throw bad(key, "an array of integers");
      out.push_back(item.i);
    }
  }

  const toml::Table* table_;
  std::string name_;
  std::set<std::string> used_;
};

inline const toml::Table* find_table(const toml::Document& doc, const std::string& name) {
  auto it = doc.tables.find(name);
  return it == doc.tables.end() ? nullptr : &it->second;
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  const auto doc = toml::parse(text);
  for (const auto& [name, table] : doc.tables) {
    static const std::set<std::string> known = {"",          "data",     "teacher", "student",
                                                "optimizer", "schedule", "diffkd",  "logging"};
    if (!known.count(name)) throw ConfigError("unknown section [" + name + "]");
  }
  for (const auto& [name, list] : doc.arrays) {
    if (name != "heads") throw ConfigError("unknown table array [[" + name + "]]");
  }

  ExperimentConfig c;
  {
    detail::TableReader r(detail::find_table(doc, ""), "top-level");
    r.read("seed", c.seed);
    r.read("strategy", c.strategy);
    r.finish();
  }
  {
    detail::TableReader r(detail::find_table(doc, "data"), "data");
    std::string dataset = to_string(c.data.dataset);
    r.read("dataset", dataset);
    c.data.dataset = parse_dataset(dataset);
    r.read("data_dir", c.data.data_dir);
    r.read("subset_size", c.data.subset_size);
    r.read("eval_size", c.data.eval_size);
    r.read("augment", c.data.augment);
    r.read("crop_padding", c.data.crop_padding);
    r.read("dataset_seed", c.data.dataset_seed);
    r.read("classes", c.data.classes);
    r.read("channels", c.data.channels);
    r.read("image_size", c.data.image_size);
    r.read("train_samples", c.data.train_samples);
    r.read("eval_samples", c.data.eval_samples);
    r.read("modes_per_class", c.data.modes_per_class);
    r.read("signal", c.data.signal);
    r.read("noise", c.data.noise);
    r.read("distractor", c.data.distractor);
    r.finish();
  }
  {
    detail::TableReader r(detail::find_table(doc, "teacher"), "teacher");
    r.read("arch", c.teacher.arch);
    r.read("checkpoint", c.teacher.checkpoint);
    r.read("provision", c.teacher.provision);
    r.read("epochs", c.teacher.epochs);
    r.finish();
  }
  {
    detail::TableReader r(detail::find_table(doc, "student"), "student");
    r.read("arch", c.student_arch);
    r.finish();
  }
  {
    detail::TableReader r(detail::find_table(doc, "optimizer"), "optimizer");
    r.read("kind", c.optimizer.kind);
    r.read("lr", c.optimizer.lr);
    r.read("momentum", c.optimizer.momentum);
    r.read("weight_decay", c.optimizer.weight_decay);
    r.read("nesterov", c.optimizer.nesterov);
    r.finish();
  }
  {
    detail::TableReader r(detail::find_table(doc, "schedule"), "schedule");
    r.read("epochs", c.schedule.epochs);
    r.read("batch_size", c.schedule.batch_size);
    r.read("kind", c.schedule.kind);
    r.read("milestones", c.schedule.milestones);
    r.read("gamma", c.schedule.gamma);
    r.finish();
  }
  {
    detail::TableReader r(detail::find_table(doc, "diffkd"), "diffkd");
    auto& d = c.diffkd;
    r.read("lambda_diff", d.lambda_diff);
    r.read("lambda_ae", d.lambda_ae);
    r.read("lambda_kd", d.lambda_kd);
    r.read("total_timesteps", d.total_timesteps);
    r.read("beta_start", d.beta_start);
    r.read("beta_end", d.beta_end);
    r.read("initial_timestep", d.initial_timestep);
    r.read("nfe", d.nfe);
    r.read("temperature", d.temperature);
    r.read("denoise", d.denoise);
    r.read("adaptive_noise", d.adaptive_noise);
    r.read("kd_updates_denoiser", d.kd_updates_denoiser);
    r.finish();
  }
  if (auto it = doc.arrays.find("heads"); it != doc.arrays.end()) {
    for (const auto& table : it->second) {
      detail::TableReader r(&table, "heads");
      HeadConfig h;
      std::string tap = to_string(h.tap), dist = to_string(h.distance);
      r.read("tap", tap);
      r.read("distance", dist);
      r.read("use_autoencoder", h.use_autoencoder);
      r.read("latent_channels", h.latent_channels);
      r.finish();
      h.tap = parse_tap(tap);
      h.distance = parse_distance(dist);
      c.heads.push_back(h);
    }
  }
  {
    detail::TableReader r(detail::find_table(doc, "logging"), "logging");
    r.read("interval", c.logging.interval);
    r.read("metrics", c.logging.metrics);
    r.read("checkpoint", c.logging.checkpoint);
    r.finish();
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Serializes a config back into the TOML subset accepted by parse_config.
inline std::string to_toml(const ExperimentConfig& c) {
  using toml::format_value;
  using toml::make;
  std::ostringstream os;
  auto kv = [&](const std::string& k, const toml::Value& v) { os << k << " = " << format_value(v) << "\n"; };
  kv("seed", make(c.seed));
  kv("strategy", make(c.strategy));
  os << "\n[data]\n";
  kv("dataset", make(to_string(c.data.dataset)));
  kv("data_dir", make(c.data.data_dir));
  kv("subset_size", make(c.data.subset_size));
  kv("eval_size", make(c.data.eval_size));
  kv("augment", make(c.data.augment));
  kv("crop_padding", make(c.data.crop_padding));
  kv("dataset_seed", make(c.data.dataset_seed));
  kv("classes", make(c.data.classes));
  kv("channels", make(c.data.channels));
  kv("image_size", make(c.data.image_size));
  kv("train_samples", make(c.data.train_samples));
  kv("eval_samples", make(c.data.eval_samples));
  kv("modes_per_class", make(c.data.modes_per_class));
  kv("signal", make(c.data.signal));
  kv("noise", make(c.data.noise));
  kv("distractor", make(c.data.distractor));
  os << "\n[teacher]\n";
  kv("arch", make(c.teacher.arch));
  kv("checkpoint", make(c.teacher.checkpoint));
  kv("provision", make(c.teacher.provision));
  kv("epochs", make(c.teacher.epochs));
  os << "\n[student]\n";
  kv("arch", make(c.student_arch));
  os << "\n[optimizer]\n";
  kv("kind", make(c.optimizer.kind));
  kv("lr", make(c.optimizer.lr));
  kv("momentum", make(c.optimizer.momentum));
  kv("weight_decay", make(c.optimizer.weight_decay));
  kv("nesterov", make(c.optimizer.nesterov));
  os << "\n[schedule]\n";
  kv("epochs", make(c.schedule.epochs));
  kv("batch_size", make(c.schedule.batch_size));
  kv("kind", make(c.schedule.kind));
  toml::Value ms;
  ms.type = toml::Value::Type::array;
  for (auto m : c.schedule.milestones) ms.items.push_back(make(m));
  kv("milestones", ms);
  kv("gamma", make(c.schedule.gamma));
  os << "\n[diffkd]\n";
  const auto& d = c.diffkd;
  kv("lambda_diff", make(d.lambda_diff));
  kv("lambda_ae", make(d.lambda_ae));
  kv("lambda_kd", make(d.lambda_kd));
  kv("total_timesteps", make(d.total_timesteps));
  kv("beta_start", make(d.beta_start));
  kv("beta_end", make(d.beta_end));
  kv("initial_timestep", make(d.initial_timestep));
  kv("nfe", make(d.nfe));
  kv("temperature", make(d.temperature));
  kv("denoise", make(d.denoise));
  kv("adaptive_noise", make(d.adaptive_noise));
  kv("kd_updates_denoiser", make(d.kd_updates_denoiser));
  for (const auto& h : c.heads) {
    os << "\n[[heads]]\n";
    kv("tap", make(to_string(h.tap)));
    kv("distance", make(to_string(h.distance)));
    kv("use_autoencoder", make(h.use_autoencoder));
    kv("latent_channels", make(h.latent_channels));
  }
  os << "\n[logging]\n";
  kv("interval", make(c.logging.interval));
  kv("metrics", make(c.logging.metrics));
  kv("checkpoint", make(c.logging.checkpoint));
  return os.str();
}

}  // namespace diffkd
