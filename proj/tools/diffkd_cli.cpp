// diffkd: train, evaluate, ablate and visualize DiffKD runs.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "diffkd/all.hpp"

namespace fs = std::filesystem;
using namespace diffkd;

namespace {

constexpr int kUsageError = 2;
constexpr int kRuntimeError = 1;

// One line, machine-parseable: error: kind=<kind> message="<text>"
void report(const std::string& kind, const std::string& message) {
  std::string flat;
  for (char c : message) {
    if (c == '\n') flat += ' ';
    else if (c == '"') flat += "\\\"";
    else flat += c;
  }
  std::cerr << "error: kind=" << kind << " message=\"" << flat << "\"\n";
}

std::vector<std::string> split_values(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

ExperimentConfig config_or_usage(const std::string& path) {
  if (!fs::exists(path)) {
    throw CLI::ValidationError("config", "config file '" + path + "' does not exist");
  }
  return load_config(path);
}

int cmd_train(const std::string& config_path, bool verbose) {
  auto cfg = config_or_usage(config_path);
  TrainOptions opts;
  opts.verbose = verbose;
  auto result = train(cfg, opts);
  std::cout << "top1: " << result.eval.top1 << "\n";
  std::cout << "top5: " << result.eval.top5 << "\n";
  std::cout << "checkpoint: " << result.checkpoint.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint) {
  auto ev = evaluate(checkpoint);
  std::cout << "top1: " << ev.top1 << "\n";
  std::cout << "top5: " << ev.top5 << "\n";
  return 0;
}

int cmd_ablate(const std::string& factor_name, const std::string& config_path,
               const std::string& values, const std::string& seeds_csv, const std::string& out_dir) {
  auto cfg = config_or_usage(config_path);
  const auto factor = factor_name == "nfe" ? AblationFactor::nfe : AblationFactor::ae_dim;
  std::vector<int64_t> seeds;
  for (const auto& s : split_values(seeds_csv)) seeds.push_back(std::stoll(s));
  if (seeds.empty()) seeds.push_back(cfg.seed);
  auto rows = run_ablation(cfg, factor, split_values(values), seeds, out_dir,
                           [&](const std::string& v, int64_t seed, const EvalResult& ev) {
                             std::cerr << factor_name << "=" << v << " seed=" << seed
                                       << " top1=" << ev.top1 << "\n";
                           });
  write_ablation_table(std::cout, factor_name, rows);
  const auto table = fs::path(out_dir) / (factor_name + "_ablation.csv");
  fs::create_directories(table.parent_path());
  std::ofstream out(table);
  write_ablation_table(out, factor_name, rows);
  return 0;
}

// Selects evaluation samples: "sample:<i>" or "batch:<i>" (eight consecutive samples).
torch::Tensor select_input(const Split& eval, const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) {
    throw CLI::ValidationError("--input", "expected sample:<index> or batch:<index>, got '" + spec + "'");
  }
  const auto kind = spec.substr(0, colon);
  const int64_t index = std::stoll(spec.substr(colon + 1));
  const int64_t len = kind == "batch" ? 8 : 1;
  if (kind != "batch" && kind != "sample") {
    throw CLI::ValidationError("--input", "unknown input kind '" + kind + "'");
  }
  const int64_t start = index * len;
  if (index < 0 || start + len > eval.size()) throw IndexError("input index out of range");
  return eval.images.narrow(0, start, len);
}

int cmd_visualize(const std::string& checkpoint, const std::string& input, const std::string& out_dir,
                  double tau) {
  auto loaded = load_run(checkpoint);
  auto& run = loaded.run;
  auto images = select_input(loaded.data.eval, input);
  torch::NoGradGuard no_grad;
  auto t_out = run.teacher->forward(images);
  auto s_out = run.student->forward(images);
  int64_t feature_head = -1;
  for (size_t i = 0; i < run.diffkd->size(); ++i) {
    if (run.diffkd->head(i)->spec.tap == HeadTap::feature) feature_head = static_cast<int64_t>(i);
  }
  if (feature_head < 0) throw ConfigError("checkpoint has no feature head to visualize");
  auto head = run.diffkd->head(static_cast<size_t>(feature_head));
  auto out = run_head(head, run.diffkd->schedule, run.diffkd->plan, run.diffkd->config,
                      t_out.feature, s_out.feature, run.gen);
  const fs::path dir = out_dir;
  fs::create_directories(dir);
  for (int64_t n = 0; n < images.size(0); ++n) {
    const std::vector<std::pair<std::string, torch::Tensor>> maps = {
        {"student", out.projected[n]}, {"denoised", out.denoised[n]}, {"teacher", out.teacher_latent[n]}};
    for (const auto& [name, feat] : maps) {
      auto am = attention_map(feat, tau);
      const auto stem = dir / ("sample" + std::to_string(n) + "_" + name);
      write_matrix_csv(stem.string() + ".csv", am.values);
      write_png(stem.string() + ".png", render_heatmap(am.values));
    }
  }
  std::cout << "cosine(student, teacher): " << batch_cosine_similarity(out.projected, out.teacher_latent) << "\n";
  std::cout << "cosine(denoised, teacher): " << batch_cosine_similarity(out.denoised, out.teacher_latent) << "\n";
  std::cout << "output: " << dir.string() << "\n";
  return 0;
}

int cmd_plot_gamma(const std::string& metrics, const std::string& prefix) {
  auto report = gamma_histogram(read_metrics(metrics));
  write_gamma_report(report, prefix);
  std::cout << "bucket_lo,count\n";
  for (size_t k = 0; k < report.buckets.size(); ++k) {
    std::cout << static_cast<double>(k) / GammaStats::kBuckets << "," << report.buckets[k] << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DiffKD: knowledge distillation with diffusion-denoised student features"};
  app.require_subcommand(1);

  bool verbose = false;
  std::string config_path, checkpoint, values, seeds, out_dir = "runs/ablation", input,
                                                   viz_out = "runs/visualize", metrics,
                                                   gamma_prefix = "runs/gamma";
  double tau = 0.5;

  auto* train_cmd = app.add_subcommand("train", "train a student (provisions the teacher if needed)");
  train_cmd->add_option("config", config_path, "experiment config (TOML)")->required();
  train_cmd->add_flag("-v,--verbose", verbose, "print per-epoch progress");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate the model stored in a checkpoint");
  eval_cmd->add_option("checkpoint", checkpoint, "checkpoint file")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "sweep one factor with a shared teacher");
  ablate_cmd->require_subcommand(1);
  std::string factor;
  for (const char* name : {"nfe", "ae-dim"}) {
    auto* sub = ablate_cmd->add_subcommand(name, std::string("sweep ") + name);
    sub->add_option("config", config_path, "experiment config (TOML)")->required();
    sub->add_option("--values", values, "comma-separated values")->required();
    sub->add_option("--seeds", seeds, "comma-separated seeds (default: config seed)");
    sub->add_option("--out", out_dir, "output directory");
    sub->callback([&factor, name] { factor = name; });
  }

  auto* viz_cmd = app.add_subcommand("visualize", "attention maps of student, denoised and teacher latents");
  viz_cmd->add_option("checkpoint", checkpoint, "student checkpoint")->required();
  viz_cmd->add_option("--input", input, "sample:<index> or batch:<index> of the evaluation split")->required();
  viz_cmd->add_option("--out", viz_out, "output directory");
  viz_cmd->add_option("--tau", tau, "softmax temperature");

  auto* gamma_cmd = app.add_subcommand("plot-gamma", "gamma histogram and per-epoch mean curve");
  gamma_cmd->add_option("metrics", metrics, "metrics log (JSON lines)")->required();
  gamma_cmd->add_option("--out", gamma_prefix, "output path prefix");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help();
    report("usage", e.what());
    return kUsageError;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(config_path, verbose);
    if (eval_cmd->parsed()) return cmd_eval(checkpoint);
    if (ablate_cmd->parsed()) return cmd_ablate(factor, config_path, values, seeds, out_dir);
    if (viz_cmd->parsed()) return cmd_visualize(checkpoint, input, viz_out, tau);
    if (gamma_cmd->parsed()) return cmd_plot_gamma(metrics, gamma_prefix);
  } catch (const CLI::ValidationError& e) {
    report("usage", e.what());
    return kUsageError;
  } catch (const Error& e) {
    report(e.kind(), e.what());
    return kRuntimeError;
  } catch (const std::exception& e) {
    report("runtime", e.what());
    return kRuntimeError;
  }
  return kUsageError;
}
