#pragma once

// Desk-scale training harness: teacher provisioning, DiffKD student training,
// evaluation and resumable checkpoints.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "diffkd/checkpoint.hpp"
#include "diffkd/config.hpp"
#include "diffkd/data.hpp"
#include "diffkd/diffkd.hpp"
#include "diffkd/errors.hpp"
#include "diffkd/metrics.hpp"
#include "diffkd/models.hpp"

namespace diffkd {

inline EvalResult evaluate_model(ResNet& model, const DataStream& stream) {
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  int64_t correct1 = 0, correct5 = 0, total = 0;
  for (const auto& b : stream.sequential()) {
    auto logits = model->forward(b.images).logits;
    const int64_t k = std::min<int64_t>(5, logits.size(1));
    auto topk = std::get<1>(logits.topk(k, 1));
    auto hits = topk.eq(b.labels.unsqueeze(1));
    correct1 += hits.narrow(1, 0, 1).sum().item<int64_t>();
    correct5 += hits.any(1).sum().item<int64_t>();
    total += b.labels.size(0);
  }
  model->train(was_training);
  if (total == 0) throw EmptyInputError("evaluation stream is empty");
  return {100.0 * static_cast<double>(correct1) / static_cast<double>(total),
          100.0 * static_cast<double>(correct5) / static_cast<double>(total)};
}

inline double learning_rate_at(const OptimizerConfig& opt, const ScheduleConfig& sched,
                               int64_t epoch, int64_t total_epochs) {
  if (sched.kind == "cosine") {
    return 0.5 * opt.lr *
           (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                           static_cast<double>(total_epochs)));
  }
  double lr = opt.lr;
  for (auto m : sched.milestones) {
    // Milestones are expressed against schedule.epochs; rescale for other horizons.
    const double scaled = static_cast<double>(m) * static_cast<double>(total_epochs) /
                          static_cast<double>(sched.epochs);
    if (static_cast<double>(epoch) >= scaled) lr *= sched.gamma;
  }
  return lr;
}

inline std::unique_ptr<torch::optim::Optimizer> make_optimizer(
    const OptimizerConfig& cfg, const std::vector<torch::Tensor>& params) {
  if (cfg.kind == "adamw") {
    return std::make_unique<torch::optim::AdamW>(
        params, torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));
  }
  return std::make_unique<torch::optim::SGD>(params, torch::optim::SGDOptions(cfg.lr)
                                                         .momentum(cfg.momentum)
                                                         .weight_decay(cfg.weight_decay)
                                                         .nesterov(cfg.nesterov));
}

inline std::vector<HeadSpec> head_specs(const ExperimentConfig& cfg, const ArchSpec& teacher,
                                        const ArchSpec& student, int64_t num_classes) {
  std::vector<HeadSpec> specs;
  for (const auto& h : cfg.heads) {
    HeadSpec s;
    s.tap = h.tap;
    s.use_autoencoder = h.use_autoencoder;
    s.latent_channels = h.latent_channels;
    s.distance = h.distance;
    if (h.tap == HeadTap::feature) {
      s.student_channels = student.feature_channels();
      s.teacher_channels = teacher.feature_channels();
    } else {
      s.student_channels = num_classes;
      s.teacher_channels = num_classes;
    }
    specs.push_back(s);
  }
  return specs;
}

/// Everything a student run owns. The teacher is frozen and kept in eval mode.
struct StudentRun {
  ExperimentConfig config;
  ArchSpec teacher_arch;
  ArchSpec student_arch;
  int64_t num_classes = 0;
  int64_t in_channels = 3;
  ResNet teacher{nullptr};
  ResNet student{nullptr};
  DiffKDModule diffkd{nullptr};
  std::unique_ptr<torch::optim::Optimizer> optimizer;
  torch::Generator gen;
  int64_t epoch = -1;  // last completed epoch
  int64_t step = 0;

  std::vector<torch::Tensor> trainable() const {
    auto p = student->parameters(true);
    for (auto& q : diffkd->parameters(true)) p.push_back(q);
    return p;
  }
};

inline ResNet load_model(const std::filesystem::path& path, const std::string& expected_arch,
                         CheckpointHeader* header_out = nullptr) {
  auto ar = open_checkpoint(path);
  auto header = read_header(ar);
  if (!expected_arch.empty() && header.arch != expected_arch) {
    throw CheckpointError("checkpoint '" + path.string() + "' holds arch '" + header.arch +
                          "' but '" + expected_arch + "' was requested");
  }
  ResNet model(parse_arch(header.arch), header.num_classes, header.in_channels);
  torch::serialize::InputArchive sub;
  if (!ar.try_read("model", sub)) throw CheckpointError("checkpoint lacks model weights");
  model->load(sub);
  if (header_out) *header_out = header;
  return model;
}

inline void freeze(ResNet& model) {
  model->eval();
  for (auto& p : model->parameters(true)) p.set_requires_grad(false);
}

struct TrainOptions {
  std::optional<std::filesystem::path> resume_from;
  // Stop after this many completed epochs (simulates an interrupted run).
  std::optional<int64_t> stop_after_epochs;
  bool verbose = false;
};

struct TrainResult {
  MetricRecord final_record;
  EvalResult eval;
  std::filesystem::path checkpoint;
  uint64_t teacher_hash_before = 0;
  uint64_t teacher_hash_after = 0;
};

namespace detail {

inline void set_learning_rate(torch::optim::Optimizer& opt, double lr) {
  for (auto& group : opt.param_groups()) group.options().set_lr(lr);
}

inline bool finite(const LossBundle& b) {
  return std::isfinite(b.task) && std::isfinite(b.diff) && std::isfinite(b.ae) &&
         std::isfinite(b.diffkd) && std::isfinite(b.total);
}

}  // namespace detail

/// Trains a teacher from scratch on the experiment data and saves it frozen.
inline EvalResult train_teacher(const ExperimentConfig& cfg, const Dataset& data, bool verbose = false) {
  const auto arch = parse_arch(cfg.teacher.arch);
  const int64_t channels = data.train.images.size(1);
  torch::manual_seed(static_cast<uint64_t>(cfg.seed) + 104729);
  ResNet model(arch, data.train.num_classes, channels);
  auto opt = make_optimizer(cfg.optimizer, model->parameters(true));
  DataStream stream(data.train, cfg.schedule.batch_size, cfg.data.augment, cfg.data.crop_padding,
                    static_cast<uint64_t>(cfg.seed) + 17);
  DataStream eval_stream(data.eval, 256, false, 0, 0);
  const int64_t epochs = cfg.teacher.epochs;
  for (int64_t e = 0; e < epochs; ++e) {
    detail::set_learning_rate(*opt, learning_rate_at(cfg.optimizer, cfg.schedule, e, epochs));
    model->train();
    for (auto& b : stream.epoch(e)) {
      opt->zero_grad();
      auto loss = torch::nn::functional::cross_entropy(model->forward(b.images).logits, b.labels);
      if (!std::isfinite(loss.item<double>())) {
        throw DivergenceError("teacher loss became non-finite at epoch " + std::to_string(e));
      }
      loss.backward();
      opt->step();
    }
    if (verbose) {
      auto ev = evaluate_model(model, eval_stream);
      std::cerr << "teacher epoch " << e << " top1 " << ev.top1 << "\n";
    }
  }
  auto result = evaluate_model(model, eval_stream);
  torch::serialize::OutputArchive ar;
  CheckpointHeader h;
  h.role = "teacher";
  h.arch = arch.id;
  h.num_classes = data.train.num_classes;
  h.in_channels = channels;
  h.config = to_toml(cfg);
  h.epoch = epochs - 1;
  h.recorded = result;
  write_header(ar, h);
  torch::serialize::OutputArchive sub;
  model->save(sub);
  ar.write("model", sub);
  save_archive(ar, cfg.teacher.checkpoint);
  return result;
}

/// Loads the configured teacher, provisioning it first when allowed.
inline ResNet ensure_teacher(const ExperimentConfig& cfg, const Dataset& data, bool verbose = false) {
  if (!std::filesystem::exists(cfg.teacher.checkpoint)) {
    if (!cfg.teacher.provision) {
      throw CheckpointError("teacher checkpoint '" + cfg.teacher.checkpoint +
                            "' does not exist and provisioning is disabled");
    }
    train_teacher(cfg, data, verbose);
  }
  auto teacher = load_model(cfg.teacher.checkpoint, cfg.teacher.arch);
  freeze(teacher);
  return teacher;
}

inline StudentRun build_run(const ExperimentConfig& cfg, const Dataset& data, ResNet teacher) {
  StudentRun run;
  run.config = cfg;
  run.num_classes = data.train.num_classes;
  run.in_channels = data.train.images.size(1);
  run.teacher_arch = parse_arch(cfg.teacher.arch);
  run.student_arch = parse_arch(cfg.student_arch);
  run.teacher = std::move(teacher);
  // The student is initialized before any head so that head construction never
  // changes the student's initial weights.
  torch::manual_seed(static_cast<uint64_t>(cfg.seed));
  run.student = ResNet(run.student_arch, run.num_classes, run.in_channels);
  run.diffkd = DiffKDModule(cfg.diffkd,
                            head_specs(cfg, run.teacher_arch, run.student_arch, run.num_classes));
  run.optimizer = make_optimizer(cfg.optimizer, run.trainable());
  run.gen = at::detail::createCPUGenerator(static_cast<uint64_t>(cfg.seed) * 2654435761ULL + 1);
  return run;
}

inline void save_student(StudentRun& run, const std::filesystem::path& path, const EvalResult& ev) {
  torch::serialize::OutputArchive ar;
  CheckpointHeader h;
  h.role = "student";
  h.arch = run.student_arch.id;
  h.num_classes = run.num_classes;
  h.in_channels = run.in_channels;
  h.config = to_toml(run.config);
  h.epoch = run.epoch;
  h.step = run.step;
  h.recorded = ev;
  write_header(ar, h);
  torch::serialize::OutputArchive model, heads, optim;
  run.student->save(model);
  run.diffkd->save(heads);
  run.optimizer->save(optim);
  ar.write("model", model);
  ar.write("diffkd", heads);
  ar.write("optimizer", optim);
  ar.write("rng_state", run.gen.get_state());
  save_archive(ar, path);
}

/// Restores student, heads, optimizer and generator state into an already built run.
inline void restore_student(StudentRun& run, const std::filesystem::path& path) {
  auto ar = open_checkpoint(path);
  auto h = read_header(ar);
  if (h.role != "student") throw CheckpointError("'" + path.string() + "' is not a student checkpoint");
  if (h.arch != run.student_arch.id) {
    throw CheckpointError("checkpoint arch '" + h.arch + "' does not match '" + run.student_arch.id + "'");
  }
  torch::serialize::InputArchive model, heads, optim;
  if (!ar.try_read("model", model) || !ar.try_read("diffkd", heads)) {
    throw CheckpointError("checkpoint lacks student or head weights");
  }
  run.student->load(model);
  run.diffkd->load(heads);
  if (ar.try_read("optimizer", optim)) run.optimizer->load(optim);
  torch::Tensor state;
  if (ar.try_read("rng_state", state)) run.gen.set_state(state);
  run.epoch = h.epoch;
  run.step = h.step;
}

/// Runs DiffKD training as configured. Metrics go to config.logging.metrics, the
/// checkpoint (rewritten after every epoch) to config.logging.checkpoint.
inline TrainResult train(const ExperimentConfig& cfg, const TrainOptions& options = {}) {
  cfg.validate();
  const auto data = load_dataset(cfg.data);
  auto teacher = ensure_teacher(cfg, data, options.verbose);
  auto run = build_run(cfg, data, teacher);
  if (options.resume_from) restore_student(run, *options.resume_from);

  TrainResult result;
  result.checkpoint = cfg.logging.checkpoint;
  result.teacher_hash_before = weights_hash(*run.teacher);

  DataStream stream(data.train, cfg.schedule.batch_size, cfg.data.augment, cfg.data.crop_padding,
                    static_cast<uint64_t>(cfg.seed) + 17);
  DataStream eval_stream(data.eval, 256, false, 0, 0);
  MetricsWriter log(cfg.logging.metrics, options.resume_from.has_value());
  const int64_t interval = std::max<int64_t>(1, cfg.logging.interval);
  const int64_t epochs = cfg.schedule.epochs;
  int64_t completed_this_call = 0;

  for (int64_t e = run.epoch + 1; e < epochs; ++e) {
    if (options.stop_after_epochs && completed_this_call >= *options.stop_after_epochs) break;
    detail::set_learning_rate(*run.optimizer, learning_rate_at(cfg.optimizer, cfg.schedule, e, epochs));
    run.student->train();
    run.diffkd->train();
    for (auto& b : stream.epoch(e)) {
      ModelOutputs t_out;
      {
        torch::NoGradGuard no_grad;
        t_out = run.teacher->forward(b.images);
      }
      auto s_out = run.student->forward(b.images);
      run.optimizer->zero_grad();
      auto losses = compute_losses(b.labels, t_out, s_out, run.diffkd, run.gen);
      ++run.step;
      if (!detail::finite(losses.bundle)) {
        MetricRecord diag{run.step, e, losses.bundle, std::nullopt, std::nullopt};
        log.write(diag);
        throw DivergenceError("non-finite loss at step " + std::to_string(run.step) + ": " +
                              to_json(diag).dump());
      }
      losses.total.backward();
      run.optimizer->step();
      if (run.step % interval == 0) {
        MetricRecord rec{run.step, e, losses.bundle, std::nullopt, std::nullopt};
        if (losses.gamma.defined()) rec.gamma_stats = GammaStats::from(losses.gamma);
        log.write(rec);
        result.final_record = rec;
      }
    }
    run.epoch = e;
    ++completed_this_call;
    auto ev = evaluate_model(run.student, eval_stream);
    MetricRecord rec{run.step, e, std::nullopt, std::nullopt, ev};
    log.write(rec);
    result.final_record.step = run.step;
    result.final_record.epoch = e;
    result.final_record.eval = ev;
    result.eval = ev;
    save_student(run, cfg.logging.checkpoint, ev);
    if (options.verbose) {
      std::cerr << "epoch " << e << " top1 " << ev.top1 << " top5 " << ev.top5 << "\n";
    }
  }
  result.teacher_hash_after = weights_hash(*run.teacher);
  if (result.teacher_hash_after != result.teacher_hash_before) {
    throw CheckpointError("teacher weights changed during training");
  }
  return result;
}

/// Rebuilds a student run (with its frozen teacher) from a checkpoint.
struct LoadedRun {
  Dataset data;
  StudentRun run;
};

inline LoadedRun load_run(const std::filesystem::path& checkpoint) {
  auto header = peek_checkpoint(checkpoint);
  if (header.role != "student") {
    throw CheckpointError("'" + checkpoint.string() + "' is not a student checkpoint");
  }
  auto cfg = parse_config(header.config);
  LoadedRun out;
  out.data = load_dataset(cfg.data);
  auto teacher = load_model(cfg.teacher.checkpoint, cfg.teacher.arch);
  freeze(teacher);
  out.run = build_run(cfg, out.data, teacher);
  restore_student(out.run, checkpoint);
  out.run.student->eval();
  out.run.diffkd->eval();
  return out;
}

/// Top-1/top-5 of the model stored in a checkpoint (teacher or student) on the
/// evaluation split described by its config snapshot.
inline EvalResult evaluate(const std::filesystem::path& checkpoint) {
  CheckpointHeader header;
  auto model = load_model(checkpoint, "", &header);
  auto cfg = parse_config(header.config);
  auto data = load_dataset(cfg.data);
  if (data.eval.num_classes != header.num_classes) {
    throw CheckpointError("checkpoint has " + std::to_string(header.num_classes) +
                          " classes but the evaluation split has " +
                          std::to_string(data.eval.num_classes));
  }
  DataStream eval_stream(data.eval, 256, false, 0, 0);
  return evaluate_model(model, eval_stream);
}

}  // namespace diffkd
