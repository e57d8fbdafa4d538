#pragma once

// A tiny float64 teacher/student pair with one feature head and one logits head,
// small enough for central-difference gradient checks.

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "diffkd/diffkd.hpp"

namespace diffkd::testing {

struct TinyProblem {
  static constexpr int64_t kBatch = 2, kInput = 3, kStudentC = 4, kTeacherC = 6, kLatent = 4,
                           kClasses = 3, kSize = 2;

  torch::Tensor images, labels;
  torch::nn::Conv2d student_conv{nullptr}, teacher_conv{nullptr};
  torch::nn::Linear student_fc{nullptr}, teacher_fc{nullptr};
  DiffKDModule diffkd{nullptr};

  explicit TinyProblem(DiffKDConfig cfg, uint64_t seed = 0, bool with_autoencoder = true) {
    torch::manual_seed(seed);
    images = torch::randn({kBatch, kInput, kSize, kSize}, torch::kFloat64);
    labels = torch::tensor({0, 2}, torch::kLong);
    student_conv = torch::nn::Conv2d(torch::nn::Conv2dOptions(kInput, kStudentC, 1));
    student_fc = torch::nn::Linear(kStudentC, kClasses);
    teacher_conv = torch::nn::Conv2d(torch::nn::Conv2dOptions(kInput, kTeacherC, 1));
    teacher_fc = torch::nn::Linear(kTeacherC, kClasses);
    for (auto* m : std::vector<torch::nn::Module*>{student_conv.get(), student_fc.get(),
                                                    teacher_conv.get(), teacher_fc.get()}) {
      m->to(torch::kFloat64);
    }
    HeadSpec feature;
    feature.tap = HeadTap::feature;
    feature.student_channels = kStudentC;
    feature.teacher_channels = kTeacherC;
    feature.use_autoencoder = with_autoencoder;
    feature.latent_channels = with_autoencoder ? kLatent : 0;
    feature.distance = DistanceKind::mse;
    feature.timestep_embed_dim = 8;
    HeadSpec logits;
    logits.tap = HeadTap::logits;
    logits.student_channels = kClasses;
    logits.teacher_channels = kClasses;
    logits.distance = DistanceKind::kl;
    logits.timestep_embed_dim = 8;
    logits.denoiser_hidden = 8;
    diffkd = DiffKDModule(cfg, std::vector<HeadSpec>{feature, logits});
    diffkd->to(torch::kFloat64);
    // Give the zero-initialized denoiser heads non-trivial weights.
    torch::NoGradGuard no_grad;
    for (size_t i = 0; i < diffkd->size(); ++i) {
      auto d = diffkd->head(i)->denoiser;
      if (d->spatial) {
        d->spatial->head->weight.normal_(0, 0.3);
        d->spatial->head->bias.normal_(0, 0.3);
      } else {
        d->vector->fc2->weight.normal_(0, 0.3);
        d->vector->fc2->bias.normal_(0, 0.3);
      }
    }
  }

  // The student uses tanh so the objective is smooth for finite differences.
  ModelOutputs student() {
    ModelOutputs o;
    o.feature = torch::tanh(student_conv(images));
    o.logits = student_fc(o.feature.mean({2, 3}));
    return o;
  }

  // Deliberately run with gradients enabled: the heads must detach teacher outputs themselves.
  ModelOutputs teacher() {
    ModelOutputs o;
    o.feature = torch::tanh(teacher_conv(images));
    o.logits = teacher_fc(o.feature.mean({2, 3}));
    return o;
  }

  LossResult losses(uint64_t noise_seed = 42) {
    auto gen = at::detail::createCPUGenerator(noise_seed);
    return compute_losses(labels, teacher(), student(), diffkd, gen);
  }

  std::vector<torch::Tensor> teacher_parameters() {
    auto p = teacher_conv->parameters();
    for (auto& q : teacher_fc->parameters()) p.push_back(q);
    return p;
  }
  std::vector<torch::Tensor> student_parameters() {
    auto p = student_conv->parameters();
    for (auto& q : student_fc->parameters()) p.push_back(q);
    return p;
  }

  void zero_all_grads() {
    for (auto& p : teacher_parameters()) p.mutable_grad() = torch::Tensor();
    for (auto& p : student_parameters()) p.mutable_grad() = torch::Tensor();
    for (auto& p : diffkd->parameters()) p.mutable_grad() = torch::Tensor();
  }
};

inline double grad_sum(const std::vector<torch::Tensor>& params) {
  double s = 0;
  for (const auto& p : params) {
    if (p.grad().defined()) s += p.grad().abs().sum().item<double>();
  }
  return s;
}

/// Central differences of `objective` with respect to every entry of `param`.
template <typename Objective>
torch::Tensor central_difference(torch::Tensor param, Objective&& objective, double h = 1e-5) {
  torch::NoGradGuard no_grad;
  auto grad = torch::zeros_like(param);
  auto flat = param.view({-1});
  auto gflat = grad.view({-1});
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + h;
    const double up = objective();
    flat[i] = orig - h;
    const double down = objective();
    flat[i] = orig;
    gflat[i] = (up - down) / (2 * h);
  }
  return grad;
}

}  // namespace diffkd::testing
