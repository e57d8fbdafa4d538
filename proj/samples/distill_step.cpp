// One DiffKD optimization step on user-defined teacher and student networks with a
// feature head (autoencoder-compressed) and a logits head.

#include <iostream>

#include "diffkd/all.hpp"

namespace nn = torch::nn;

struct TinyNetImpl : nn::Module {
  nn::Conv2d conv{nullptr};
  nn::Linear fc{nullptr};
  TinyNetImpl(int64_t width, int64_t classes) {
    conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(3, width, 3).padding(1)));
    fc = register_module("fc", nn::Linear(width, classes));
  }
  diffkd::ModelOutputs forward(const torch::Tensor& x) {
    diffkd::ModelOutputs out;
    out.feature = torch::relu(conv(x));
    out.logits = fc(out.feature.mean({2, 3}));
    return out;
  }
};
TORCH_MODULE(TinyNet);

int main() {
  using namespace diffkd;
  torch::manual_seed(0);
  TinyNet teacher(32, 10), student(8, 10);
  teacher->eval();

  HeadSpec feature;
  feature.tap = HeadTap::feature;
  feature.student_channels = 8;
  feature.teacher_channels = 32;
  feature.use_autoencoder = true;
  feature.latent_channels = 16;
  HeadSpec logits;
  logits.tap = HeadTap::logits;
  logits.student_channels = 10;
  logits.teacher_channels = 10;
  logits.distance = DistanceKind::kl;

  DiffKDConfig cfg;  // lambda_diff = lambda_ae = lambda_kd = 1, nfe = 5
  DiffKDModule heads(cfg, std::vector<HeadSpec>{feature, logits});
  auto params = student->parameters();
  for (auto& p : heads->parameters()) params.push_back(p);
  torch::optim::SGD opt(params, torch::optim::SGDOptions(0.05).momentum(0.9));
  auto gen = at::detail::createCPUGenerator(7);

  auto images = torch::randn({16, 3, 8, 8});
  auto labels = torch::randint(0, 10, {16}, torch::kLong);
  for (int step = 0; step < 3; ++step) {
    ModelOutputs t_out;
    {
      torch::NoGradGuard no_grad;
      t_out = teacher->forward(images);
    }
    opt.zero_grad();
    auto result = compute_losses(labels, t_out, student->forward(images), heads, gen);
    result.total.backward();
    opt.step();
    const auto& b = result.bundle;
    std::cout << "step " << step << ": task " << b.task << " diff " << b.diff << " ae " << b.ae
              << " diffkd " << b.diffkd << " total " << b.total << " mean gamma "
              << result.gamma.mean().item<double>() << "\n";
  }
  return 0;
}
