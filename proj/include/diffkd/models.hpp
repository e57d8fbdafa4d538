#pragma once

// CIFAR-style ResNets (6n+2 layers, three stages) exposing the pre-pooling
// feature map alongside the logits.

#include <cstdint>
#include <regex>
#include <string>

#include <torch/torch.h>

#include "diffkd/diffkd.hpp"
#include "diffkd/errors.hpp"

namespace diffkd {

namespace nn = torch::nn;

struct ArchSpec {
  std::string id;
  int64_t depth = 20;
  int64_t base_width = 16;

  int64_t blocks_per_stage() const { return (depth - 2) / 6; }
  int64_t feature_channels() const { return base_width * 4; }
};

/// Parses identifiers like "resnet20" or "resnet56w32" (w = base width, default 16).
inline ArchSpec parse_arch(const std::string& id) {
  static const std::regex pattern(R"(resnet(\d+)(?:w(\d+))?)");
  std::smatch m;
  if (!std::regex_match(id, m, pattern)) {
    throw ConfigError("unknown architecture '" + id + "' (expected resnet<6n+2>[w<width>])");
  }
  ArchSpec a;
  a.id = id;
  a.depth = std::stoll(m[1].str());
  if (m[2].matched) a.base_width = std::stoll(m[2].str());
  if (a.depth < 8 || (a.depth - 2) % 6 != 0) {
    throw ConfigError("resnet depth must be 6n+2 with n >= 1, got " + std::to_string(a.depth));
  }
  if (a.base_width <= 0) throw ConfigError("resnet width must be > 0");
  return a;
}

struct BasicBlockImpl : nn::Module {
  nn::Conv2d conv1{nullptr}, conv2{nullptr}, shortcut{nullptr};
  nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, shortcut_bn{nullptr};

  BasicBlockImpl(int64_t in, int64_t out, int64_t stride) {
    conv1 = register_module(
        "conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
    bn1 = register_module("bn1", nn::BatchNorm2d(out));
    conv2 = register_module("conv2",
                            nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1).bias(false)));
    bn2 = register_module("bn2", nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
      shortcut = register_module(
          "shortcut", nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
      shortcut_bn = register_module("shortcut_bn", nn::BatchNorm2d(out));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto h = torch::relu(bn1(conv1(x)));
    h = bn2(conv2(h));
    auto skip = shortcut ? shortcut_bn(shortcut(x)) : x;
    return torch::relu(h + skip);
  }
};
TORCH_MODULE(BasicBlock);

struct ResNetImpl : nn::Module {
  ArchSpec arch;
  nn::Conv2d stem{nullptr};
  nn::BatchNorm2d stem_bn{nullptr};
  nn::Sequential stages;
  nn::Linear fc{nullptr};

  ResNetImpl(const ArchSpec& a, int64_t num_classes, int64_t in_channels = 3) : arch(a) {
    const int64_t w = arch.base_width;
    stem = register_module("stem",
                           nn::Conv2d(nn::Conv2dOptions(in_channels, w, 3).padding(1).bias(false)));
    stem_bn = register_module("stem_bn", nn::BatchNorm2d(w));
    int64_t in = w;
    for (int64_t stage = 0; stage < 3; ++stage) {
      const int64_t out = w << stage;
      for (int64_t b = 0; b < arch.blocks_per_stage(); ++b) {
        stages->push_back(BasicBlock(in, out, (stage > 0 && b == 0) ? 2 : 1));
        in = out;
      }
    }
    register_module("stages", stages);
    fc = register_module("fc", nn::Linear(in, num_classes));
    for (auto& m : modules(false)) {
      if (auto* conv = m->as<nn::Conv2d>()) {
        nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanOut, torch::kReLU);
      }
    }
  }

  ModelOutputs forward(const torch::Tensor& x) {
    ModelOutputs out;
    out.feature = stages->forward(torch::relu(stem_bn(stem(x))));
    out.logits = fc(out.feature.mean({2, 3}));
    return out;
  }
};
TORCH_MODULE(ResNet);

inline std::vector<torch::Tensor> all_parameters(nn::Module& m) { return m.parameters(true); }

}  // namespace diffkd
