#pragma once

// Noise-prediction networks conditioned on the diffusion timestep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include <torch/torch.h>

#include "diffkd/errors.hpp"
#include "diffkd/tensor_utils.hpp"

namespace diffkd {

namespace nn = torch::nn;

enum class DenoiserVariant { spatial, vector };

struct DenoiserSpec {
  DenoiserVariant variant = DenoiserVariant::spatial;
  int64_t in_channels = 0;
  // 0 selects the default: in_channels / 4 (spatial) or max(in_channels, 256) (vector).
  int64_t hidden_channels = 0;
  int64_t timestep_embed_dim = 64;

  int64_t resolved_hidden() const {
    if (hidden_channels > 0) return hidden_channels;
    if (variant == DenoiserVariant::spatial) return std::max<int64_t>(1, in_channels / 4);
    return std::max<int64_t>(in_channels, 256);
  }
};

/// Sinusoidal embeddings for a vector of timesteps: (N) -> (N, dim), float64.
/// The first half holds sines, the second half cosines.
inline torch::Tensor embed_timesteps(const torch::Tensor& t, int64_t dim) {
  if (dim <= 0 || dim % 2 != 0) {
    throw ParameterError("timestep embedding dim must be positive and even, got " +
                         std::to_string(dim));
  }
  const int64_t half = dim / 2;
  auto idx = torch::arange(half, torch::kFloat64);
  auto freqs = torch::exp(-std::log(10000.0) * idx / static_cast<double>(half));
  auto args = t.to(torch::kFloat64).reshape({-1, 1}) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

inline torch::Tensor embed_timestep(int64_t t, int64_t dim) {
  if (t < 0) throw ParameterError("timestep must be >= 0, got " + std::to_string(t));
  return embed_timesteps(torch::tensor({t}, torch::kLong), dim).squeeze(0);
}

inline int64_t group_count(int64_t channels) {
  for (int64_t g = std::min<int64_t>(8, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

/// ResNet bottleneck (1x1 reduce, 3x3, 1x1 expand) with a residual connection and a
/// timestep-driven per-channel scale and shift after the first normalization.
struct BottleneckBlockImpl : nn::Module {
  nn::Conv2d reduce{nullptr}, conv{nullptr}, expand{nullptr};
  nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  nn::Linear modulation{nullptr};

  BottleneckBlockImpl(int64_t channels, int64_t hidden, int64_t embed_dim) {
    reduce = register_module("reduce", nn::Conv2d(nn::Conv2dOptions(channels, hidden, 1)));
    norm1 = register_module("norm1", nn::GroupNorm(group_count(hidden), hidden));
    conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(hidden, hidden, 3).padding(1)));
    norm2 = register_module("norm2", nn::GroupNorm(group_count(hidden), hidden));
    expand = register_module("expand", nn::Conv2d(nn::Conv2dOptions(hidden, channels, 1)));
    modulation = register_module("modulation", nn::Linear(embed_dim, 2 * hidden));
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb) {
    auto h = norm1(reduce(x));
    auto ss = modulation(emb).unsqueeze(-1).unsqueeze(-1).chunk(2, 1);
    h = torch::silu(h * (1 + ss[0]) + ss[1]);
    h = torch::silu(norm2(conv(h)));
    return x + expand(h);
  }
};
TORCH_MODULE(BottleneckBlock);

/// Two bottleneck blocks followed by a zero-initialized 1x1 output head.
struct SpatialDenoiserImpl : nn::Module {
  nn::Sequential time_mlp{nullptr};
  BottleneckBlock block1{nullptr}, block2{nullptr};
  nn::Conv2d head{nullptr};

  SpatialDenoiserImpl(int64_t channels, int64_t hidden, int64_t embed_dim) {
    time_mlp = register_module(
        "time_mlp", nn::Sequential(nn::Linear(embed_dim, embed_dim), nn::SiLU()));
    block1 = register_module("block1", BottleneckBlock(channels, hidden, embed_dim));
    block2 = register_module("block2", BottleneckBlock(channels, hidden, embed_dim));
    head = register_module("head", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1)));
    torch::NoGradGuard no_grad;
    head->weight.zero_();
    head->bias.zero_();
  }

  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& emb) {
    auto e = time_mlp->forward(emb);
    return head(block2(block1(z, e), e));
  }
};
TORCH_MODULE(SpatialDenoiser);

/// Two linear layers around a SiLU; the hidden layer is modulated by the timestep.
struct VectorDenoiserImpl : nn::Module {
  nn::Linear fc1{nullptr}, fc2{nullptr}, modulation{nullptr};

  VectorDenoiserImpl(int64_t channels, int64_t hidden, int64_t embed_dim) {
    fc1 = register_module("fc1", nn::Linear(channels, hidden));
    modulation = register_module("modulation", nn::Linear(embed_dim, 2 * hidden));
    fc2 = register_module("fc2", nn::Linear(hidden, channels));
    torch::NoGradGuard no_grad;
    fc2->weight.zero_();
    fc2->bias.zero_();
  }

  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& emb) {
    auto ss = modulation(emb).chunk(2, 1);
    auto h = torch::silu(fc1(z) * (1 + ss[0]) + ss[1]);
    return fc2(h);
  }
};
TORCH_MODULE(VectorDenoiser);

/// Noise predictor for either 4-D feature maps or 2-D vectors.
struct DenoiserImpl : nn::Module {
  DenoiserSpec spec;
  SpatialDenoiser spatial{nullptr};
  VectorDenoiser vector{nullptr};

  explicit DenoiserImpl(const DenoiserSpec& s) : spec(s) {
    if (spec.in_channels <= 0) throw ParameterError("denoiser in_channels must be > 0");
    if (spec.timestep_embed_dim <= 0 || spec.timestep_embed_dim % 2 != 0) {
      throw ParameterError("denoiser timestep_embed_dim must be positive and even");
    }
    const int64_t hidden = spec.resolved_hidden();
    if (spec.variant == DenoiserVariant::spatial) {
      spatial = register_module(
          "spatial", SpatialDenoiser(spec.in_channels, hidden, spec.timestep_embed_dim));
    } else {
      vector = register_module(
          "vector", VectorDenoiser(spec.in_channels, hidden, spec.timestep_embed_dim));
    }
  }

  int64_t expected_rank() const { return spec.variant == DenoiserVariant::spatial ? 4 : 2; }

  /// `t` is a scalar timestep or an int64 vector with one entry per sample.
  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t) {
    require_rank(z_t, expected_rank(), "predict_noise");
    require_channels(z_t, spec.in_channels, "predict_noise");
    auto steps = t.dim() == 0 ? t.reshape({1}).expand({z_t.size(0)}) : t;
    if (steps.size(0) != z_t.size(0)) {
      throw ShapeError("predict_noise: timestep count does not match batch size");
    }
    auto emb = embed_timesteps(steps, spec.timestep_embed_dim).to(z_t.dtype());
    return spatial ? spatial->forward(z_t, emb) : vector->forward(z_t, emb);
  }

  torch::Tensor forward(const torch::Tensor& z_t, int64_t t) {
    return forward(z_t, torch::tensor(t, torch::kLong));
  }
};
TORCH_MODULE(Denoiser);

inline torch::Tensor predict_noise(Denoiser& denoiser, const torch::Tensor& z_t, int64_t t) {
  return denoiser->forward(z_t, t);
}

}  // namespace diffkd
