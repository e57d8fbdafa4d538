#pragma once

// Networks around the denoiser: the teacher-side linear autoencoder, the student
// projection into the latent space, and the adaptive noise-matching module.

#include <cstdint>
#include <optional>

#include <torch/torch.h>

#include "diffkd/distance.hpp"
#include "diffkd/errors.hpp"
#include "diffkd/tensor_utils.hpp"

namespace diffkd {

namespace nn = torch::nn;

/// Channel-only affine encoder/decoder pair (two 1x1 convolutions).
struct LinearAutoencoderImpl : nn::Module {
  int64_t in_channels;
  int64_t latent_channels;
  nn::Conv2d encoder{nullptr}, decoder{nullptr};

  LinearAutoencoderImpl(int64_t in, int64_t latent) : in_channels(in), latent_channels(latent) {
    if (in <= 0 || latent <= 0) throw ParameterError("autoencoder channels must be > 0");
    encoder = register_module("encoder", nn::Conv2d(nn::Conv2dOptions(in, latent, 1)));
    decoder = register_module("decoder", nn::Conv2d(nn::Conv2dOptions(latent, in, 1)));
  }

  // Gradient-carrying encoder output; only the reconstruction loss should use it.
  torch::Tensor encode_attached(const torch::Tensor& teacher_feature) {
    require_rank(teacher_feature, 4, "encode");
    require_channels(teacher_feature, in_channels, "encode");
    return encoder(teacher_feature);
  }

  /// Teacher latent for diffusion training and as the distillation target. Detached.
  torch::Tensor encode(const torch::Tensor& teacher_feature) {
    return encode_attached(teacher_feature).detach();
  }

  torch::Tensor decode(const torch::Tensor& latent) {
    require_channels(latent, latent_channels, "decode");
    return decoder(latent);
  }

  torch::Tensor reconstruction_loss(const torch::Tensor& teacher_feature) {
    return mse_distance(decode(encode_attached(teacher_feature)), teacher_feature);
  }

  // Square autoencoders only: encoder and decoder become the identity map.
  void init_identity() {
    if (in_channels != latent_channels) throw ParameterError("identity init needs latent == in");
    torch::NoGradGuard no_grad;
    auto eye = torch::eye(in_channels, encoder->weight.options()).view({in_channels, in_channels, 1, 1});
    encoder->weight.copy_(eye);
    decoder->weight.copy_(eye);
    encoder->bias.zero_();
    decoder->bias.zero_();
  }
};
TORCH_MODULE(LinearAutoencoder);

/// One linear channel map from student features to the teacher latent width.
/// Rank-4 inputs use a 1x1 convolution, rank-2 inputs a linear layer.
struct StudentProjectionImpl : nn::Module {
  int64_t in_channels;
  int64_t out_channels;
  bool spatial;
  nn::Conv2d conv{nullptr};
  nn::Linear linear{nullptr};

  StudentProjectionImpl(int64_t in, int64_t out, bool spatial_input)
      : in_channels(in), out_channels(out), spatial(spatial_input) {
    if (in <= 0 || out <= 0) throw ParameterError("projection channels must be > 0");
    if (spatial) {
      conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
    } else {
      linear = register_module("linear", nn::Linear(in, out));
    }
  }

  torch::Tensor forward(const torch::Tensor& student_feature) {
    require_rank(student_feature, spatial ? 4 : 2, "project_student");
    require_channels(student_feature, in_channels, "project_student");
    return spatial ? conv(student_feature) : linear(student_feature);
  }

  nn::Module& layer() { return spatial ? static_cast<nn::Module&>(*conv) : *linear; }
  torch::Tensor& weight() { return spatial ? conv->weight : linear->weight; }
  torch::Tensor& bias() { return spatial ? conv->bias : linear->bias; }
};
TORCH_MODULE(StudentProjection);

struct NoiseMatch {
  torch::Tensor noisy;  // gamma * Z + (1 - gamma) * eps
  torch::Tensor gamma;  // (N), each in (0, 1)
};

/// Predicts one mixing weight per sample: conv (or linear) trunk, global average
/// pooling, linear head and a sigmoid squeezed into the open unit interval.
struct NoiseAdapterImpl : nn::Module {
  static constexpr double kGammaMargin = 1e-6;

  int64_t channels;
  bool spatial;
  nn::Conv2d trunk_conv{nullptr};
  nn::Linear trunk_linear{nullptr};
  nn::Linear head{nullptr};

  NoiseAdapterImpl(int64_t c, bool spatial_input) : channels(c), spatial(spatial_input) {
    if (c <= 0) throw ParameterError("noise adapter channels must be > 0");
    if (spatial) {
      trunk_conv = register_module("trunk", nn::Conv2d(nn::Conv2dOptions(c, c, 3).padding(1)));
    } else {
      trunk_linear = register_module("trunk", nn::Linear(c, c));
    }
    head = register_module("head", nn::Linear(c, 1));
  }

  torch::Tensor gamma(const torch::Tensor& latent) {
    require_rank(latent, spatial ? 4 : 2, "match_noise");
    require_channels(latent, channels, "match_noise");
    torch::Tensor pooled;
    if (spatial) {
      pooled = torch::silu(trunk_conv(latent)).mean({2, 3});
    } else {
      pooled = torch::silu(trunk_linear(latent));
    }
    auto s = torch::sigmoid(head(pooled)).squeeze(1);
    return kGammaMargin + (1.0 - 2.0 * kGammaMargin) * s;
  }

  /// `forced_gamma` bypasses the learned weight (ablations and identity checks).
  NoiseMatch forward(const torch::Tensor& student_latent, const torch::Tensor& epsilon_T,
                     std::optional<double> forced_gamma = std::nullopt) {
    require_same_shape(student_latent, epsilon_T, "match_noise");
    torch::Tensor g = forced_gamma
                          ? torch::full({student_latent.size(0)}, *forced_gamma,
                                        student_latent.options())
                          : gamma(student_latent);
    std::vector<int64_t> view(static_cast<size_t>(student_latent.dim()), 1);
    view[0] = student_latent.size(0);
    auto gb = g.view(view);
    return {gb * student_latent + (1 - gb) * epsilon_T, g};
  }
};
TORCH_MODULE(NoiseAdapter);

}  // namespace diffkd
