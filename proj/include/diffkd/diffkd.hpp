#pragma once

// DiffKD heads: diffusion training on teacher latents, denoising of the
// noise-matched student latent and the combined training objective.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "diffkd/denoiser.hpp"
#include "diffkd/distance.hpp"
#include "diffkd/errors.hpp"
#include "diffkd/feature_adapters.hpp"
#include "diffkd/noise_schedule.hpp"
#include "diffkd/tensor_utils.hpp"

namespace diffkd {

namespace nn = torch::nn;

struct DiffKDConfig {
  double lambda_diff = 1.0;
  double lambda_ae = 1.0;
  double lambda_kd = 1.0;
  int64_t total_timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int64_t initial_timestep = 500;
  int64_t nfe = 5;
  double temperature = 1.0;
  // false gives the plain feature-KD baseline: no diffusion, distance on the raw projection.
  bool denoise = true;
  // false starts the chain from the projected latent itself (gamma fixed to 1).
  bool adaptive_noise = true;
  // Let the KD loss update denoiser parameters through the reverse chain.
  bool kd_updates_denoiser = false;

  void validate() const {
    if (lambda_diff < 0 || lambda_ae < 0 || lambda_kd < 0) {
      throw ConfigError("loss weights must be >= 0");
    }
    if (!(temperature > 0)) throw ConfigError("temperature must be > 0");
  }
};

/// Per-step loss components and their weighted total.
struct LossBundle {
  double task = 0.0;
  double diff = 0.0;
  double ae = 0.0;
  double diffkd = 0.0;
  double total = 0.0;

  double weighted_sum(const DiffKDConfig& cfg) const {
    return task + cfg.lambda_diff * diff + cfg.lambda_ae * ae + cfg.lambda_kd * diffkd;
  }
};

enum class HeadTap { feature, logits };

inline HeadTap parse_tap(const std::string& name) {
  if (name == "feature") return HeadTap::feature;
  if (name == "logits") return HeadTap::logits;
  throw ConfigError("unknown feature tap '" + name + "' (expected feature or logits)");
}

inline std::string to_string(HeadTap tap) { return tap == HeadTap::feature ? "feature" : "logits"; }

struct HeadSpec {
  HeadTap tap = HeadTap::feature;
  int64_t student_channels = 0;
  int64_t teacher_channels = 0;
  bool use_autoencoder = false;
  int64_t latent_channels = 0;  // autoencoder width; ignored without one
  DistanceKind distance = DistanceKind::mse;
  int64_t timestep_embed_dim = 64;
  int64_t denoiser_hidden = 0;  // 0 picks the variant default

  bool spatial() const { return tap == HeadTap::feature; }
  int64_t latent_width() const { return use_autoencoder ? latent_channels : teacher_channels; }
};

/// RAII: disables requires_grad on a parameter set and restores it on exit.
class FrozenParameters {
 public:
  explicit FrozenParameters(std::vector<torch::Tensor> params) : params_(std::move(params)) {
    for (auto& p : params_) {
      flags_.push_back(p.requires_grad());
      p.set_requires_grad(false);
    }
  }
  ~FrozenParameters() {
    for (size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(flags_[i]);
  }
  FrozenParameters(const FrozenParameters&) = delete;
  FrozenParameters& operator=(const FrozenParameters&) = delete;

 private:
  std::vector<torch::Tensor> params_;
  std::vector<bool> flags_;
};

template <typename Predictor>
concept BatchNoisePredictor = requires(Predictor p, const torch::Tensor& z, const torch::Tensor& t) {
  { p(z, t) } -> std::convertible_to<torch::Tensor>;
};

/// Noise-prediction loss on clean latents: uniform t in [0, T), eps ~ N(0, I).
template <BatchNoisePredictor Predictor>
torch::Tensor diffusion_loss(const NoiseSchedule& schedule, Predictor&& predict,
                             const torch::Tensor& teacher_latent, torch::Generator& gen) {
  if (teacher_latent.requires_grad()) {
    throw ParameterError("diffusion_loss: teacher latent must be detached");
  }
  auto t = torch::randint(0, schedule.total_timesteps, {teacher_latent.size(0)}, gen,
                          torch::TensorOptions().dtype(torch::kLong));
  auto eps = torch::randn(teacher_latent.sizes(), gen, teacher_latent.options());
  auto z_t = add_noise_batched(schedule, teacher_latent, t, eps);
  torch::Tensor predicted = predict(z_t, t);
  return mse_distance(predicted, eps);
}

inline torch::Tensor diffusion_loss(const NoiseSchedule& schedule, Denoiser& denoiser,
                                    const torch::Tensor& teacher_latent, torch::Generator& gen) {
  return diffusion_loss(
      schedule, [&](const torch::Tensor& z, const torch::Tensor& t) { return denoiser->forward(z, t); },
      teacher_latent, gen);
}

struct DenoiseOptions {
  bool adaptive_noise = true;
  bool kd_updates_denoiser = false;
  std::optional<double> forced_gamma;
};

struct DenoiseResult {
  torch::Tensor denoised;
  torch::Tensor projected;
  torch::Tensor gamma;
  int64_t evaluations = 0;
};

/// Reverse chain over an already projected student latent. The predictor is any
/// callable (z, t) -> eps; every call is counted.
template <NoisePredictor Predictor>
DenoiseResult denoise_latent(const NoiseSchedule& schedule, const SamplingPlan& plan,
                             Predictor&& predict, NoiseAdapter& adapter,
                             const torch::Tensor& projected, torch::Generator& gen,
                             const DenoiseOptions& options = {}) {
  DenoiseResult result;
  result.projected = projected;
  auto eps_T = torch::randn(projected.sizes(), gen, projected.options());
  std::optional<double> gamma = options.forced_gamma;
  if (!gamma && !options.adaptive_noise) gamma = 1.0;
  auto matched = adapter->forward(projected, eps_T, gamma);
  result.gamma = matched.gamma;
  result.denoised = run_reverse_chain(schedule, plan, matched.noisy,
                                      [&](const torch::Tensor& z, int64_t t) {
                                        ++result.evaluations;
                                        return predict(z, t);
                                      });
  return result;
}

/// Projects the student feature, matches its noise level and denoises it with the
/// trained denoiser. Denoiser parameters act as constants here unless
/// options.kd_updates_denoiser is set.
inline DenoiseResult denoise_student(const NoiseSchedule& schedule, const SamplingPlan& plan,
                                     Denoiser& denoiser, StudentProjection& projection,
                                     NoiseAdapter& adapter, const torch::Tensor& student_feature,
                                     torch::Generator& gen, const DenoiseOptions& options = {}) {
  auto projected = projection->forward(student_feature);
  if (projected.size(1) != denoiser->spec.in_channels) {
    throw ShapeError("denoise_student: projection output has " + std::to_string(projected.size(1)) +
                     " channels but the denoiser expects " +
                     std::to_string(denoiser->spec.in_channels));
  }
  std::optional<FrozenParameters> frozen;
  if (!options.kd_updates_denoiser) frozen.emplace(denoiser->parameters());
  return denoise_latent(
      schedule, plan, [&](const torch::Tensor& z, int64_t t) { return denoiser->forward(z, t); },
      adapter, projected, gen, options);
}

inline torch::Tensor diffkd_loss(const torch::Tensor& denoised_student,
                                 const torch::Tensor& teacher_latent, DistanceKind kind,
                                 double temperature) {
  require_same_shape(denoised_student, teacher_latent, "diffkd_loss");
  return distance(kind, denoised_student, teacher_latent.detach(), temperature);
}

/// Mean over samples of the cosine similarity between flattened tensors.
inline double batch_cosine_similarity(const torch::Tensor& a, const torch::Tensor& b) {
  require_same_shape(a, b, "batch_cosine_similarity");
  auto fa = a.reshape({a.size(0), -1}).to(torch::kFloat64);
  auto fb = b.reshape({b.size(0), -1}).to(torch::kFloat64);
  return torch::cosine_similarity(fa, fb, 1, 1e-12).mean().item<double>();
}

/// One distillation head: projection, optional autoencoder, denoiser and noise adapter.
struct DiffKDHeadImpl : nn::Module {
  HeadSpec spec;
  LinearAutoencoder autoencoder{nullptr};
  StudentProjection projection{nullptr};
  Denoiser denoiser{nullptr};
  NoiseAdapter adapter{nullptr};

  explicit DiffKDHeadImpl(const HeadSpec& s) : spec(s) {
    if (spec.student_channels <= 0 || spec.teacher_channels <= 0) {
      throw ConfigError("head channel counts must be > 0");
    }
    if (spec.use_autoencoder) {
      if (!spec.spatial()) throw ConfigError("the autoencoder applies to feature heads only");
      if (spec.latent_channels <= 0) throw ConfigError("latent_channels must be > 0 with an autoencoder");
      autoencoder = register_module("autoencoder",
                                    LinearAutoencoder(spec.teacher_channels, spec.latent_channels));
    }
    const int64_t latent = spec.latent_width();
    projection = register_module("projection",
                                 StudentProjection(spec.student_channels, latent, spec.spatial()));
    DenoiserSpec ds;
    ds.variant = spec.spatial() ? DenoiserVariant::spatial : DenoiserVariant::vector;
    ds.in_channels = latent;
    ds.hidden_channels = spec.denoiser_hidden;
    ds.timestep_embed_dim = spec.timestep_embed_dim;
    denoiser = register_module("denoiser", Denoiser(ds));
    adapter = register_module("adapter", NoiseAdapter(latent, spec.spatial()));
  }

  torch::Tensor teacher_latent(const torch::Tensor& teacher_output) {
    return autoencoder ? autoencoder->encode(teacher_output) : teacher_output.detach();
  }
};
TORCH_MODULE(DiffKDHead);

struct HeadOutput {
  torch::Tensor diff;
  torch::Tensor ae;
  torch::Tensor diffkd;
  torch::Tensor gamma;  // undefined when the head does not denoise
  torch::Tensor denoised;
  torch::Tensor projected;
  torch::Tensor teacher_latent;
  int64_t evaluations = 0;
};

inline HeadOutput run_head(DiffKDHead& head, const NoiseSchedule& schedule,
                           const SamplingPlan& plan, const DiffKDConfig& cfg,
                           const torch::Tensor& teacher_output, const torch::Tensor& student_output,
                           torch::Generator& gen) {
  HeadOutput out;
  auto zero = torch::zeros({}, student_output.options());
  out.teacher_latent = head->teacher_latent(teacher_output);
  out.ae = head->autoencoder ? head->autoencoder->reconstruction_loss(teacher_output.detach()) : zero;
  if (cfg.denoise) {
    out.diff = diffusion_loss(schedule, head->denoiser, out.teacher_latent, gen);
    DenoiseOptions options;
    options.adaptive_noise = cfg.adaptive_noise;
    options.kd_updates_denoiser = cfg.kd_updates_denoiser;
    auto res = denoise_student(schedule, plan, head->denoiser, head->projection, head->adapter,
                               student_output, gen, options);
    out.denoised = res.denoised;
    out.projected = res.projected;
    out.gamma = res.gamma;
    out.evaluations = res.evaluations;
  } else {
    out.diff = zero;
    out.projected = head->projection->forward(student_output);
    out.denoised = out.projected;
  }
  out.diffkd = diffkd_loss(out.denoised, out.teacher_latent, head->spec.distance, cfg.temperature);
  return out;
}

/// Heads plus the shared schedule and sampling plan.
struct DiffKDModuleImpl : nn::Module {
  DiffKDConfig config;
  NoiseSchedule schedule;
  SamplingPlan plan;
  nn::ModuleList heads;

  DiffKDModuleImpl(const DiffKDConfig& cfg, const std::vector<HeadSpec>& specs) : config(cfg) {
    config.validate();
    schedule = build_schedule(config.total_timesteps, config.beta_start, config.beta_end);
    plan = make_sampling_plan(schedule, config.initial_timestep, config.nfe);
    heads = register_module("heads", nn::ModuleList());
    for (const auto& s : specs) heads->push_back(DiffKDHead(s));
  }

  DiffKDHead head(size_t i) { return DiffKDHead(heads->ptr<DiffKDHeadImpl>(i)); }
  size_t size() const { return heads->size(); }
};
TORCH_MODULE(DiffKDModule);

struct ModelOutputs {
  torch::Tensor feature;  // (N, C, H, W) before global pooling
  torch::Tensor logits;   // (N, classes)

  const torch::Tensor& at(HeadTap tap) const { return tap == HeadTap::feature ? feature : logits; }
};

struct LossResult {
  LossBundle bundle;
  torch::Tensor total;             // differentiable weighted objective
  torch::Tensor gamma;             // concatenated gamma of all denoising heads (may be undefined)
  std::vector<HeadOutput> heads;
};

/// Task loss plus every head's diffusion, reconstruction and distillation terms.
/// Per-head components are summed before weighting.
inline LossResult compute_losses(const torch::Tensor& labels, const ModelOutputs& teacher,
                                 const ModelOutputs& student, DiffKDModule& state,
                                 torch::Generator& gen) {
  const auto& cfg = state->config;
  LossResult r;
  auto task = torch::nn::functional::cross_entropy(student.logits, labels);
  auto diff = torch::zeros({}, task.options());
  auto ae = torch::zeros({}, task.options());
  auto kd = torch::zeros({}, task.options());
  std::vector<torch::Tensor> gammas;
  for (size_t i = 0; i < state->size(); ++i) {
    auto head = state->head(i);
    const auto& t_out = teacher.at(head->spec.tap);
    const auto& s_out = student.at(head->spec.tap);
    if (!t_out.defined() || !s_out.defined()) {
      throw ConfigError("head " + std::to_string(i) + " taps '" + to_string(head->spec.tap) +
                        "' but the model outputs do not provide it");
    }
    auto out = run_head(head, state->schedule, state->plan, cfg, t_out, s_out, gen);
    diff = diff + out.diff;
    ae = ae + out.ae;
    kd = kd + out.diffkd;
    if (out.gamma.defined()) gammas.push_back(out.gamma.detach());
    r.heads.push_back(std::move(out));
  }
  r.total = task + cfg.lambda_diff * diff + cfg.lambda_ae * ae + cfg.lambda_kd * kd;
  r.bundle.task = task.item<double>();
  r.bundle.diff = diff.item<double>();
  r.bundle.ae = ae.item<double>();
  r.bundle.diffkd = kd.item<double>();
  r.bundle.total = r.total.item<double>();
  if (!gammas.empty()) r.gamma = torch::cat(gammas);
  return r;
}

}  // namespace diffkd
