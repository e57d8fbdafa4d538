#pragma once

// Forward noising and the deterministic DDIM reverse step.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "diffkd/errors.hpp"
#include "diffkd/tensor_utils.hpp"

namespace diffkd {

/// Linear beta schedule with cumulative products, stored in double precision.
/// Tensors are cast to the caller's dtype only when coefficients are applied.
struct NoiseSchedule {
  int64_t total_timesteps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double alpha_bar(int64_t t) const {
    if (t < 0 || t >= total_timesteps) {
      throw IndexError("timestep " + std::to_string(t) + " outside [0, " +
                       std::to_string(total_timesteps) + ")");
    }
    return alpha_bars[static_cast<size_t>(t)];
  }
};

/// Reverse-process timetable. `timesteps` holds the nfe timesteps at which the
/// denoiser is evaluated; the step after the last entry lands on the clean estimate.
struct SamplingPlan {
  int64_t initial_timestep = 0;
  int64_t nfe = 0;
  int64_t interval = 0;
  double sigma = 0.0;
  std::vector<int64_t> timesteps;

  // Target of the transition out of timesteps[i]; 0 denotes the clean estimate.
  int64_t next_timestep(size_t i) const {
    return i + 1 < timesteps.size() ? timesteps[i + 1] : 0;
  }
};

/// Schedule from an explicit beta array (used by tests and small hand-worked cases).
inline NoiseSchedule build_schedule_from_betas(const std::vector<double>& betas) {
  if (betas.empty()) throw ParameterError("betas must be non-empty");
  NoiseSchedule s;
  s.total_timesteps = static_cast<int64_t>(betas.size());
  s.betas = betas;
  double running = 1.0;
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ParameterError("betas must lie in (0, 1)");
    s.alphas.push_back(1.0 - b);
    running *= 1.0 - b;
    // A vanishing or subnormal abar makes the clean-estimate division meaningless.
    if (!(running >= std::numeric_limits<double>::min())) {
      throw ParameterError("cumulative alpha_bar underflows at t=" + std::to_string(s.alpha_bars.size()) +
                           "; use fewer total_timesteps or smaller betas");
    }
    s.alpha_bars.push_back(running);
  }
  return s;
}

/// Linearly spaced betas from beta_start to beta_end over total_timesteps.
inline NoiseSchedule build_schedule(int64_t total_timesteps, double beta_start = 1e-4,
                                    double beta_end = 0.02) {
  if (total_timesteps < 1) {
    throw ParameterError("total_timesteps must be >= 1, got " + std::to_string(total_timesteps));
  }
  if (!(beta_start > 0.0) || !(beta_start < 1.0)) {
    throw ParameterError("beta_start must lie in (0, 1), got " + std::to_string(beta_start));
  }
  if (!(beta_end < 1.0) || beta_end < beta_start) {
    throw ParameterError("beta_end must lie in [beta_start, 1), got " + std::to_string(beta_end));
  }
  const auto n = static_cast<size_t>(total_timesteps);
  std::vector<double> betas(n);
  for (size_t i = 0; i < n; ++i) {
    const double frac = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    betas[i] = beta_start + (beta_end - beta_start) * frac;
  }
  return build_schedule_from_betas(betas);
}

/// sqrt(abar_t) * z0 + sqrt(1 - abar_t) * epsilon.
inline torch::Tensor add_noise(const NoiseSchedule& schedule, const torch::Tensor& z0, int64_t t,
                               const torch::Tensor& epsilon) {
  const double abar = schedule.alpha_bar(t);
  require_same_shape(z0, epsilon, "add_noise");
  return std::sqrt(abar) * z0 + std::sqrt(1.0 - abar) * epsilon;
}

/// Per-sample timesteps variant used during diffusion training. `t` is an int64 vector of length N.
inline torch::Tensor add_noise_batched(const NoiseSchedule& schedule, const torch::Tensor& z0,
                                       const torch::Tensor& t, const torch::Tensor& epsilon) {
  require_same_shape(z0, epsilon, "add_noise");
  if (t.dim() != 1 || t.size(0) != z0.size(0)) {
    throw ShapeError("add_noise: timestep vector must have one entry per sample");
  }
  auto table = torch::tensor(schedule.alpha_bars, torch::kFloat64);
  auto abar = table.index_select(0, t.to(torch::kLong)).to(z0.dtype());
  std::vector<int64_t> view(static_cast<size_t>(z0.dim()), 1);
  view[0] = z0.size(0);
  abar = abar.view(view);
  return abar.sqrt() * z0 + (1.0 - abar).sqrt() * epsilon;
}

inline SamplingPlan make_sampling_plan(const NoiseSchedule& schedule, int64_t initial_timestep,
                                       int64_t nfe) {
  if (initial_timestep <= 0 || initial_timestep >= schedule.total_timesteps) {
    throw ParameterError("initial_timestep must lie in (0, " +
                         std::to_string(schedule.total_timesteps) + "), got " +
                         std::to_string(initial_timestep));
  }
  if (nfe < 1 || nfe > initial_timestep) {
    throw ParameterError("nfe must lie in [1, initial_timestep], got " + std::to_string(nfe));
  }
  SamplingPlan plan;
  plan.initial_timestep = initial_timestep;
  plan.nfe = nfe;
  plan.interval = initial_timestep / nfe;
  for (int64_t i = 0; i < nfe; ++i) plan.timesteps.push_back(initial_timestep - i * plan.interval);
  return plan;
}

/// One deterministic (sigma = 0) DDIM transition from t to t_next. A t_next of 0
/// is the terminal step and yields the clean estimate itself.
inline torch::Tensor ddim_step(const NoiseSchedule& schedule, const torch::Tensor& z_t,
                               const torch::Tensor& predicted_noise, int64_t t, int64_t t_next) {
  if (t_next >= t) {
    throw ParameterError("ddim_step requires t_next < t, got t=" + std::to_string(t) +
                         " t_next=" + std::to_string(t_next));
  }
  if (t_next < 0) throw IndexError("ddim_step: negative t_next");
  require_same_shape(z_t, predicted_noise, "ddim_step");
  const double abar = schedule.alpha_bar(t);
  auto x0 = (z_t - std::sqrt(1.0 - abar) * predicted_noise) / std::sqrt(abar);
  if (t_next == 0) return x0;
  const double abar_next = schedule.alpha_bar(t_next);
  return std::sqrt(abar_next) * x0 + std::sqrt(1.0 - abar_next) * predicted_noise;
}

template <typename Predictor>
concept NoisePredictor = requires(Predictor p, const torch::Tensor& z, int64_t t) {
  { p(z, t) } -> std::convertible_to<torch::Tensor>;
};

/// Runs the full reverse chain of `plan` starting from z at plan.initial_timestep.
template <NoisePredictor Predictor>
torch::Tensor run_reverse_chain(const NoiseSchedule& schedule, const SamplingPlan& plan,
                                torch::Tensor z, Predictor&& predict) {
  for (size_t i = 0; i < plan.timesteps.size(); ++i) {
    const int64_t t = plan.timesteps[i];
    torch::Tensor eps = predict(z, t);
    z = ddim_step(schedule, z, eps, t, plan.next_timestep(i));
  }
  return z;
}

}  // namespace diffkd
