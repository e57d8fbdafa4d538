#pragma once

#include <string>

#include <torch/torch.h>

#include "diffkd/errors.hpp"
#include "diffkd/tensor_utils.hpp"

namespace diffkd {

enum class DistanceKind { mse, kl, dist };

inline DistanceKind parse_distance(const std::string& name) {
  if (name == "mse") return DistanceKind::mse;
  if (name == "kl") return DistanceKind::kl;
  if (name == "dist") return DistanceKind::dist;
  throw ConfigError("unknown distance '" + name + "' (expected mse, kl or dist)");
}

inline std::string to_string(DistanceKind kind) {
  switch (kind) {
    case DistanceKind::mse: return "mse";
    case DistanceKind::kl: return "kl";
    case DistanceKind::dist: return "dist";
  }
  return "unknown";
}

inline torch::Tensor mse_distance(const torch::Tensor& a, const torch::Tensor& b) {
  require_same_shape(a, b, "mse_distance");
  return (a - b).pow(2).mean();
}

/// KL(softmax(teacher / tau) || softmax(student / tau)) averaged over the batch, times tau^2.
inline torch::Tensor kl_divergence_distance(const torch::Tensor& student_logits,
                                            const torch::Tensor& teacher_logits,
                                            double temperature) {
  if (!(temperature > 0.0)) {
    throw ParameterError("temperature must be > 0, got " + std::to_string(temperature));
  }
  require_same_shape(student_logits, teacher_logits, "kl_divergence_distance");
  require_rank(student_logits, 2, "kl_divergence_distance");
  auto log_p = torch::log_softmax(teacher_logits / temperature, 1);
  auto log_q = torch::log_softmax(student_logits / temperature, 1);
  auto per_sample = (log_p.exp() * (log_p - log_q)).sum(1);
  return per_sample.mean() * (temperature * temperature);
}

namespace detail {

// Pearson correlation of matching rows; zero-variance rows contribute 0.
inline torch::Tensor row_pearson(const torch::Tensor& a, const torch::Tensor& b) {
  auto ac = a - a.mean(1, true);
  auto bc = b - b.mean(1, true);
  auto cov = (ac * bc).sum(1);
  auto var_a = ac.pow(2).sum(1);
  auto var_b = bc.pow(2).sum(1);
  auto denom_sq = var_a * var_b;
  auto valid = denom_sq > 1e-24;
  auto safe = torch::where(valid, denom_sq, torch::ones_like(denom_sq)).sqrt();
  return torch::where(valid, cov / safe, torch::zeros_like(cov));
}

}  // namespace detail

/// 1 - mean Pearson correlation across the class dimension of each sample.
inline torch::Tensor dist_inter_term(const torch::Tensor& student, const torch::Tensor& teacher) {
  return 1.0 - detail::row_pearson(student, teacher).mean();
}

/// 1 - mean Pearson correlation across the batch dimension of each class.
inline torch::Tensor dist_intra_term(const torch::Tensor& student, const torch::Tensor& teacher) {
  return 1.0 - detail::row_pearson(student.t(), teacher.t()).mean();
}

/// Correlation distance: equal-weight average of the inter-class and intra-class terms.
inline torch::Tensor dist_correlation_distance(const torch::Tensor& student_logits,
                                               const torch::Tensor& teacher_logits) {
  require_same_shape(student_logits, teacher_logits, "dist_correlation_distance");
  require_rank(student_logits, 2, "dist_correlation_distance");
  return 0.5 * (dist_inter_term(student_logits, teacher_logits) +
                dist_intra_term(student_logits, teacher_logits));
}

inline torch::Tensor distance(DistanceKind kind, const torch::Tensor& student,
                              const torch::Tensor& teacher, double temperature = 1.0) {
  switch (kind) {
    case DistanceKind::mse: return mse_distance(student, teacher);
    case DistanceKind::kl: return kl_divergence_distance(student, teacher, temperature);
    case DistanceKind::dist: return dist_correlation_distance(student, teacher);
  }
  throw ConfigError("unknown distance kind");
}

}  // namespace diffkd
