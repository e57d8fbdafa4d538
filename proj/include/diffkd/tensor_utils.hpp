#pragma once

#include <sstream>
#include <string>

#include <torch/torch.h>

#include "diffkd/errors.hpp"

namespace diffkd {

inline std::string shape_string(const torch::Tensor& t) {
  std::ostringstream os;
  os << t.sizes();
  return os.str();
}

inline void require_same_shape(const torch::Tensor& a, const torch::Tensor& b,
                               const std::string& where) {
  if (a.sizes() != b.sizes()) {
    throw ShapeError(where + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

inline void require_rank(const torch::Tensor& t, int64_t rank, const std::string& where) {
  if (t.dim() != rank) {
    throw ShapeError(where + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t));
  }
}

inline void require_channels(const torch::Tensor& t, int64_t channels, const std::string& where) {
  if (t.dim() < 2 || t.size(1) != channels) {
    throw ShapeError(where + ": expected " + std::to_string(channels) + " channels, got " +
                     shape_string(t));
  }
}

// Collects every parameter of a module (recursively) for gradient probes and hashing.
inline double grad_abs_sum(const std::vector<torch::Tensor>& params) {
  double total = 0.0;
  for (const auto& p : params) {
    if (p.grad().defined()) total += p.grad().abs().sum().item<double>();
  }
  return total;
}

}  // namespace diffkd
