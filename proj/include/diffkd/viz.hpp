#pragma once

// Attention-map visualization, gamma statistics and small raster/CSV writers.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "diffkd/errors.hpp"
#include "diffkd/metrics.hpp"
#include "diffkd/tensor_utils.hpp"

namespace diffkd {

struct AttentionMap {
  torch::Tensor values;  // (H, W) float64, non-negative, sums to H * W
  double tau = 0.5;
};

/// V = H * W * softmax(channel_mean(feature) / tau), reshaped to (H, W).
inline AttentionMap attention_map(const torch::Tensor& feature, double tau = 0.5) {
  if (!(tau > 0.0)) throw ParameterError("tau must be > 0, got " + std::to_string(tau));
  require_rank(feature, 3, "attention_map");
  const int64_t h = feature.size(1), w = feature.size(2);
  auto x = feature.detach().to(torch::kFloat64).mean(0).flatten();
  auto e = torch::exp((x - x.max()) / tau);
  // Multiplying before dividing keeps a constant map exactly 1 everywhere.
  auto v = (static_cast<double>(h * w) * e) / e.sum();
  return {v.reshape({h, w}), tau};
}

/// Perceptually uniform colormap (viridis control points, linear interpolation).
inline std::array<uint8_t, 3> viridis(double x) {
  static constexpr std::array<std::array<double, 3>, 9> kStops = {{
      {0.267, 0.005, 0.329}, {0.283, 0.141, 0.458}, {0.254, 0.265, 0.530},
      {0.207, 0.372, 0.553}, {0.164, 0.471, 0.558}, {0.128, 0.567, 0.551},
      {0.135, 0.659, 0.518}, {0.478, 0.821, 0.318}, {0.993, 0.906, 0.144},
  }};
  x = std::clamp(x, 0.0, 1.0) * (kStops.size() - 1);
  const auto i = std::min<size_t>(static_cast<size_t>(x), kStops.size() - 2);
  const double f = x - static_cast<double>(i);
  std::array<uint8_t, 3> rgb{};
  for (size_t c = 0; c < 3; ++c) {
    rgb[c] = static_cast<uint8_t>(std::lround(255.0 * ((1 - f) * kStops[i][c] + f * kStops[i + 1][c])));
  }
  return rgb;
}

struct RgbImage {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<uint8_t> pixels;  // row-major RGB

  RgbImage(int64_t w, int64_t h, uint8_t fill = 255)
      : width(w), height(h), pixels(static_cast<size_t>(w * h * 3), fill) {}

  void set(int64_t x, int64_t y, std::array<uint8_t, 3> rgb) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    auto* p = &pixels[static_cast<size_t>((y * width + x) * 3)];
    p[0] = rgb[0];
    p[1] = rgb[1];
    p[2] = rgb[2];
  }
};

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw IoError("cannot write image '" + path.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng failed writing '" + path.string() + "'");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
               8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(&img.pixels[static_cast<size_t>(y * img.width * 3)]));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

/// Heat-map rendering of a 2-D tensor, min-max normalized, nearest-neighbour upscaled.
inline RgbImage render_heatmap(const torch::Tensor& values, int64_t scale = 16) {
  auto v = values.detach().to(torch::kFloat64).contiguous();
  const int64_t h = v.size(0), w = v.size(1);
  const double lo = v.min().item<double>(), hi = v.max().item<double>();
  const double span = hi > lo ? hi - lo : 1.0;
  RgbImage img(w * scale, h * scale);
  auto acc = v.accessor<double, 2>();
  for (int64_t y = 0; y < h * scale; ++y) {
    for (int64_t x = 0; x < w * scale; ++x) {
      img.set(x, y, viridis((acc[y / scale][x / scale] - lo) / span));
    }
  }
  return img;
}

inline void write_matrix_csv(const std::filesystem::path& path, const torch::Tensor& values) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write table '" + path.string() + "'");
  auto v = values.detach().to(torch::kFloat64).contiguous();
  auto acc = v.accessor<double, 2>();
  out.precision(17);
  for (int64_t y = 0; y < v.size(0); ++y) {
    for (int64_t x = 0; x < v.size(1); ++x) out << (x ? "," : "") << acc[y][x];
    out << "\n";
  }
}

struct GammaReport {
  std::vector<int64_t> buckets = std::vector<int64_t>(GammaStats::kBuckets, 0);
  std::vector<int64_t> epochs;       // epochs that logged gamma, ascending
  std::vector<double> epoch_means;   // mean of the logged batch means per epoch
};

/// Aggregates the gamma records of a metrics log.
inline GammaReport gamma_histogram(const std::vector<MetricRecord>& records) {
  GammaReport report;
  std::map<int64_t, std::pair<double, int64_t>> per_epoch;
  for (const auto& r : records) {
    if (!r.gamma_stats) continue;
    for (size_t k = 0; k < report.buckets.size() && k < r.gamma_stats->histogram.size(); ++k) {
      report.buckets[k] += r.gamma_stats->histogram[k];
    }
    auto& acc = per_epoch[r.epoch];
    acc.first += r.gamma_stats->mean;
    acc.second += 1;
  }
  if (per_epoch.empty()) throw EmptyInputError("metrics log contains no gamma statistics");
  for (const auto& [epoch, acc] : per_epoch) {
    report.epochs.push_back(epoch);
    report.epoch_means.push_back(acc.first / static_cast<double>(acc.second));
  }
  return report;
}

/// Writes <prefix>_hist.{csv,png} and <prefix>_curve.{csv,png}.
inline void write_gamma_report(const GammaReport& report, const std::string& prefix) {
  const std::filesystem::path hist_csv = prefix + "_hist.csv", curve_csv = prefix + "_curve.csv";
  if (hist_csv.has_parent_path()) std::filesystem::create_directories(hist_csv.parent_path());
  {
    std::ofstream out(hist_csv);
    if (!out) throw IoError("cannot write '" + hist_csv.string() + "'");
    out << "bucket_lo,bucket_hi,count\n";
    for (size_t k = 0; k < report.buckets.size(); ++k) {
      const double lo = static_cast<double>(k) / GammaStats::kBuckets;
      out << lo << "," << lo + 1.0 / GammaStats::kBuckets << "," << report.buckets[k] << "\n";
    }
  }
  {
    std::ofstream out(curve_csv);
    if (!out) throw IoError("cannot write '" + curve_csv.string() + "'");
    out.precision(17);
    out << "epoch,mean_gamma\n";
    for (size_t k = 0; k < report.epochs.size(); ++k) {
      out << report.epochs[k] << "," << report.epoch_means[k] << "\n";
    }
  }
  constexpr int64_t kW = 400, kH = 240, kMargin = 20;
  {
    RgbImage img(kW, kH);
    const auto peak = std::max<int64_t>(1, *std::max_element(report.buckets.begin(), report.buckets.end()));
    const int64_t bar = (kW - 2 * kMargin) / static_cast<int64_t>(report.buckets.size());
    for (size_t k = 0; k < report.buckets.size(); ++k) {
      const int64_t top = kH - kMargin - (kH - 2 * kMargin) * report.buckets[k] / peak;
      for (int64_t x = kMargin + static_cast<int64_t>(k) * bar + 1; x < kMargin + (static_cast<int64_t>(k) + 1) * bar - 1; ++x) {
        for (int64_t y = top; y < kH - kMargin; ++y) img.set(x, y, viridis(static_cast<double>(k) / 9.0));
      }
    }
    write_png(prefix + "_hist.png", img);
  }
  {
    RgbImage img(kW, kH);
    const auto n = static_cast<int64_t>(report.epoch_means.size());
    auto px = [&](int64_t i) { return kMargin + (n > 1 ? i * (kW - 2 * kMargin) / (n - 1) : (kW - 2 * kMargin) / 2); };
    auto py = [&](double g) { return kH - kMargin - static_cast<int64_t>(std::lround(g * (kH - 2 * kMargin))); };
    for (int64_t x = kMargin; x < kW - kMargin; ++x) img.set(x, kH - kMargin, {0, 0, 0});
    for (int64_t i = 0; i < n; ++i) {
      const int64_t x0 = px(i), y0 = py(report.epoch_means[static_cast<size_t>(i)]);
      const int64_t x1 = i + 1 < n ? px(i + 1) : x0;
      const int64_t y1 = i + 1 < n ? py(report.epoch_means[static_cast<size_t>(i + 1)]) : y0;
      const int64_t steps = std::max<int64_t>({1, std::abs(x1 - x0), std::abs(y1 - y0)});
      for (int64_t s = 0; s <= steps; ++s) {
        img.set(x0 + (x1 - x0) * s / steps, y0 + (y1 - y0) * s / steps, {33, 145, 140});
      }
      for (int64_t d = -2; d <= 2; ++d) {
        img.set(x0 + d, y0, {68, 1, 84});
        img.set(x0, y0 + d, {68, 1, 84});
      }
    }
    write_png(prefix + "_curve.png", img);
  }
}

}  // namespace diffkd
