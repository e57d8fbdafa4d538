#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "diffkd/noise_schedule.hpp"

using namespace diffkd;

namespace {

// Independent oracle: product of (1 - beta_i) for linearly spaced betas, in long double.
long double linear_alpha_bar_oracle(int64_t T, double b0, double b1, int64_t t) {
  long double prod = 1.0L;
  for (int64_t i = 0; i <= t; ++i) {
    const long double beta = b0 + (static_cast<long double>(b1) - b0) * i / (T - 1);
    prod *= 1.0L - beta;
  }
  return prod;
}

double max_rel_error(const torch::Tensor& got, const torch::Tensor& want) {
  return ((got - want).abs().max() / want.abs().max()).item<double>();
}

}  // namespace

TEST(NoiseSchedule, LinearThousandStepMatchesProductOracle) {
  auto s = build_schedule(1000, 1e-4, 0.02);
  ASSERT_EQ(s.betas.size(), 1000u);
  EXPECT_DOUBLE_EQ(s.betas.front(), 1e-4);
  EXPECT_DOUBLE_EQ(s.betas.back(), 0.02);
  const auto oracle = static_cast<double>(linear_alpha_bar_oracle(1000, 1e-4, 0.02, 999));
  EXPECT_NEAR(s.alpha_bars[999], oracle, 1e-12 * oracle);
  // Frozen from the oracle: 4.0358e-05.
  EXPECT_NEAR(s.alpha_bars[999], 4.035829765375676e-05, 1e-15);
}

TEST(NoiseSchedule, HandWorkedSmallSchedules) {
  auto one = build_schedule(1, 0.1, 0.1);
  EXPECT_DOUBLE_EQ(one.alpha_bars[0], 0.9);
  auto two = build_schedule(2, 0.1, 0.2);
  EXPECT_DOUBLE_EQ(two.betas[1], 0.2);
  EXPECT_NEAR(two.alpha_bars[0], 0.9, 1e-15);
  EXPECT_NEAR(two.alpha_bars[1], 0.72, 1e-15);
}

TEST(NoiseSchedule, InvariantsHoldAcrossConfigurations) {
  for (int64_t T : {1, 2, 10, 1000}) {
    for (auto [b0, b1] : {std::pair{1e-4, 0.02}, std::pair{0.001, 0.5}, std::pair{0.3, 0.3}}) {
      auto s = build_schedule(T, b0, b1);
      double running = 1.0;
      for (size_t i = 0; i < s.betas.size(); ++i) {
        EXPECT_GT(s.betas[i], 0.0);
        EXPECT_LT(s.betas[i], 1.0);
        EXPECT_DOUBLE_EQ(s.alphas[i], 1.0 - s.betas[i]);
        running *= s.alphas[i];
        EXPECT_NEAR(s.alpha_bars[i], running, 1e-12 * running);
        EXPECT_GT(s.alpha_bars[i], 0.0);
        EXPECT_LT(s.alpha_bars[i], 1.0);
        if (i > 0) EXPECT_LT(s.alpha_bars[i], s.alpha_bars[i - 1]);
      }
    }
  }
}

TEST(NoiseSchedule, RejectsInvalidBoundsNamingTheField) {
  auto message = [](auto fn) {
    try {
      fn();
    } catch (const ParameterError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message([] { build_schedule(0); }).find("total_timesteps"), std::string::npos);
  EXPECT_NE(message([] { build_schedule(10, 0.0, 0.02); }).find("beta_start"), std::string::npos);
  EXPECT_NE(message([] { build_schedule(10, 0.1, 1.0); }).find("beta_end"), std::string::npos);
  EXPECT_NE(message([] { build_schedule(10, 0.1, 0.05); }).find("beta_end"), std::string::npos);
  EXPECT_NE(message([] { build_schedule(4000, 0.3, 0.3); }).find("underflow"), std::string::npos);
}

TEST(AddNoise, DegenerateCasesAndScalarOracle) {
  auto s = build_schedule_from_betas({0.1, 0.2});
  auto eps = torch::randn({3, 4}, torch::kFloat64);
  auto zero = torch::zeros({3, 4}, torch::kFloat64);
  EXPECT_TRUE(torch::allclose(add_noise(s, zero, 1, eps), std::sqrt(1 - 0.72) * eps, 0, 1e-15));

  auto quarter = build_schedule_from_betas({0.75});
  auto z0 = torch::randn({5}, torch::kFloat64);
  EXPECT_TRUE(torch::allclose(add_noise(quarter, z0, 0, torch::zeros_like(z0)), 0.5 * z0, 0, 1e-15));

  auto one = torch::ones({1}, torch::kFloat64);
  // Scalar oracle: sqrt(0.72) + sqrt(0.28) = 1.3776783996...
  EXPECT_NEAR(add_noise(s, one, 1, one).item<double>(), 1.3776783996367752, 1e-12);
}

TEST(AddNoise, Errors) {
  auto s = build_schedule(10);
  auto z = torch::zeros({2, 3});
  EXPECT_THROW(add_noise(s, z, 10, z), IndexError);
  EXPECT_THROW(add_noise(s, z, -1, z), IndexError);
  EXPECT_THROW(add_noise(s, z, 3, torch::zeros({2, 4})), ShapeError);
}

TEST(SamplingPlan, UniformSpacing) {
  auto s = build_schedule(1000);
  auto p = make_sampling_plan(s, 500, 5);
  EXPECT_EQ(p.timesteps, (std::vector<int64_t>{500, 400, 300, 200, 100}));
  EXPECT_EQ(p.interval, 100);
  EXPECT_EQ(p.sigma, 0.0);
  auto single = make_sampling_plan(s, 500, 1);
  EXPECT_EQ(single.timesteps, std::vector<int64_t>{500});
  EXPECT_EQ(single.interval, 500);
  auto small = make_sampling_plan(s, 6, 3);
  EXPECT_EQ(small.timesteps, (std::vector<int64_t>{6, 4, 2}));
  EXPECT_EQ(small.interval, 2);
  EXPECT_EQ(small.next_timestep(2), 0);
}

TEST(SamplingPlan, PropertiesOverManyPlans) {
  auto s = build_schedule(1000);
  for (int64_t init : {1, 7, 250, 500, 999}) {
    for (int64_t nfe = 1; nfe <= std::min<int64_t>(init, 12); ++nfe) {
      auto p = make_sampling_plan(s, init, nfe);
      ASSERT_EQ(static_cast<int64_t>(p.timesteps.size()), nfe);
      EXPECT_EQ(p.timesteps.front(), init);
      EXPECT_GT(p.timesteps.back(), 0);
      for (size_t i = 1; i < p.timesteps.size(); ++i) EXPECT_LT(p.timesteps[i], p.timesteps[i - 1]);
    }
  }
  EXPECT_THROW(make_sampling_plan(s, 5, 6), ParameterError);
  EXPECT_THROW(make_sampling_plan(s, 0, 1), ParameterError);
  EXPECT_THROW(make_sampling_plan(s, 1000, 1), ParameterError);
}

TEST(DdimStep, ExactNoiseInvertsForwardProcess) {
  auto s = build_schedule(1000);
  std::mt19937 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t t = std::uniform_int_distribution<int64_t>(1, 999)(rng);
    auto z0 = torch::randn({2, 3, 4, 4}, torch::kFloat64);
    auto eps = torch::randn_like(z0);
    auto zt = add_noise(s, z0, t, eps);
    auto x0 = ddim_step(s, zt, eps, t, 0);
    EXPECT_LE(max_rel_error(x0, z0), 1e-6) << "t=" << t;
  }
}

TEST(DdimStep, IsDeterministicAndValidatesOrder) {
  auto s = build_schedule(1000);
  auto z = torch::randn({4, 8}, torch::kFloat64);
  auto eps = torch::randn_like(z);
  auto a = ddim_step(s, z, eps, 300, 200);
  auto b = ddim_step(s, z, eps, 300, 200);
  EXPECT_TRUE(torch::equal(a, b));
  EXPECT_THROW(ddim_step(s, z, eps, 200, 200), ParameterError);
  EXPECT_THROW(ddim_step(s, z, eps, 200, 300), ParameterError);
  EXPECT_THROW(ddim_step(s, z, torch::randn({4, 9}, torch::kFloat64), 300, 200), ShapeError);
}

TEST(DdimStep, OracleDrivenChainRecoversCleanSignal) {
  auto s = build_schedule(1000);
  for (int64_t nfe : {1, 2, 5, 10, 50}) {
    auto plan = make_sampling_plan(s, 500, nfe);
    auto z0 = torch::randn({2, 16, 4, 4}, torch::kFloat64);
    auto eps = torch::randn_like(z0);
    int calls = 0;
    auto out = run_reverse_chain(s, plan, add_noise(s, z0, 500, eps), [&](const torch::Tensor&, int64_t) {
      ++calls;
      return eps;
    });
    EXPECT_EQ(calls, nfe);
    EXPECT_LE(max_rel_error(out, z0), 1e-5) << "nfe=" << nfe;
  }
}
