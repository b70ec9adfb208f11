#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "crowdnav/policy_net.hpp"
#include "support/gradcheck.hpp"

using namespace crowdnav;
using M = Matrix<double>;

namespace {

/// Direct, loop-based evaluation of the trunk for one observation row.
std::vector<double> naive_trunk(const Trunk<double>& p, const NetConfig& cfg, const std::vector<double>& x) {
  const int nb = cfg.n_beams, L1 = cfg.conv1_length(), L2 = cfg.conv2_length();
  const int F1 = cfg.conv1_filters, F2 = cfg.conv2_filters;
  std::vector<double> a1(static_cast<std::size_t>(L1 * F1));
  for (int q = 0; q < L1; ++q)
    for (int f = 0; f < F1; ++f) {
      double z = p.conv1_b(0, f);
      for (int j = 0; j < cfg.conv1_kernel; ++j)
        for (int fr = 0; fr < 3; ++fr) z += p.conv1_w(j * 3 + fr, f) * x[static_cast<std::size_t>(fr * nb + q * cfg.conv1_stride + j)];
      a1[static_cast<std::size_t>(q * F1 + f)] = std::max(0.0, z);
    }
  std::vector<double> a2(static_cast<std::size_t>(L2 * F2));
  for (int q = 0; q < L2; ++q)
    for (int g = 0; g < F2; ++g) {
      double z = p.conv2_b(0, g);
      for (int j = 0; j < cfg.conv2_kernel; ++j)
        for (int f = 0; f < F1; ++f) z += p.conv2_w(j * F1 + f, g) * a1[static_cast<std::size_t>((q * cfg.conv2_stride + j) * F1 + f)];
      a2[static_cast<std::size_t>(q * F2 + g)] = std::max(0.0, z);
    }
  std::vector<double> h1(static_cast<std::size_t>(cfg.fc1));
  for (int k = 0; k < cfg.fc1; ++k) {
    double z = p.fc1_b(0, k);
    for (int i = 0; i < L2 * F2; ++i) z += p.fc1_w(i, k) * a2[static_cast<std::size_t>(i)];
    h1[static_cast<std::size_t>(k)] = std::max(0.0, z);
  }
  std::vector<double> in2 = h1;
  for (int e = 0; e < 4; ++e) in2.push_back(x[static_cast<std::size_t>(3 * nb + e)]);
  std::vector<double> h2(static_cast<std::size_t>(cfg.fc2));
  for (int k = 0; k < cfg.fc2; ++k) {
    double z = p.fc2_b(0, k);
    for (std::size_t i = 0; i < in2.size(); ++i) z += p.fc2_w(static_cast<Eigen::Index>(i), k) * in2[i];
    h2[static_cast<std::size_t>(k)] = std::max(0.0, z);
  }
  std::vector<double> out(static_cast<std::size_t>(p.head_w.cols()));
  for (Eigen::Index o = 0; o < p.head_w.cols(); ++o) {
    double z = p.head_b(0, o);
    for (int k = 0; k < cfg.fc2; ++k) z += p.head_w(k, o) * h2[static_cast<std::size_t>(k)];
    out[static_cast<std::size_t>(o)] = z;
  }
  return out;
}

M random_obs(const NetConfig& cfg, Eigen::Index rows, std::uint64_t seed) {
  Rng rng(seed);
  M obs(rows, cfg.obs_dim());
  for (Eigen::Index i = 0; i < obs.size(); ++i) obs.data()[i] = rng.normal();
  return obs;
}

NetConfig desk_net() {
  NetConfig c;
  c.n_beams = 128;
  return c;
}

}  // namespace

TEST(NetConfig, LayerLengths) {
  NetConfig c;  // 512 beams
  EXPECT_EQ(c.conv1_length(), 254);
  EXPECT_EQ(c.conv2_length(), 126);
  EXPECT_EQ(c.flat_dim(), 126 * 32);
  EXPECT_EQ(c.obs_dim(), 3 * 512 + 4);
  EXPECT_EQ(desk_net().conv1_length(), 62);
  EXPECT_EQ(desk_net().conv2_length(), 30);
}

TEST(NetConfig, RejectsImpossibleShapes) {
  NetConfig c;
  c.n_beams = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  NetConfig d;
  d.fc1 = 0;
  EXPECT_THROW(d.validate(), ConfigError);
}

TEST(Init, ShapesAndCounts) {
  const NetConfig c;
  const auto [policy, value] = init_params<float>(c, 1);
  const std::size_t trunk = 5 * 3 * 32 + 32 + 3 * 32 * 32 + 32 + 4032 * 256 + 256 + 260 * 128 + 128;
  EXPECT_EQ(parameter_count(policy), trunk + 128 * 2 + 2 + 2);
  EXPECT_EQ(parameter_count(value), trunk + 128 + 1);
  EXPECT_EQ(policy.log_std(0, 0), -0.5f);
  EXPECT_EQ(policy.log_std(0, 1), -0.5f);
}

TEST(Init, DeterministicPerSeed) {
  const NetConfig c = desk_net();
  const auto a = init_params<float>(c, 5);
  const auto b = init_params<float>(c, 5);
  const auto d = init_params<float>(c, 6);
  EXPECT_TRUE(bit_equal(a.first, b.first));
  EXPECT_TRUE(bit_equal(a.second, b.second));
  EXPECT_FALSE(bit_equal(a.first, d.first));
}

TEST(Init, InitialMeanNearCentreOfActionRanges) {
  const NetConfig c = desk_net();
  const auto [policy, value] = init_params<float>(c, 2);
  const Matrix<float> obs = random_obs(c, 16, 3).cast<float>();
  const Matrix<float> mean = policy_forward(policy, c, obs);
  for (Eigen::Index b = 0; b < 16; ++b) {
    EXPECT_NEAR(mean(b, 0), 0.5, 0.1);
    EXPECT_NEAR(mean(b, 1), 0.0, 0.2);
  }
}

TEST(Forward, MatchesNaiveLoops) {
  const NetConfig c = oracle::small_net();
  auto [policy, value] = init_params<double>(c, 9);
  const M obs = random_obs(c, 4, 10);
  ForwardCache<double> cache;
  policy_forward(policy, c, obs, &cache);
  const M v = value_forward(value, c, obs);
  for (Eigen::Index b = 0; b < 4; ++b) {
    std::vector<double> x(obs.row(b).data(), obs.row(b).data() + obs.cols());
    const auto po = naive_trunk(policy.net, c, x);
    const auto vo = naive_trunk(value.net, c, x);
    EXPECT_NEAR(cache.out(b, 0), po[0], 1e-12);
    EXPECT_NEAR(cache.out(b, 1), po[1], 1e-12);
    EXPECT_NEAR(v(b, 0), vo[0], 1e-12);
  }
}

TEST(Forward, MeanStaysInsideActionBounds) {
  const NetConfig c = oracle::small_net();
  auto [policy, value] = init_params<double>(c, 4);
  Rng rng(4);
  for (Eigen::Index i = 0; i < policy.net.head_w.size(); ++i) policy.net.head_w.data()[i] = rng.uniform(-20, 20);
  const M mean = policy_forward(policy, c, random_obs(c, 64, 5));
  for (Eigen::Index b = 0; b < 64; ++b) {
    EXPECT_GE(mean(b, 0), 0.0);
    EXPECT_LE(mean(b, 0), 1.0);
    EXPECT_GE(mean(b, 1), -1.0);
    EXPECT_LE(mean(b, 1), 1.0);
  }
}

TEST(Forward, RowsAreIndependentOfBatchComposition) {
  const NetConfig c = desk_net();
  const auto [policy, value] = init_params<float>(c, 3);
  const Matrix<float> obs = random_obs(c, 8, 6).cast<float>();
  const Matrix<float> all = value_forward(value, c, obs);
  for (Eigen::Index b = 0; b < 8; ++b) {
    const Matrix<float> one = value_forward(value, c, Matrix<float>(obs.row(b)));
    EXPECT_NEAR(one(0, 0), all(b, 0), 1e-4f * (1.0f + std::abs(all(b, 0))));
  }
}

TEST(Forward, WrongInputWidthIsAContractViolation) {
  const NetConfig c = oracle::small_net();
  const auto [policy, value] = init_params<double>(c, 1);
  EXPECT_THROW(policy_forward(policy, c, M::Zero(2, c.obs_dim() + 1)), ContractViolation);
}

TEST(Backward, RequiresAForwardCache) {
  const NetConfig c = oracle::small_net();
  const auto [policy, value] = init_params<double>(c, 1);
  ForwardCache<double> empty;
  EXPECT_THROW(value_backward(value, c, empty, M::Zero(2, 1)), ContractViolation);
}

TEST(GradientCheck, SmallNetworksManyDraws) {
  for (std::uint64_t draw = 0; draw < 20; ++draw) {
    const auto rep = oracle::gradient_check_draw(draw, oracle::small_net());
    EXPECT_LT(rep.policy, 1e-3) << "draw " << draw;
    EXPECT_LT(rep.log_prob, 1e-3) << "draw " << draw;
    EXPECT_LT(rep.value, 1e-3) << "draw " << draw;
    EXPECT_GT(rep.coordinates, 100u);
  }
}

TEST(GradientCheck, DeskSizedNetwork) {
  const auto rep = oracle::gradient_check_draw(77, desk_net(), 2, 6);
  EXPECT_LT(rep.worst(), 1e-3);
}

TEST(Gaussian, LogProbClosedForm) {
  const std::array<double, 2> mean{0.3, -0.2}, log_std{-0.5, 0.1}, x{0.5, 0.4};
  double expected = 0.0;
  for (int d = 0; d < 2; ++d) {
    const double s = std::exp(log_std[d]);
    expected += -0.5 * std::pow((x[d] - mean[d]) / s, 2) - std::log(s) - 0.5 * std::log(2 * std::numbers::pi);
  }
  EXPECT_NEAR(gaussian_log_prob<double>(mean, log_std, x), expected, 1e-14);
}

TEST(Gaussian, DensityIntegratesToOneAndEntropyMatchesQuadrature) {
  const std::array<double, 2> mean{0.4, -0.1}, log_std{-0.5, -0.9};
  // Midpoint rule over +-10 sigma per dimension.
  const int n = 800;
  double mass = 0.0, ent = 0.0;
  const double s0 = std::exp(log_std[0]), s1 = std::exp(log_std[1]);
  const double h0 = 20 * s0 / n, h1 = 20 * s1 / n;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const std::array<double, 2> x{mean[0] - 10 * s0 + (i + 0.5) * h0, mean[1] - 10 * s1 + (j + 0.5) * h1};
      const double lp = gaussian_log_prob<double>(mean, log_std, x);
      const double p = std::exp(lp);
      mass += p * h0 * h1;
      ent -= p * lp * h0 * h1;
    }
  EXPECT_NEAR(mass, 1.0, 1e-6);
  EXPECT_NEAR(gaussian_entropy<double>(log_std), ent, 1e-6);
}

TEST(Gaussian, LogProbGradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::array<double, 2> mean{rng.uniform(-1, 1), rng.uniform(-1, 1)}, ls{rng.uniform(-2, 1), rng.uniform(-2, 1)},
        x{rng.uniform(-2, 2), rng.uniform(-2, 2)};
    std::array<double, 2> dm{}, dl{};
    gaussian_log_prob_grad<double>(mean, ls, x, dm, dl);
    const double h = 1e-6;
    for (int d = 0; d < 2; ++d) {
      auto m2 = mean;
      m2[d] += h;
      const double up = gaussian_log_prob<double>(m2, ls, x);
      m2[d] -= 2 * h;
      const double dn = gaussian_log_prob<double>(m2, ls, x);
      EXPECT_NEAR(dm[d], (up - dn) / (2 * h), 1e-5 * (1 + std::abs(dm[d])));
      auto l2 = ls;
      l2[d] += h;
      const double lu = gaussian_log_prob<double>(mean, l2, x);
      l2[d] -= 2 * h;
      const double ld = gaussian_log_prob<double>(mean, l2, x);
      EXPECT_NEAR(dl[d], (lu - ld) / (2 * h), 1e-5 * (1 + std::abs(dl[d])));
    }
  }
}

TEST(Gaussian, SamplingStatisticsAndClamp) {
  const std::array<double, 2> mean{0.9, -0.3}, ls{-0.5, -1.0};
  Rng rng(21);
  const int n = 40000;
  double s[2] = {0, 0}, s2[2] = {0, 0};
  for (int i = 0; i < n; ++i) {
    const ActionSample a = sample_action(mean, ls, rng);
    EXPECT_GE(a.action.v, 0.0);
    EXPECT_LE(a.action.v, 1.0);
    EXPECT_GE(a.action.w, -1.0);
    EXPECT_LE(a.action.w, 1.0);
    EXPECT_EQ(a.log_prob, gaussian_log_prob<double>(mean, ls, a.pre_clamp));
    for (int d = 0; d < 2; ++d) {
      s[d] += a.pre_clamp[d];
      s2[d] += a.pre_clamp[d] * a.pre_clamp[d];
    }
  }
  for (int d = 0; d < 2; ++d) {
    const double m = s[d] / n;
    EXPECT_NEAR(m, mean[d], 0.01);
    EXPECT_NEAR(std::sqrt(s2[d] / n - m * m), std::exp(ls[d]), 0.01);
  }
}

TEST(Params, CastRoundTripAndHelpers) {
  const NetConfig c = oracle::small_net();
  const auto [policy, value] = init_params<float>(c, 8);
  const PolicyParams<float> back = cast<float>(cast<double>(policy));
  EXPECT_TRUE(bit_equal(back, policy));
  PolicyParams<float> z = zeros_like(policy);
  EXPECT_EQ(squared_norm(z), 0.0);
  PolicyParams<float> twice = policy;
  scale(twice, 2.0);
  EXPECT_NEAR(squared_norm(twice), 4.0 * squared_norm(policy), 1e-3 * squared_norm(policy));
  EXPECT_TRUE(all_finite(policy));
  twice.log_std(0, 0) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(all_finite(twice));
}
