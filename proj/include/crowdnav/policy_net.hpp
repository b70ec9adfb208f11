#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <algorithm>
#include <type_traits>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "crowdnav/errors.hpp"
#include "crowdnav/mdp.hpp"
#include "crowdnav/rng.hpp"
#include "crowdnav/sim_core.hpp"

namespace crowdnav {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kActionDims = 2;

/// Shapes of the actor/critic trunk: two strided 1-D convolutions over the
/// scan stack, a dense layer, then a dense layer that also sees goal and
/// velocity.
struct NetConfig {
  int n_beams = 512;
  int conv1_filters = 32;
  int conv1_kernel = 5;
  int conv1_stride = 2;
  int conv2_filters = 32;
  int conv2_kernel = 3;
  int conv2_stride = 2;
  int fc1 = 256;
  int fc2 = 128;

  int conv1_length() const { return (n_beams - conv1_kernel) / conv1_stride + 1; }
  int conv2_length() const { return (conv1_length() - conv2_kernel) / conv2_stride + 1; }
  int flat_dim() const { return conv2_length() * conv2_filters; }
  int obs_dim() const { return observation_dim(n_beams); }

  void validate() const {
    for (int v : {n_beams, conv1_filters, conv1_kernel, conv1_stride, conv2_filters, conv2_kernel, conv2_stride, fc1, fc2})
      if (v <= 0) throw ConfigError("net: layer sizes must be positive");
    if (conv1_kernel > n_beams) throw ConfigError("net: conv1 kernel longer than the scan");
    if (conv2_kernel > conv1_length()) throw ConfigError("net: conv2 kernel longer than the conv1 output");
  }
  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

/// Weights of one trunk plus its linear head. Biases are 1 x n.
template <typename T>
struct Trunk {
  Matrix<T> conv1_w;  // [conv1_kernel * 3, conv1_filters], row = tap * 3 + frame
  Matrix<T> conv1_b;
  Matrix<T> conv2_w;  // [conv2_kernel * conv1_filters, conv2_filters]
  Matrix<T> conv2_b;
  Matrix<T> fc1_w;    // [flat_dim, fc1]
  Matrix<T> fc1_b;
  Matrix<T> fc2_w;    // [fc1 + 4, fc2]
  Matrix<T> fc2_b;
  Matrix<T> head_w;   // [fc2, outputs]
  Matrix<T> head_b;

  static constexpr std::size_t kTensorCount = 10;
  static constexpr std::array<std::string_view, kTensorCount> kNames{
      "conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc1.weight",
      "fc1.bias",     "fc2.weight", "fc2.bias",     "head.weight", "head.bias"};

  static Trunk zeros(const NetConfig& cfg, int outputs) {
    Trunk t;
    t.conv1_w = Matrix<T>::Zero(cfg.conv1_kernel * kScanFrames, cfg.conv1_filters);
    t.conv1_b = Matrix<T>::Zero(1, cfg.conv1_filters);
    t.conv2_w = Matrix<T>::Zero(cfg.conv2_kernel * cfg.conv1_filters, cfg.conv2_filters);
    t.conv2_b = Matrix<T>::Zero(1, cfg.conv2_filters);
    t.fc1_w = Matrix<T>::Zero(cfg.flat_dim(), cfg.fc1);
    t.fc1_b = Matrix<T>::Zero(1, cfg.fc1);
    t.fc2_w = Matrix<T>::Zero(cfg.fc1 + kExtraDims, cfg.fc2);
    t.fc2_b = Matrix<T>::Zero(1, cfg.fc2);
    t.head_w = Matrix<T>::Zero(cfg.fc2, outputs);
    t.head_b = Matrix<T>::Zero(1, outputs);
    return t;
  }

  std::array<Matrix<T>*, kTensorCount> tensors() {
    return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc1_w, &fc1_b, &fc2_w, &fc2_b, &head_w, &head_b};
  }
  std::array<const Matrix<T>*, kTensorCount> tensors() const {
    return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc1_w, &fc1_b, &fc2_w, &fc2_b, &head_w, &head_b};
  }
};

/// Actor: trunk with a 2-output head plus the observation-independent log-std.
template <typename T>
struct PolicyParams {
  Trunk<T> net;
  Matrix<T> log_std;  // 1 x 2

  static constexpr std::size_t kTensorCount = Trunk<T>::kTensorCount + 1;

  static PolicyParams zeros(const NetConfig& cfg) {
    return {Trunk<T>::zeros(cfg, kActionDims), Matrix<T>::Zero(1, kActionDims)};
  }
  static std::string name(std::size_t i) {
    return i < Trunk<T>::kTensorCount ? std::string(Trunk<T>::kNames[i]) : std::string("log_std");
  }
  std::array<Matrix<T>*, kTensorCount> tensors() {
    std::array<Matrix<T>*, kTensorCount> out{};
    const auto t = net.tensors();
    std::copy(t.begin(), t.end(), out.begin());
    out.back() = &log_std;
    return out;
  }
  std::array<const Matrix<T>*, kTensorCount> tensors() const {
    std::array<const Matrix<T>*, kTensorCount> out{};
    const auto t = net.tensors();
    std::copy(t.begin(), t.end(), out.begin());
    out.back() = &log_std;
    return out;
  }
};

/// Critic: same trunk shape, scalar head.
template <typename T>
struct ValueParams {
  Trunk<T> net;

  static constexpr std::size_t kTensorCount = Trunk<T>::kTensorCount;

  static ValueParams zeros(const NetConfig& cfg) { return {Trunk<T>::zeros(cfg, 1)}; }
  static std::string name(std::size_t i) { return std::string(Trunk<T>::kNames[i]); }
  std::array<Matrix<T>*, kTensorCount> tensors() { return net.tensors(); }
  std::array<const Matrix<T>*, kTensorCount> tensors() const { return net.tensors(); }
};

// ---------------------------------------------------------------------------
// Generic parameter-set helpers

template <typename P>
P zeros_like(const P& p) {
  P out = p;
  for (auto* t : out.tensors()) t->setZero();
  return out;
}

template <typename P>
double squared_norm(const P& p) {
  double s = 0.0;
  for (const auto* t : p.tensors()) s += t->template cast<double>().squaredNorm();
  return s;
}

template <typename P>
void scale(P& p, double factor) {
  for (auto* t : p.tensors()) *t *= static_cast<typename std::remove_pointer_t<decltype(t)>::Scalar>(factor);
}

template <typename P>
bool all_finite(const P& p) {
  for (const auto* t : p.tensors())
    if (!t->allFinite()) return false;
  return true;
}

template <typename P>
std::size_t parameter_count(const P& p) {
  std::size_t n = 0;
  for (const auto* t : p.tensors()) n += static_cast<std::size_t>(t->size());
  return n;
}

template <typename U, typename T>
Trunk<U> cast(const Trunk<T>& t) {
  Trunk<U> out;
  auto dst = out.tensors();
  auto src = t.tensors();
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] = src[i]->template cast<U>();
  return out;
}
template <typename U, typename T>
PolicyParams<U> cast(const PolicyParams<T>& p) {
  return {cast<U>(p.net), p.log_std.template cast<U>()};
}
template <typename U, typename T>
ValueParams<U> cast(const ValueParams<T>& p) {
  return {cast<U>(p.net)};
}

template <typename P>
bool bit_equal(const P& a, const P& b) {
  const auto ta = a.tensors();
  const auto tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i]->rows() != tb[i]->rows() || ta[i]->cols() != tb[i]->cols()) return false;
    if (std::memcmp(ta[i]->data(), tb[i]->data(), sizeof(*ta[i]->data()) * static_cast<std::size_t>(ta[i]->size())) != 0)
      return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

template <typename T>
void fill_uniform(Matrix<T>& m, double bound, Rng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
}

/// He-uniform weights, fan-in-scaled biases; the head is scaled down so the
/// initial outputs sit near the centre of the squashing ranges.
template <typename T>
Trunk<T> init_trunk(const NetConfig& cfg, int outputs, double head_gain, Rng& rng) {
  Trunk<T> t = Trunk<T>::zeros(cfg, outputs);
  auto layer = [&](Matrix<T>& w, Matrix<T>& b, int fan_in, double gain) {
    fill_uniform(w, gain * std::sqrt(6.0 / fan_in), rng);
    fill_uniform(b, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
  };
  layer(t.conv1_w, t.conv1_b, cfg.conv1_kernel * kScanFrames, 1.0);
  layer(t.conv2_w, t.conv2_b, cfg.conv2_kernel * cfg.conv1_filters, 1.0);
  layer(t.fc1_w, t.fc1_b, cfg.flat_dim(), 1.0);
  layer(t.fc2_w, t.fc2_b, cfg.fc1 + kExtraDims, 1.0);
  layer(t.head_w, t.head_b, cfg.fc2, head_gain);
  return t;
}

}  // namespace detail

inline constexpr double kInitialLogStd = -0.5;

template <typename T = float>
std::pair<PolicyParams<T>, ValueParams<T>> init_params(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng policy_rng(derive_seed(seed, 0xac7));
  Rng value_rng(derive_seed(seed, 0xc417));
  PolicyParams<T> policy{detail::init_trunk<T>(cfg, kActionDims, 0.01, policy_rng),
                         Matrix<T>::Constant(1, kActionDims, static_cast<T>(kInitialLogStd))};
  ValueParams<T> value{detail::init_trunk<T>(cfg, 1, 1.0, value_rng)};
  return {std::move(policy), std::move(value)};
}

// ---------------------------------------------------------------------------
// Forward / backward

/// Activations retained by a forward pass for the matching backward pass.
template <typename T>
struct ForwardCache {
  Eigen::Index batch = 0;
  bool valid = false;
  Matrix<T> patches1;  // [B*L1, k1*3]
  Matrix<T> act1;      // [B*L1, F1] post-ReLU
  Matrix<T> patches2;  // [B*L2, k2*F1]
  Matrix<T> act2;      // [B*L2, F2] post-ReLU; row-major so it doubles as [B, L2*F2]
  Matrix<T> h1;        // [B, fc1]
  Matrix<T> in2;       // [B, fc1 + 4]
  Matrix<T> h2;        // [B, fc2]
  Matrix<T> out;       // [B, outputs] before squashing
};

namespace detail {

template <typename T>
auto relu_mask(const Matrix<T>& m) {
  return (m.array() > T(0)).template cast<T>();
}

}  // namespace detail

/// Runs the trunk on a batch of normalized flat observations [B, obs_dim].
template <typename T>
void trunk_forward(const Trunk<T>& p, const NetConfig& cfg, const std::type_identity_t<Matrix<T>>& obs,
                   ForwardCache<T>& c) {
  using Eigen::Index;
  if (obs.cols() != cfg.obs_dim())
    throw ContractViolation("network input has " + std::to_string(obs.cols()) + " columns, expected " +
                            std::to_string(cfg.obs_dim()));
  if (p.conv1_w.rows() != cfg.conv1_kernel * kScanFrames || p.fc1_w.rows() != cfg.flat_dim())
    throw ContractViolation("network parameters do not match the configuration");
  const Index B = obs.rows();
  const Index nb = cfg.n_beams, L1 = cfg.conv1_length(), L2 = cfg.conv2_length();
  const Index k1 = cfg.conv1_kernel, s1 = cfg.conv1_stride, k2 = cfg.conv2_kernel, s2 = cfg.conv2_stride;
  const Index F1 = cfg.conv1_filters, F2 = cfg.conv2_filters;
  c.batch = B;

  c.patches1.resize(B * L1, k1 * kScanFrames);
  for (Index b = 0; b < B; ++b) {
    const T* row = obs.row(b).data();
    for (Index q = 0; q < L1; ++q) {
      T* dst = c.patches1.row(b * L1 + q).data();
      for (Index j = 0; j < k1; ++j)
        for (Index f = 0; f < kScanFrames; ++f) dst[j * kScanFrames + f] = row[f * nb + q * s1 + j];
    }
  }
  c.act1.noalias() = c.patches1 * p.conv1_w;
  c.act1.rowwise() += p.conv1_b.row(0);
  c.act1 = c.act1.cwiseMax(T(0));

  c.patches2.resize(B * L2, k2 * F1);
  for (Index b = 0; b < B; ++b)
    for (Index q = 0; q < L2; ++q)
      c.patches2.row(b * L2 + q) =
          Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(c.act1.row(b * L1 + q * s2).data(), k2 * F1);
  c.act2.noalias() = c.patches2 * p.conv2_w;
  c.act2.rowwise() += p.conv2_b.row(0);
  c.act2 = c.act2.cwiseMax(T(0));

  const Eigen::Map<const Matrix<T>> flat(c.act2.data(), B, L2 * F2);
  c.h1.noalias() = flat * p.fc1_w;
  c.h1.rowwise() += p.fc1_b.row(0);
  c.h1 = c.h1.cwiseMax(T(0));

  c.in2.resize(B, cfg.fc1 + kExtraDims);
  c.in2.leftCols(cfg.fc1) = c.h1;
  c.in2.rightCols(kExtraDims) = obs.rightCols(kExtraDims);
  c.h2.noalias() = c.in2 * p.fc2_w;
  c.h2.rowwise() += p.fc2_b.row(0);
  c.h2 = c.h2.cwiseMax(T(0));

  c.out.noalias() = c.h2 * p.head_w;
  c.out.rowwise() += p.head_b.row(0);
  c.valid = true;
}

/// Gradients of sum(d_out .* out) w.r.t. every trunk tensor.
template <typename T>
Trunk<T> trunk_backward(const Trunk<T>& p, const NetConfig& cfg, const ForwardCache<T>& c,
                        const std::type_identity_t<Matrix<T>>& d_out) {
  using Eigen::Index;
  if (!c.valid) throw ContractViolation("backward called without a forward cache");
  if (d_out.rows() != c.batch || d_out.cols() != p.head_w.cols())
    throw ContractViolation("backward: output gradient shape does not match the cached forward pass");
  const Index B = c.batch;
  const Index L1 = cfg.conv1_length(), L2 = cfg.conv2_length();
  const Index k2 = cfg.conv2_kernel, s2 = cfg.conv2_stride;
  const Index F1 = cfg.conv1_filters, F2 = cfg.conv2_filters;

  Trunk<T> g;
  g.head_w.noalias() = c.h2.transpose() * d_out;
  g.head_b = d_out.colwise().sum();

  Matrix<T> dh2 = (d_out * p.head_w.transpose()).cwiseProduct(detail::relu_mask(c.h2).matrix());
  g.fc2_w.noalias() = c.in2.transpose() * dh2;
  g.fc2_b = dh2.colwise().sum();

  Matrix<T> din2 = dh2 * p.fc2_w.transpose();
  Matrix<T> dh1 = din2.leftCols(cfg.fc1).cwiseProduct(detail::relu_mask(c.h1).matrix());
  const Eigen::Map<const Matrix<T>> flat(c.act2.data(), B, L2 * F2);
  g.fc1_w.noalias() = flat.transpose() * dh1;
  g.fc1_b = dh1.colwise().sum();

  Matrix<T> dflat = dh1 * p.fc1_w.transpose();
  Eigen::Map<Matrix<T>> dz2(dflat.data(), B * L2, F2);
  dz2.array() *= detail::relu_mask(c.act2);
  g.conv2_w.noalias() = c.patches2.transpose() * dz2;
  g.conv2_b = dz2.colwise().sum();

  Matrix<T> dpatches2 = dz2 * p.conv2_w.transpose();
  Matrix<T> dz1 = Matrix<T>::Zero(B * L1, F1);
  for (Index b = 0; b < B; ++b)
    for (Index q = 0; q < L2; ++q)
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(dz1.row(b * L1 + q * s2).data(), k2 * F1) +=
          dpatches2.row(b * L2 + q);
  dz1.array() *= detail::relu_mask(c.act1);
  g.conv1_w.noalias() = c.patches1.transpose() * dz1;
  g.conv1_b = dz1.colwise().sum();
  return g;
}

template <typename T>
T logistic(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

/// Mean action [B, 2]: logistic on v, tanh on w.
template <typename T>
Matrix<T> squash_mean(const Matrix<T>& out) {
  Matrix<T> mean(out.rows(), kActionDims);
  for (Eigen::Index b = 0; b < out.rows(); ++b) {
    mean(b, 0) = logistic(out(b, 0));
    mean(b, 1) = std::tanh(out(b, 1));
  }
  return mean;
}

template <typename T>
Matrix<T> policy_forward(const PolicyParams<T>& params, const NetConfig& cfg, const std::type_identity_t<Matrix<T>>& obs,
                         ForwardCache<T>* cache = nullptr) {
  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  trunk_forward(params.net, cfg, obs, c);
  return squash_mean(c.out);
}

/// Returns [B, 1].
template <typename T>
Matrix<T> value_forward(const ValueParams<T>& params, const NetConfig& cfg, const std::type_identity_t<Matrix<T>>& obs,
                        ForwardCache<T>* cache = nullptr) {
  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  trunk_forward(params.net, cfg, obs, c);
  return c.out;
}

/// Gradients given d(loss)/d(mean action) [B, 2] and d(loss)/d(log_std) [1, 2].
template <typename T>
PolicyParams<T> policy_backward(const PolicyParams<T>& params, const NetConfig& cfg, const ForwardCache<T>& cache,
                                const std::type_identity_t<Matrix<T>>& d_mean,
                                const std::type_identity_t<Matrix<T>>& d_log_std) {
  if (!cache.valid) throw ContractViolation("backward called without a forward cache");
  if (d_mean.rows() != cache.batch || d_mean.cols() != kActionDims || d_log_std.size() != kActionDims)
    throw ContractViolation("policy backward: gradient shapes do not match");
  Matrix<T> d_out(cache.batch, kActionDims);
  for (Eigen::Index b = 0; b < cache.batch; ++b) {
    const T s = logistic(cache.out(b, 0));
    const T th = std::tanh(cache.out(b, 1));
    d_out(b, 0) = d_mean(b, 0) * s * (T(1) - s);
    d_out(b, 1) = d_mean(b, 1) * (T(1) - th * th);
  }
  PolicyParams<T> g;
  g.net = trunk_backward(params.net, cfg, cache, d_out);
  g.log_std = d_log_std;
  return g;
}

template <typename T>
ValueParams<T> value_backward(const ValueParams<T>& params, const NetConfig& cfg, const ForwardCache<T>& cache,
                              const std::type_identity_t<Matrix<T>>& d_value) {
  return {trunk_backward(params.net, cfg, cache, d_value)};
}

// ---------------------------------------------------------------------------
// Diagonal Gaussian

inline const double kLog2Pi = std::log(2.0 * std::numbers::pi);

/// Diagonal-Gaussian log density of `x`.
template <typename T>
T gaussian_log_prob(std::span<const T> mean, std::span<const T> log_std, std::span<const T> x) {
  T lp = T(0);
  for (std::size_t d = 0; d < mean.size(); ++d) {
    const T z = (x[d] - mean[d]) / std::exp(log_std[d]);
    lp += T(-0.5) * z * z - log_std[d] - T(0.5 * kLog2Pi);
  }
  return lp;
}

/// Gradient of gaussian_log_prob w.r.t. the mean and the log-std.
template <typename T>
void gaussian_log_prob_grad(std::span<const T> mean, std::span<const T> log_std, std::span<const T> x,
                            std::span<T> d_mean, std::span<T> d_log_std) {
  for (std::size_t d = 0; d < mean.size(); ++d) {
    const T var = std::exp(T(2) * log_std[d]);
    const T diff = x[d] - mean[d];
    d_mean[d] = diff / var;
    d_log_std[d] = diff * diff / var - T(1);
  }
}

template <typename T>
T gaussian_entropy(std::span<const T> log_std) {
  T h = T(0);
  for (T ls : log_std) h += ls + T(0.5 * (kLog2Pi + 1.0));
  return h;
}

struct LogProbEntropy {
  double log_prob = 0.0;
  double entropy = 0.0;
};

inline LogProbEntropy log_prob_and_entropy(std::span<const double> mean, std::span<const double> log_std,
                                           std::span<const double> action_pre_clamp) {
  return {gaussian_log_prob(mean, log_std, action_pre_clamp), gaussian_entropy(log_std)};
}

struct ActionSample {
  std::array<double, 2> pre_clamp{};
  Action action;
  double log_prob = 0.0;
};

/// a = mean + exp(log_std) * eps, clamped to the action box; the log-prob is of
/// the unclamped sample.
inline ActionSample sample_action(std::span<const double> mean, std::span<const double> log_std, Rng& rng) {
  require(mean.size() == kActionDims && log_std.size() == kActionDims, "sample_action: expected 2-d inputs");
  ActionSample s;
  for (std::size_t d = 0; d < kActionDims; ++d) s.pre_clamp[d] = mean[d] + std::exp(log_std[d]) * rng.normal();
  s.action = clamp_action({s.pre_clamp[0], s.pre_clamp[1]});
  s.log_prob = gaussian_log_prob<double>(mean, log_std, s.pre_clamp);
  return s;
}

}  // namespace crowdnav
