#pragma once

#include <cmath>
#include <cstdint>

#include "crowdnav/errors.hpp"
#include "crowdnav/policy_net.hpp"

namespace crowdnav {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moments mirroring a parameter set.
template <typename P>
struct AdamState {
  P m;
  P v;
  std::uint64_t step = 0;

  static AdamState like(const P& params) { return {zeros_like(params), zeros_like(params), 0}; }
};

/// One bias-corrected Adam step.
template <typename P>
void adam_step(AdamState<P>& adam, P& params, const P& grads, double lr, const AdamConfig& cfg = {}) {
  auto pt = params.tensors();
  auto gt = grads.tensors();
  auto mt = adam.m.tensors();
  auto vt = adam.v.tensors();
  for (std::size_t i = 0; i < pt.size(); ++i) {
    if (pt[i]->rows() != gt[i]->rows() || pt[i]->cols() != gt[i]->cols() || mt[i]->size() != pt[i]->size())
      throw ContractViolation("adam_step: shape mismatch in tensor " + P::name(i));
  }
  ++adam.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.step));
  for (std::size_t i = 0; i < pt.size(); ++i) {
    using T = typename std::remove_cvref_t<decltype(*pt[i])>::Scalar;
    auto& p = *pt[i];
    const auto& g = *gt[i];
    auto& m = *mt[i];
    auto& v = *vt[i];
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      const double gk = static_cast<double>(g.data()[k]);
      const double mk = cfg.beta1 * static_cast<double>(m.data()[k]) + (1.0 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * static_cast<double>(v.data()[k]) + (1.0 - cfg.beta2) * gk * gk;
      m.data()[k] = static_cast<T>(mk);
      v.data()[k] = static_cast<T>(vk);
      const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + cfg.epsilon);
      p.data()[k] = static_cast<T>(static_cast<double>(p.data()[k]) - update);
    }
  }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns the pre-clip norm.
template <typename P>
double clip_grad_norm(P& grads, double max_norm) {
  const double n = std::sqrt(squared_norm(grads));
  if (max_norm > 0.0 && n > max_norm) scale(grads, max_norm / (n + 1e-12));
  return n;
}

}  // namespace crowdnav
