#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "crowdnav/errors.hpp"
#include "crowdnav/mdp.hpp"
#include "crowdnav/optim.hpp"
#include "crowdnav/policy_net.hpp"
#include "crowdnav/rng.hpp"

namespace crowdnav {

struct PPOConfig {
  double gamma = 0.99;
  double lambda = 0.95;
  double clip_epsilon = 0.2;
  int epochs = 4;
  int minibatch_size = 1024;
  double lr_policy = 3e-4;
  double lr_value = 3e-4;
  double grad_norm_clip = 5.0;
  int rollout_length = 256;
  double entropy_coeff = 0.0;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("ppo.gamma must lie in (0, 1]");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("ppo.lambda must lie in [0, 1]");
    if (!(clip_epsilon > 0.0)) throw ConfigError("ppo.clip_epsilon must be positive");
    if (epochs < 0) throw ConfigError("ppo.epochs must be non-negative");
    if (minibatch_size < 1) throw ConfigError("ppo.minibatch_size must be positive");
    if (rollout_length < 1) throw ConfigError("ppo.rollout_length must be positive");
    if (!(lr_policy >= 0.0 && lr_value >= 0.0)) throw ConfigError("ppo learning rates must be non-negative");
  }
  friend bool operator==(const PPOConfig&, const PPOConfig&) = default;
};

/// A contiguous run of one robot slot's transitions. The bootstrap value is
/// used when the last transition is not terminal.
struct Segment {
  std::size_t begin = 0;
  std::size_t length = 0;
  double bootstrap_value = 0.0;
};

/// Pooled transitions of one iteration, ordered by (world, robot, tick).
struct RolloutBatch {
  std::size_t obs_dim = 0;
  Matrix<float> obs;      // normalized, [N, obs_dim]
  Matrix<float> raw_obs;  // as sensed, [N, obs_dim]
  Matrix<double> actions; // pre-clamp samples, [N, 2]
  std::vector<double> log_probs;
  std::vector<double> rewards;
  std::vector<double> values;
  std::vector<std::uint8_t> terminal;
  std::vector<Event> events;
  std::vector<Segment> segments;
  std::vector<double> advantages;
  std::vector<double> returns;

  std::size_t size() const { return rewards.size(); }
};

/// GAE over one trajectory slice. Done flags cut both the bootstrap and the trace.
inline void gae(std::span<const double> rewards, std::span<const double> values, std::span<const std::uint8_t> dones,
                double bootstrap_value, double gamma, double lambda, std::span<double> advantages) {
  const std::size_t n = rewards.size();
  require(values.size() == n && dones.size() == n && advantages.size() == n, "gae: length mismatch");
  double next_adv = 0.0;
  double next_value = bootstrap_value;
  for (std::size_t k = n; k-- > 0;) {
    const double live = dones[k] ? 0.0 : 1.0;
    const double delta = rewards[k] + gamma * next_value * live - values[k];
    next_adv = delta + gamma * lambda * live * next_adv;
    advantages[k] = next_adv;
    next_value = values[k];
  }
}

/// Shifts and scales to mean 0, population std 1 (centring only when the spread is zero).
inline void normalize_advantages(std::span<double> adv) {
  if (adv.empty()) return;
  const double n = static_cast<double>(adv.size());
  const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / n);
  for (double& a : adv) a = sd > 0.0 ? (a - mean) / sd : 0.0;
}

/// Fills advantages and returns (= raw advantage + value) per segment, then
/// normalizes the advantages over the whole batch.
inline void compute_gae(RolloutBatch& batch, const PPOConfig& cfg, bool normalize = true) {
  const std::size_t n = batch.size();
  require(batch.values.size() == n && batch.terminal.size() == n, "compute_gae: batch arrays disagree");
  batch.advantages.assign(n, 0.0);
  batch.returns.assign(n, 0.0);
  std::size_t covered = 0;
  for (const Segment& s : batch.segments) {
    require(s.begin + s.length <= n, "compute_gae: segment out of range");
    gae(std::span(batch.rewards).subspan(s.begin, s.length), std::span(batch.values).subspan(s.begin, s.length),
        std::span(batch.terminal).subspan(s.begin, s.length), s.bootstrap_value, cfg.gamma, cfg.lambda,
        std::span(batch.advantages).subspan(s.begin, s.length));
    covered += s.length;
  }
  require(covered == n, "compute_gae: segments do not cover the batch");
  for (std::size_t i = 0; i < n; ++i) batch.returns[i] = batch.advantages[i] + batch.values[i];
  if (normalize) normalize_advantages(batch.advantages);
}

/// Actor, critic and their optimizer state.
struct ActorCritic {
  PolicyParams<float> policy;
  ValueParams<float> value;
  AdamState<PolicyParams<float>> policy_adam;
  AdamState<ValueParams<float>> value_adam;

  static ActorCritic create(const NetConfig& cfg, std::uint64_t seed) {
    auto [policy, value] = init_params<float>(cfg, seed);
    ActorCritic ac{std::move(policy), std::move(value), {}, {}};
    ac.policy_adam = AdamState<PolicyParams<float>>::like(ac.policy);
    ac.value_adam = AdamState<ValueParams<float>>::like(ac.value);
    return ac;
  }
};

struct LossStats {
  double initial_policy_loss = 0.0;  // first minibatch, before any update
  double policy_loss = 0.0;          // mean over minibatches
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  int minibatches = 0;
};

/// Per-sample clipped surrogate objective min(rho*A, clip(rho)*A).
inline double clipped_objective(double ratio, double advantage, double clip_epsilon) {
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage);
}

namespace detail {

inline Matrix<float> gather_rows(const Matrix<float>& m, std::span<const std::size_t> idx) {
  Matrix<float> out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

struct SurrogateTerms {
  double loss = 0.0;
  double entropy = 0.0;
  double kl = 0.0;
  double clipped = 0.0;
  Matrix<float> d_mean;
  Matrix<float> d_log_std;
};

/// Loss and gradients w.r.t. the mean action and log-std over one minibatch.
inline SurrogateTerms surrogate(const Matrix<float>& mean, const Matrix<float>& log_std, const RolloutBatch& batch,
                                std::span<const std::size_t> idx, const PPOConfig& cfg) {
  const std::size_t B = idx.size();
  const double inv_b = 1.0 / static_cast<double>(B);
  const std::array<double, 2> ls{static_cast<double>(log_std(0, 0)), static_cast<double>(log_std(0, 1))};
  SurrogateTerms t;
  t.d_mean = Matrix<float>::Zero(static_cast<Eigen::Index>(B), kActionDims);
  std::array<double, 2> d_ls{0.0, 0.0};
  t.entropy = gaussian_entropy<double>(ls);
  for (std::size_t i = 0; i < B; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const std::size_t k = idx[i];
    const std::array<double, 2> mu{static_cast<double>(mean(r, 0)), static_cast<double>(mean(r, 1))};
    const std::array<double, 2> a{batch.actions(static_cast<Eigen::Index>(k), 0), batch.actions(static_cast<Eigen::Index>(k), 1)};
    const double logp = gaussian_log_prob<double>(mu, ls, a);
    const double log_ratio = logp - batch.log_probs[k];
    const double ratio = std::exp(log_ratio);
    const double adv = batch.advantages[k];
    const double unclipped = ratio * adv;
    const double clipped = std::clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * adv;
    t.loss -= std::min(unclipped, clipped) * inv_b;
    t.kl -= log_ratio * inv_b;
    if (std::abs(ratio - 1.0) > cfg.clip_epsilon) t.clipped += inv_b;
    // The min picks the unclipped branch on ties; the clipped branch has no gradient.
    const double g = unclipped <= clipped ? -ratio * adv * inv_b : 0.0;
    std::array<double, 2> dm{}, dl{};
    gaussian_log_prob_grad<double>(mu, ls, a, dm, dl);
    for (std::size_t d = 0; d < kActionDims; ++d) {
      t.d_mean(r, static_cast<Eigen::Index>(d)) = static_cast<float>(g * dm[d]);
      d_ls[d] += g * dl[d];
    }
  }
  t.loss -= cfg.entropy_coeff * t.entropy;
  t.d_log_std = Matrix<float>(1, kActionDims);
  for (int d = 0; d < kActionDims; ++d)
    t.d_log_std(0, d) = static_cast<float>(d_ls[static_cast<std::size_t>(d)] - cfg.entropy_coeff);
  return t;
}

}  // namespace detail

/// Clipped-surrogate policy loss of the current policy over the whole batch,
/// evaluated in minibatch-sized chunks in storage order.
inline double surrogate_loss(const PolicyParams<float>& policy, const NetConfig& net, const RolloutBatch& batch,
                             const PPOConfig& cfg) {
  const std::size_t n = batch.size();
  require(batch.advantages.size() == n, "surrogate_loss: advantages missing");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  double loss = 0.0;
  const std::size_t mb = static_cast<std::size_t>(cfg.minibatch_size);
  for (std::size_t off = 0; off < n; off += mb) {
    const auto chunk = std::span<const std::size_t>(idx).subspan(off, std::min(mb, n - off));
    const Matrix<float> obs = detail::gather_rows(batch.obs, chunk);
    const Matrix<float> mean = policy_forward(policy, net, obs);
    loss += detail::surrogate(mean, policy.log_std, batch, chunk, cfg).loss * static_cast<double>(chunk.size());
  }
  return loss / static_cast<double>(n);
}

/// Clipped-surrogate PPO with a separate MSE critic; each network's gradient
/// is norm-clipped and applied with its own Adam state. Minibatch order is
/// a pure function of `shuffle_seed`.
inline LossStats ppo_update(ActorCritic& ac, const RolloutBatch& batch, const NetConfig& net, const PPOConfig& cfg,
                            std::uint64_t shuffle_seed) {
  const std::size_t n = batch.size();
  require(batch.advantages.size() == n && batch.returns.size() == n, "ppo_update: run compute_gae first");
  LossStats stats;
  if (n == 0 || cfg.epochs == 0) return stats;
  const std::size_t mb = static_cast<std::size_t>(cfg.minibatch_size);
  std::vector<std::size_t> order(n);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(shuffle_seed, 0x5487, static_cast<std::uint64_t>(epoch)));
    shuffle(std::span(order), rng);
    for (std::size_t off = 0; off < n; off += mb) {
      const auto idx = std::span<const std::size_t>(order).subspan(off, std::min(mb, n - off));
      const auto B = static_cast<Eigen::Index>(idx.size());
      const Matrix<float> obs = detail::gather_rows(batch.obs, idx);

      ForwardCache<float> pcache;
      const Matrix<float> mean = policy_forward(ac.policy, net, obs, &pcache);
      const auto terms = detail::surrogate(mean, ac.policy.log_std, batch, idx, cfg);
      PolicyParams<float> pgrad = policy_backward(ac.policy, net, pcache, terms.d_mean, terms.d_log_std);

      ForwardCache<float> vcache;
      const Matrix<float> values = value_forward(ac.value, net, obs, &vcache);
      Matrix<float> d_value(B, 1);
      double vloss = 0.0;
      for (Eigen::Index i = 0; i < B; ++i) {
        const double err = static_cast<double>(values(i, 0)) - batch.returns[idx[static_cast<std::size_t>(i)]];
        vloss += err * err / static_cast<double>(B);
        d_value(i, 0) = static_cast<float>(2.0 * err / static_cast<double>(B));
      }
      ValueParams<float> vgrad = value_backward(ac.value, net, vcache, d_value);

      if (!std::isfinite(terms.loss) || !std::isfinite(vloss) || !all_finite(pgrad) || !all_finite(vgrad))
        throw TrainingError("non-finite PPO signal at epoch " + std::to_string(epoch) + ", minibatch offset " +
                            std::to_string(off) + " (policy loss " + std::to_string(terms.loss) + ", value loss " +
                            std::to_string(vloss) + ")");
      if (stats.minibatches == 0) stats.initial_policy_loss = terms.loss;
      stats.policy_loss += terms.loss;
      stats.value_loss += vloss;
      stats.entropy += terms.entropy;
      stats.approx_kl += terms.kl;
      stats.clip_fraction += terms.clipped;
      ++stats.minibatches;

      clip_grad_norm(pgrad, cfg.grad_norm_clip);
      clip_grad_norm(vgrad, cfg.grad_norm_clip);
      adam_step(ac.policy_adam, ac.policy, pgrad, cfg.lr_policy);
      adam_step(ac.value_adam, ac.value, vgrad, cfg.lr_value);
    }
  }
  const double m = static_cast<double>(stats.minibatches);
  stats.policy_loss /= m;
  stats.value_loss /= m;
  stats.entropy /= m;
  stats.approx_kl /= m;
  stats.clip_fraction /= m;
  return stats;
}

}  // namespace crowdnav
