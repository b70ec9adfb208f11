#pragma once

#include <array>
#include <cstdint>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

#include <Eigen/Core>

#include "crowdnav/mdp.hpp"
#include "crowdnav/policy_net.hpp"
#include "crowdnav/ppo.hpp"
#include "crowdnav/rng.hpp"
#include "crowdnav/scenarios.hpp"
#include "crowdnav/sim_core.hpp"

namespace crowdnav {

/// Outcome counts for episodes that ended during some window.
struct EpisodeStats {
  int episodes = 0;
  int arrivals = 0;
  int collisions = 0;
  int timeouts = 0;
  double reward_sum = 0.0;

  void record(Event e, double episode_reward) {
    ++episodes;
    arrivals += e == Event::Arrival;
    collisions += e == Event::Collision;
    timeouts += e == Event::Timeout;
    reward_sum += episode_reward;
  }
  void merge(const EpisodeStats& o) {
    episodes += o.episodes;
    arrivals += o.arrivals;
    collisions += o.collisions;
    timeouts += o.timeouts;
    reward_sum += o.reward_sum;
  }
  double mean_reward() const { return episodes ? reward_sum / episodes : 0.0; }
  double success_rate() const { return episodes ? static_cast<double>(arrivals) / episodes : 0.0; }
  double collision_rate() const { return episodes ? static_cast<double>(collisions) / episodes : 0.0; }
};

/// Per-robot episode bookkeeping that lives outside the World.
struct RobotSlot {
  ScanHistory history;
  std::uint64_t episode_tick = 0;
  double episode_reward = 0.0;
};

/// A world under continuous collection: robots respawn as soon as they finish.
struct WorldRunner {
  ScenarioSpec spec;
  World world;
  Rng rng;
  std::vector<RobotSlot> slots;

  static WorldRunner start(ScenarioSpec spec, World world, std::uint64_t rng_seed, const LidarSpec& lidar) {
    WorldRunner r{std::move(spec), std::move(world), Rng(rng_seed), {}};
    r.slots.resize(r.world.robots.size());
    for (std::size_t i = 0; i < r.slots.size(); ++i) r.sense(i, lidar);
    return r;
  }

  void sense(std::size_t i, const LidarSpec& lidar) {
    std::vector<double> ranges(static_cast<std::size_t>(lidar.n_beams));
    cast_scan(world, i, lidar, ranges);
    slots[i].history.push(std::vector<float>(ranges.begin(), ranges.end()));
  }
};

struct RolloutSettings {
  NetConfig net;
  LidarSpec lidar;
  RewardConfig reward;
  std::uint64_t horizon = 400;
  int rollout_length = 256;
  int threads = 1;
};

/// Replaces the sampled pre-clamp action of (world, robot); used for scripted tests.
using ActionOverride = std::function<std::array<double, 2>(const World&, std::size_t)>;

struct RolloutResult {
  RolloutBatch batch;
  EpisodeStats stats;
};

/// Network inputs for every robot of a world: raw rows and normalized rows.
inline void observe_world(const World& world, const std::vector<RobotSlot>& slots, const RunningNormalizer& normalizer,
                          Matrix<float>& raw, Matrix<float>& normalized) {
  const auto n = static_cast<Eigen::Index>(world.robots.size());
  const auto dim = static_cast<Eigen::Index>(normalizer.dim());
  raw.resize(n, dim);
  normalized.resize(n, dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Observation obs = assemble_observation(world, static_cast<std::size_t>(i), slots[static_cast<std::size_t>(i)].history);
    require(static_cast<Eigen::Index>(obs.dim()) == dim, "observation size does not match the normalizer");
    std::span<float> raw_row(raw.row(i).data(), static_cast<std::size_t>(dim));
    obs.flatten(raw_row);
    normalizer.apply<float, float>(raw_row, std::span<float>(normalized.row(i).data(), static_cast<std::size_t>(dim)));
  }
}

namespace detail {

/// Robot-major rollout of a single world: row = robot * T + tick.
inline RolloutResult collect_world(WorldRunner& runner, const PolicyParams<float>& policy,
                                   const ValueParams<float>& value, const RunningNormalizer& normalizer,
                                   const RolloutSettings& s, const ActionOverride& override_action) {
  const std::size_t R = runner.world.robots.size();
  const std::size_t T = static_cast<std::size_t>(s.rollout_length);
  const auto N = static_cast<Eigen::Index>(R * T);
  const auto D = static_cast<Eigen::Index>(normalizer.dim());
  RolloutResult out;
  RolloutBatch& b = out.batch;
  b.obs_dim = static_cast<std::size_t>(D);
  b.obs.resize(N, D);
  b.raw_obs.resize(N, D);
  b.actions.resize(N, kActionDims);
  b.log_probs.assign(R * T, 0.0);
  b.rewards.assign(R * T, 0.0);
  b.values.assign(R * T, 0.0);
  b.terminal.assign(R * T, 0);
  b.events.assign(R * T, Event::None);

  const std::array<double, 2> log_std{static_cast<double>(policy.log_std(0, 0)), static_cast<double>(policy.log_std(0, 1))};
  Matrix<float> raw, normalized;
  std::vector<Action> actions(R);
  for (std::size_t t = 0; t < T; ++t) {
    observe_world(runner.world, runner.slots, normalizer, raw, normalized);
    const Matrix<float> mean = policy_forward(policy, s.net, normalized);
    const Matrix<float> v = value_forward(value, s.net, normalized);
    for (std::size_t i = 0; i < R; ++i) {
      const auto row = static_cast<Eigen::Index>(i * T + t);
      const auto ii = static_cast<Eigen::Index>(i);
      const std::array<double, 2> mu{static_cast<double>(mean(ii, 0)), static_cast<double>(mean(ii, 1))};
      ActionSample smp;
      if (override_action) {
        smp.pre_clamp = override_action(runner.world, i);
        smp.action = clamp_action({smp.pre_clamp[0], smp.pre_clamp[1]});
        smp.log_prob = gaussian_log_prob<double>(mu, log_std, smp.pre_clamp);
      } else {
        smp = sample_action(mu, log_std, runner.rng);
      }
      actions[i] = smp.action;
      b.obs.row(row) = normalized.row(ii);
      b.raw_obs.row(row) = raw.row(ii);
      b.actions(row, 0) = smp.pre_clamp[0];
      b.actions(row, 1) = smp.pre_clamp[1];
      b.log_probs[static_cast<std::size_t>(row)] = smp.log_prob;
      b.values[static_cast<std::size_t>(row)] = static_cast<double>(v(ii, 0));
    }

    World next = world_step(runner.world, actions);
    const auto collided = detect_collisions(next);
    std::vector<std::size_t> finished;
    for (std::size_t i = 0; i < R; ++i) {
      const std::size_t row = i * T + t;
      RobotSlot& slot = runner.slots[i];
      ++slot.episode_tick;
      const StepOutcome o =
          step_outcome(runner.world.robots[i], next.robots[i], collided[i] != 0, slot.episode_tick, s.horizon, s.reward);
      b.rewards[row] = o.reward;
      b.terminal[row] = o.terminal;
      b.events[row] = o.event;
      slot.episode_reward += o.reward;
      if (o.terminal) {
        out.stats.record(o.event, slot.episode_reward);
        next.robots[i].status = status_for(o.event);
        finished.push_back(i);
      }
    }
    for (std::size_t i : finished) {
      next = respawn(runner.spec, std::move(next), i, runner.rng);
      runner.slots[i] = RobotSlot{};
    }
    runner.world = std::move(next);
    for (std::size_t i = 0; i < R; ++i) runner.sense(i, s.lidar);
  }

  observe_world(runner.world, runner.slots, normalizer, raw, normalized);
  const Matrix<float> tail = value_forward(value, s.net, normalized);
  for (std::size_t i = 0; i < R; ++i)
    b.segments.push_back({i * T, T, static_cast<double>(tail(static_cast<Eigen::Index>(i), 0))});
  return out;
}

inline void append(RolloutBatch& dst, const RolloutBatch& src) {
  const std::size_t base = dst.size();
  dst.obs_dim = src.obs_dim;
  auto stack = [&](auto& a, const auto& b) {
    using M = std::decay_t<decltype(a)>;
    M merged(a.rows() + b.rows(), b.cols());
    if (a.rows() > 0) merged.topRows(a.rows()) = a;
    merged.bottomRows(b.rows()) = b;
    a = std::move(merged);
  };
  stack(dst.obs, src.obs);
  stack(dst.raw_obs, src.raw_obs);
  stack(dst.actions, src.actions);
  dst.log_probs.insert(dst.log_probs.end(), src.log_probs.begin(), src.log_probs.end());
  dst.rewards.insert(dst.rewards.end(), src.rewards.begin(), src.rewards.end());
  dst.values.insert(dst.values.end(), src.values.begin(), src.values.end());
  dst.terminal.insert(dst.terminal.end(), src.terminal.begin(), src.terminal.end());
  dst.events.insert(dst.events.end(), src.events.begin(), src.events.end());
  for (Segment seg : src.segments) {
    seg.begin += base;
    dst.segments.push_back(seg);
  }
}

}  // namespace detail

/// Steps every world `rollout_length` ticks with the current policy and pools
/// the transitions in (world, robot, tick) order. Worlds are independent, so
/// with `threads > 1` they are collected concurrently with identical results.
inline RolloutResult collect_rollouts(std::vector<WorldRunner>& runners, const PolicyParams<float>& policy,
                                      const ValueParams<float>& value, const RunningNormalizer& normalizer,
                                      const RolloutSettings& settings, const ActionOverride& override_action = {}) {
  std::vector<RolloutResult> parts(runners.size());
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(settings.threads, 1)), runners.size());
  if (threads <= 1) {
    for (std::size_t w = 0; w < runners.size(); ++w)
      parts[w] = detail::collect_world(runners[w], policy, value, normalizer, settings, override_action);
  } else {
    Eigen::initParallel();
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < threads; ++k) {
      pool.emplace_back([&, k] {
        try {
          for (std::size_t w = k; w < runners.size(); w += threads)
            parts[w] = detail::collect_world(runners[w], policy, value, normalizer, settings, override_action);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  RolloutResult result;
  for (const auto& p : parts) {
    detail::append(result.batch, p.batch);
    result.stats.merge(p.stats);
  }
  return result;
}

}  // namespace crowdnav
