#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "crowdnav/mdp.hpp"
#include "crowdnav/policy_net.hpp"
#include "crowdnav/rng.hpp"
#include "crowdnav/rollout.hpp"
#include "crowdnav/scenarios.hpp"
#include "crowdnav/sim_core.hpp"
#include "crowdnav/trainer.hpp"

namespace crowdnav {

/// Chooses commands for every robot slot of a world; entries for inactive robots are ignored.
class Controller {
 public:
  virtual ~Controller() = default;
  virtual void act(const World& world, const std::vector<RobotSlot>& slots, Rng& rng, std::span<Action> out) = 0;
};

/// The learned policy with a frozen normalizer. Mean actions when
/// deterministic, Gaussian samples otherwise.
class NeuralController : public Controller {
 public:
  NeuralController(PolicyParams<float> policy, NetConfig net, RunningNormalizer normalizer, bool deterministic)
      : policy_(std::move(policy)), net_(net), normalizer_(std::move(normalizer)), deterministic_(deterministic) {}

  void act(const World& world, const std::vector<RobotSlot>& slots, Rng& rng, std::span<Action> out) override {
    observe_world(world, slots, normalizer_, raw_, normalized_);
    const Matrix<float> mean = policy_forward(policy_, net_, normalized_);
    const std::array<double, 2> log_std{policy_.log_std(0, 0), policy_.log_std(0, 1)};
    for (std::size_t i = 0; i < out.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const std::array<double, 2> mu{mean(r, 0), mean(r, 1)};
      out[i] = deterministic_ ? clamp_action({mu[0], mu[1]}) : sample_action(mu, log_std, rng).action;
    }
  }

 private:
  PolicyParams<float> policy_;
  NetConfig net_;
  RunningNormalizer normalizer_;
  bool deterministic_;
  Matrix<float> raw_, normalized_;
};

/// Proportional go-to-goal baseline: turn toward the goal, slow down when misaligned or close.
class GoToGoalController : public Controller {
 public:
  void act(const World& world, const std::vector<RobotSlot>&, Rng&, std::span<Action> out) override {
    for (std::size_t i = 0; i < out.size(); ++i) {
      const auto [dist, angle] = goal_polar(world.robots[i]);
      out[i] = clamp_action({std::min(1.0, dist) * std::max(0.0, std::cos(angle)), 2.0 * angle});
    }
  }
};

class ZeroController : public Controller {
 public:
  void act(const World&, const std::vector<RobotSlot>&, Rng&, std::span<Action> out) override {
    std::fill(out.begin(), out.end(), Action{});
  }
};

struct EpisodeMetrics {
  Event outcome = Event::None;
  std::uint64_t steps = 0;
  double arrival_time = 0.0;  // steps * dt when arrived, else 0
  double path_length = 0.0;
  double cumulative_reward = 0.0;
  double straight_line = 0.0;  // start-to-goal distance
};

struct EvalSummary {
  std::string scenario;
  std::size_t episodes = 0;
  std::size_t arrivals = 0;
  std::size_t collisions = 0;
  std::size_t timeouts = 0;
  double success_rate = 0.0;
  double collision_rate = 0.0;
  double timeout_rate = 0.0;
  double mean_arrival_time = 0.0;
  double mean_reward = 0.0;
  std::vector<EpisodeMetrics> metrics;

  /// `key=value` pairs separated by single spaces.
  std::string line() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "scenario=%s episodes=%zu success_rate=%.6f collision_rate=%.6f timeout_rate=%.6f "
                  "mean_arrival_time=%.6f mean_reward=%.6f",
                  scenario.c_str(), episodes, success_rate, collision_rate, timeout_rate, mean_arrival_time, mean_reward);
    return buf;
  }
};

struct TrajectoryRecord {
  std::uint64_t tick = 0;
  std::uint32_t robot = 0;
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
  double v = 0.0;
  double w = 0.0;
  double reward = 0.0;
  Event event = Event::None;

  friend bool operator==(const TrajectoryRecord& a, const TrajectoryRecord& b) {
    auto same = [](double p, double q) { return std::memcmp(&p, &q, sizeof(double)) == 0; };
    return a.tick == b.tick && a.robot == b.robot && same(a.x, b.x) && same(a.y, b.y) && same(a.theta, b.theta) &&
           same(a.v, b.v) && same(a.w, b.w) && same(a.reward, b.reward) && a.event == b.event;
  }
};

/// Tick 0 holds the initial poses; each later tick holds, for every robot
/// that was active before the step, its new pose, the command it executed,
/// the reward and the event.
struct TrajectoryLog {
  std::vector<TrajectoryRecord> records;
};

struct EvalOptions {
  LidarSpec lidar;
  RewardConfig reward;
  std::uint64_t horizon = 400;
  /// World-episode whose trajectory goes to `log` (if given).
  std::size_t log_episode = 0;
};

/// A catalog scenario with the run's body radius and time step.
inline ScenarioSpec evaluation_scenario(const TrainConfig& cfg, ScenarioId id, std::optional<int> robots = {}) {
  ScenarioSpec spec = cfg.catalog.get(id);
  if (robots) spec.n_robots = *robots;
  spec.robot_radius = cfg.sim.robot_radius;
  spec.dt = cfg.sim.dt;
  validate(spec);
  return spec;
}

inline EvalOptions evaluation_options(const TrainConfig& cfg, std::size_t log_episode = 0) {
  return {cfg.lidar, cfg.reward, cfg.sim.horizon, log_episode};
}

inline std::uint64_t eval_world_seed(std::uint64_t seed, std::size_t episode) { return derive_seed(seed, 0xe7a1, episode); }

/// Runs whole worlds (no respawns; finished robots freeze in place) until
/// `n_episodes` robot episodes have ended. Each robot of a world counts as
/// one episode, taken in robot order.
inline EvalSummary evaluate_policy(Controller& controller, const ScenarioSpec& spec, std::size_t n_episodes,
                                   std::uint64_t seed, const EvalOptions& opt, TrajectoryLog* log = nullptr) {
  EvalSummary sum;
  sum.scenario = std::string(to_string(spec.id));
  for (std::size_t k = 0; sum.metrics.size() < n_episodes; ++k) {
    World world = build_world(spec, eval_world_seed(seed, k));
    Rng rng(derive_seed(seed, 0xe7a2, k));
    const std::size_t R = world.robots.size();
    std::vector<RobotSlot> slots(R);
    auto sense = [&](std::size_t i) {
      std::vector<double> ranges(static_cast<std::size_t>(opt.lidar.n_beams));
      cast_scan(world, i, opt.lidar, ranges);
      slots[i].history.push(std::vector<float>(ranges.begin(), ranges.end()));
    };
    for (std::size_t i = 0; i < R; ++i) sense(i);
    std::vector<EpisodeMetrics> m(R);
    for (std::size_t i = 0; i < R; ++i) m[i].straight_line = world.robots[i].goal_distance();
    const bool logging = log && k == opt.log_episode;
    if (logging)
      for (const auto& r : world.robots) log->records.push_back({0, r.id, r.pose.x, r.pose.y, r.pose.theta, r.v, r.w, 0.0, Event::None});

    std::vector<Action> actions(R);
    std::size_t active = R;
    while (active > 0) {
      controller.act(world, slots, rng, actions);
      for (auto& a : actions) a = clamp_action(a);
      World next = world_step(world, actions);
      const auto collided = detect_collisions(next);
      for (std::size_t i = 0; i < R; ++i) {
        if (!world.robots[i].active()) continue;
        EpisodeMetrics& em = m[i];
        ++em.steps;
        em.path_length += distance(world.robots[i].pose.position(), next.robots[i].pose.position());
        const StepOutcome o = step_outcome(world.robots[i], next.robots[i], collided[i] != 0, em.steps, opt.horizon, opt.reward);
        em.cumulative_reward += o.reward;
        if (logging) {
          const auto& r = next.robots[i];
          log->records.push_back({next.tick, r.id, r.pose.x, r.pose.y, r.pose.theta, r.v, r.w, o.reward, o.event});
        }
        if (o.terminal) {
          em.outcome = o.event;
          if (o.event == Event::Arrival) em.arrival_time = static_cast<double>(em.steps) * world.dt;
          next.robots[i].status = status_for(o.event);
          --active;
        }
      }
      world = std::move(next);
      for (std::size_t i = 0; i < R; ++i)
        if (world.robots[i].active()) sense(i);
    }
    for (std::size_t i = 0; i < R && sum.metrics.size() < n_episodes; ++i) sum.metrics.push_back(m[i]);
  }

  double arrival_time = 0.0, reward = 0.0;
  for (const auto& em : sum.metrics) {
    sum.arrivals += em.outcome == Event::Arrival;
    sum.collisions += em.outcome == Event::Collision;
    sum.timeouts += em.outcome == Event::Timeout;
    if (em.outcome == Event::Arrival) arrival_time += em.arrival_time;
    reward += em.cumulative_reward;
  }
  sum.episodes = sum.metrics.size();
  if (sum.episodes > 0) {
    const double n = static_cast<double>(sum.episodes);
    sum.success_rate = static_cast<double>(sum.arrivals) / n;
    sum.collision_rate = static_cast<double>(sum.collisions) / n;
    sum.timeout_rate = 1.0 - (sum.success_rate + sum.collision_rate);
    sum.mean_reward = reward / n;
  }
  if (sum.arrivals > 0) sum.mean_arrival_time = arrival_time / static_cast<double>(sum.arrivals);
  return sum;
}

/// Evaluates a checkpointed policy. Throws ConfigError when the checkpoint's
/// beam count differs from `opt.lidar`.
inline EvalSummary evaluate_policy(const LoadedCheckpoint& ckpt, const ScenarioSpec& spec, std::size_t n_episodes,
                                   std::uint64_t seed, bool deterministic, const EvalOptions& opt,
                                   TrajectoryLog* log = nullptr) {
  if (ckpt.config.net.n_beams != opt.lidar.n_beams)
    throw ConfigError("checkpoint expects " + std::to_string(ckpt.config.net.n_beams) + " beams, evaluation lidar has " +
                      std::to_string(opt.lidar.n_beams));
  NeuralController ctl(ckpt.state.model.policy, ckpt.config.net, ckpt.state.normalizer, deterministic);
  return evaluate_policy(ctl, spec, n_episodes, seed, opt, log);
}

// ---------------------------------------------------------------------------
// Trajectory CSV

inline constexpr const char* kTrajectoryHeader = "tick,robot,x,y,theta,v,w,reward,event";

inline void export_trajectories(const TrajectoryLog& log, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write trajectory log '" + path.string() + "'");
  out << kTrajectoryHeader << "\n";
  char line[512];
  for (const auto& r : log.records) {
    std::snprintf(line, sizeof line, "%llu,%u,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%s\n",
                  static_cast<unsigned long long>(r.tick), r.robot, r.x, r.y, r.theta, r.v, r.w, r.reward,
                  std::string(to_string(r.event)).c_str());
    out << line;
  }
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

inline TrajectoryLog parse_trajectories(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read trajectory log '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != kTrajectoryHeader)
    throw std::runtime_error("trajectory log '" + path.string() + "' has an unexpected header");
  TrajectoryLog log;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 9) throw std::runtime_error("trajectory log line " + std::to_string(lineno) + ": expected 9 fields");
    try {
      TrajectoryRecord r;
      r.tick = std::stoull(f[0]);
      r.robot = static_cast<std::uint32_t>(std::stoul(f[1]));
      r.x = std::stod(f[2]);
      r.y = std::stod(f[3]);
      r.theta = std::stod(f[4]);
      r.v = std::stod(f[5]);
      r.w = std::stod(f[6]);
      r.reward = std::stod(f[7]);
      r.event = event_from_string(f[8]);
      log.records.push_back(r);
    } catch (const std::exception& e) {
      throw std::runtime_error("trajectory log line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Replay

struct ReplayReport {
  bool bit_exact = false;
  std::size_t rows_checked = 0;
  std::uint64_t ticks = 0;
  std::string first_mismatch;
};

/// Rebuilds the logged world-episode and drives it with the logged commands,
/// checking every pose, reward and event bit-for-bit.
inline ReplayReport replay_trajectory(const ScenarioSpec& spec, std::uint64_t seed, std::size_t episode,
                                      const TrajectoryLog& log, const EvalOptions& opt) {
  ReplayReport rep;
  auto fail = [&](const std::string& why) {
    rep.bit_exact = false;
    rep.first_mismatch = why;
    return rep;
  };
  std::map<std::uint64_t, std::vector<const TrajectoryRecord*>> by_tick;
  for (const auto& r : log.records) by_tick[r.tick].push_back(&r);
  World world = build_world(spec, eval_world_seed(seed, episode));
  const std::size_t R = world.robots.size();
  auto same = [](double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; };

  const auto& initial = by_tick[0];
  if (initial.size() != R) return fail("tick 0 has " + std::to_string(initial.size()) + " rows for " + std::to_string(R) + " robots");
  for (const auto* r : initial) {
    if (r->robot >= R) return fail("tick 0 names unknown robot " + std::to_string(r->robot));
    const Pose& p = world.robots[r->robot].pose;
    if (!same(p.x, r->x) || !same(p.y, r->y) || !same(p.theta, r->theta))
      return fail("initial pose of robot " + std::to_string(r->robot) + " differs");
    ++rep.rows_checked;
  }

  std::vector<std::uint64_t> steps(R, 0);
  for (std::uint64_t t = 1; by_tick.count(t); ++t) {
    const auto& rows = by_tick[t];
    std::vector<Action> actions(R);
    std::vector<const TrajectoryRecord*> row_of(R, nullptr);
    for (const auto* r : rows) {
      if (r->robot >= R || row_of[r->robot]) return fail("tick " + std::to_string(t) + ": bad or duplicate robot row");
      row_of[r->robot] = r;
      actions[r->robot] = {r->v, r->w};
    }
    for (std::size_t i = 0; i < R; ++i)
      if ((row_of[i] != nullptr) != world.robots[i].active())
        return fail("tick " + std::to_string(t) + ": robot " + std::to_string(i) + " activity differs from the log");
    World next;
    try {
      next = world_step(world, actions);
    } catch (const ContractViolation& e) {
      return fail("tick " + std::to_string(t) + ": " + e.what());
    }
    const auto collided = detect_collisions(next);
    for (std::size_t i = 0; i < R; ++i) {
      const auto* r = row_of[i];
      if (!r) continue;
      ++steps[i];
      const StepOutcome o = step_outcome(world.robots[i], next.robots[i], collided[i] != 0, steps[i], opt.horizon, opt.reward);
      const Pose& p = next.robots[i].pose;
      if (!same(p.x, r->x) || !same(p.y, r->y) || !same(p.theta, r->theta))
        return fail("tick " + std::to_string(t) + ": pose of robot " + std::to_string(i) + " differs");
      if (!same(o.reward, r->reward) || o.event != r->event)
        return fail("tick " + std::to_string(t) + ": reward/event of robot " + std::to_string(i) + " differs");
      if (o.terminal) next.robots[i].status = status_for(o.event);
      ++rep.rows_checked;
    }
    world = std::move(next);
    rep.ticks = t;
  }
  if (rep.rows_checked != log.records.size()) return fail("log contains rows outside the contiguous tick range");
  rep.bit_exact = true;
  return rep;
}

}  // namespace crowdnav
