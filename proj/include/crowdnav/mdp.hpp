#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <span>
#include <string_view>
#include <vector>

#include "crowdnav/errors.hpp"
#include "crowdnav/sim_core.hpp"

namespace crowdnav {

inline constexpr int kScanFrames = 3;
/// goal (distance, angle) + velocity (v, w)
inline constexpr int kExtraDims = 4;

inline constexpr int observation_dim(int n_beams) { return kScanFrames * n_beams + kExtraDims; }

enum class Event : std::uint8_t { None, Arrival, Collision, Timeout };

inline std::string_view to_string(Event e) {
  switch (e) {
    case Event::None: return "none";
    case Event::Arrival: return "arrival";
    case Event::Collision: return "collision";
    case Event::Timeout: return "timeout";
  }
  return "?";
}

inline Event event_from_string(std::string_view s) {
  for (Event e : {Event::None, Event::Arrival, Event::Collision, Event::Timeout})
    if (to_string(e) == s) return e;
  throw ContractViolation("unknown event '" + std::string(s) + "'");
}

inline RobotStatus status_for(Event e) {
  switch (e) {
    case Event::Arrival: return RobotStatus::Arrived;
    case Event::Collision: return RobotStatus::Collided;
    case Event::Timeout: return RobotStatus::TimedOut;
    case Event::None: break;
  }
  return RobotStatus::Active;
}

/// Up to three most recent scans, oldest first.
class ScanHistory {
 public:
  void push(std::vector<float> scan) {
    frames_.push_back(std::move(scan));
    while (frames_.size() > kScanFrames) frames_.pop_front();
  }
  void clear() { frames_.clear(); }
  std::size_t size() const { return frames_.size(); }
  bool empty() const { return frames_.empty(); }

  /// Frame k of the stack (0 = oldest, 2 = newest). Short histories repeat
  /// their oldest scan to fill the missing leading slots.
  const std::vector<float>& frame(int k) const {
    require(!frames_.empty(), "scan history is empty");
    const int missing = kScanFrames - static_cast<int>(frames_.size());
    return frames_[static_cast<std::size_t>(std::max(0, k - missing))];
  }

  const std::deque<std::vector<float>>& raw() const { return frames_; }
  std::deque<std::vector<float>>& raw() { return frames_; }

 private:
  std::deque<std::vector<float>> frames_;
};

struct Observation {
  /// kScanFrames x n_beams ranges in meters, frame-major, newest frame last.
  std::vector<float> scan_stack;
  /// (distance m, angle rad in robot frame)
  std::array<double, 2> goal_polar{};
  /// (v m/s, w rad/s)
  std::array<double, 2> velocity{};

  int n_beams() const { return static_cast<int>(scan_stack.size()) / kScanFrames; }
  std::size_t dim() const { return scan_stack.size() + kExtraDims; }

  /// Flat layout used by the network: scans, goal distance, goal angle, v, w.
  void flatten(std::span<float> out) const {
    require(out.size() == dim(), "observation flatten: size mismatch");
    std::copy(scan_stack.begin(), scan_stack.end(), out.begin());
    const std::size_t n = scan_stack.size();
    out[n + 0] = static_cast<float>(goal_polar[0]);
    out[n + 1] = static_cast<float>(goal_polar[1]);
    out[n + 2] = static_cast<float>(velocity[0]);
    out[n + 3] = static_cast<float>(velocity[1]);
  }

  std::vector<float> flat() const {
    std::vector<float> out(dim());
    flatten(out);
    return out;
  }
};

inline std::array<double, 2> goal_polar(const RobotState& robot) {
  const Vec2 d = robot.goal - robot.pose.position();
  return {norm(d), wrap_angle(std::atan2(d.y, d.x) - robot.pose.theta)};
}

inline Observation assemble_observation(const World& world, std::size_t robot_index, const ScanHistory& history) {
  require(robot_index < world.robots.size(), "assemble_observation: robot index out of range");
  require(!history.empty(), "assemble_observation: scan history must hold at least one scan");
  const RobotState& r = world.robots[robot_index];
  Observation obs;
  const std::size_t beams = history.frame(0).size();
  obs.scan_stack.resize(kScanFrames * beams);
  for (int k = 0; k < kScanFrames; ++k) {
    const auto& f = history.frame(k);
    require(f.size() == beams, "assemble_observation: inconsistent scan sizes");
    std::copy(f.begin(), f.end(), obs.scan_stack.begin() + static_cast<std::ptrdiff_t>(k * beams));
  }
  obs.goal_polar = goal_polar(r);
  obs.velocity = {r.v, r.w};
  return obs;
}

/// Per-dimension streaming mean/variance (Welford) shared by every
/// observation component.
class RunningNormalizer {
 public:
  static constexpr double kMinStd = 1e-8;
  static constexpr double kClip = 5.0;

  RunningNormalizer() = default;
  explicit RunningNormalizer(std::size_t dim) : mean_(dim, 0.0), m2_(dim, 0.0) {}

  std::size_t dim() const { return mean_.size(); }
  std::uint64_t count() const { return count_; }
  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& m2() const { return m2_; }

  double variance(std::size_t i) const { return count_ == 0 ? 0.0 : m2_[i] / static_cast<double>(count_); }
  double stddev(std::size_t i) const { return std::sqrt(variance(i)); }

  template <typename T>
  void update(std::span<const T> x) {
    require(x.size() == dim(), "normalizer update: dimension mismatch");
    ++count_;
    const double inv = 1.0 / static_cast<double>(count_);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double xi = static_cast<double>(x[i]);
      const double delta = xi - mean_[i];
      mean_[i] += delta * inv;
      m2_[i] += delta * (xi - mean_[i]);
    }
  }

  /// Rows of a row-major [n x dim] buffer, in order.
  template <typename T>
  void update_rows(std::span<const T> rows) {
    require(dim() > 0 && rows.size() % dim() == 0, "normalizer update: buffer is not a whole number of rows");
    for (std::size_t off = 0; off < rows.size(); off += dim()) update(rows.subspan(off, dim()));
  }

  /// (x - mean) / max(std, 1e-8), clamped to [-5, 5]. Identity while count == 0.
  template <typename In, typename Out>
  void apply(std::span<const In> x, std::span<Out> out) const {
    require(x.size() == dim() && out.size() == dim(), "normalizer apply: dimension mismatch");
    if (count_ == 0) {
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<Out>(x[i]);
      return;
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double z = (static_cast<double>(x[i]) - mean_[i]) / std::max(stddev(i), kMinStd);
      out[i] = static_cast<Out>(std::clamp(z, -kClip, kClip));
    }
  }

  void restore(std::uint64_t count, std::vector<double> mean, std::vector<double> m2) {
    require(mean.size() == m2.size(), "normalizer restore: size mismatch");
    count_ = count;
    mean_ = std::move(mean);
    m2_ = std::move(m2);
  }

  friend bool operator==(const RunningNormalizer&, const RunningNormalizer&) = default;

 private:
  std::uint64_t count_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

struct RewardConfig {
  double r_arrival = 15.0;
  double omega_g = 2.5;
  double r_collision = -15.0;
  double omega_w = -0.1;
  double arrival_threshold = 0.1;
  double w_threshold = 0.7;

  void validate() const {
    if (!(arrival_threshold > 0.0)) throw ConfigError("reward.arrival_threshold must be positive");
    if (!(w_threshold > 0.0)) throw ConfigError("reward.w_threshold must be positive");
  }
  friend bool operator==(const RewardConfig&, const RewardConfig&) = default;
};

/// The three additive reward components.
struct RewardTerms {
  double goal = 0.0;
  double collision = 0.0;
  double rotation = 0.0;

  double total() const { return goal + collision + rotation; }
};

struct StepOutcome {
  double reward = 0.0;
  bool terminal = false;
  Event event = Event::None;
};

inline RewardTerms reward_terms(const RobotState& prev, const RobotState& curr, bool collided,
                                const RewardConfig& cfg) {
  RewardTerms t;
  const double d_curr = curr.goal_distance();
  if (d_curr < cfg.arrival_threshold) {
    t.goal = cfg.r_arrival;
  } else {
    t.goal = cfg.omega_g * (distance(prev.pose.position(), curr.goal) - d_curr);
  }
  t.collision = collided ? cfg.r_collision : 0.0;
  t.rotation = std::abs(curr.w) > cfg.w_threshold ? cfg.omega_w * std::abs(curr.w) : 0.0;
  return t;
}

/// Reward and the goal/collision event for one tick. Collision wins over arrival.
inline std::pair<double, Event> compute_reward(const RobotState& prev, const RobotState& curr, bool collided,
                                               const RewardConfig& cfg) {
  const double reward = reward_terms(prev, curr, collided, cfg).total();
  if (collided) return {reward, Event::Collision};
  if (curr.goal_distance() < cfg.arrival_threshold) return {reward, Event::Arrival};
  return {reward, Event::None};
}

/// Precedence: Collision > Arrival > Timeout.
inline Event check_termination(const RobotState& robot, bool collided, std::uint64_t tick_in_episode,
                               std::uint64_t horizon, const RewardConfig& cfg = {}) {
  if (collided) return Event::Collision;
  if (robot.goal_distance() < cfg.arrival_threshold) return Event::Arrival;
  if (tick_in_episode >= horizon) return Event::Timeout;
  return Event::None;
}

inline StepOutcome step_outcome(const RobotState& prev, const RobotState& curr, bool collided,
                                std::uint64_t tick_in_episode, std::uint64_t horizon, const RewardConfig& cfg) {
  StepOutcome out;
  out.reward = compute_reward(prev, curr, collided, cfg).first;
  out.event = check_termination(curr, collided, tick_in_episode, horizon, cfg);
  out.terminal = out.event != Event::None;
  return out;
}

}  // namespace crowdnav
