#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crowdnav/errors.hpp"
#include "crowdnav/geometry.hpp"

namespace crowdnav {

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;

  Vec2 position() const { return {x, y}; }
  friend bool operator==(const Pose&, const Pose&) = default;
};

enum class RobotStatus : std::uint8_t { Active, Arrived, Collided, TimedOut };

struct RobotState {
  std::uint32_t id = 0;
  Pose pose;
  double v = 0.0;
  double w = 0.0;
  double radius = 0.12;
  Vec2 goal;
  RobotStatus status = RobotStatus::Active;

  bool active() const { return status == RobotStatus::Active; }
  double goal_distance() const { return distance(pose.position(), goal); }
  friend bool operator==(const RobotState&, const RobotState&) = default;
};

struct ObstacleSegment {
  Vec2 a;
  Vec2 b;
  friend bool operator==(const ObstacleSegment&, const ObstacleSegment&) = default;
};

struct Bounds {
  double min_x = 0.0;
  double min_y = 0.0;
  double max_x = 0.0;
  double max_y = 0.0;

  double width() const { return max_x - min_x; }
  double height() const { return max_y - min_y; }
  bool contains(Vec2 p) const { return p.x >= min_x && p.x <= max_x && p.y >= min_y && p.y <= max_y; }
  Bounds inset(double m) const { return {min_x + m, min_y + m, max_x - m, max_y - m}; }
  friend bool operator==(const Bounds&, const Bounds&) = default;
};

struct World {
  std::vector<RobotState> robots;
  std::vector<ObstacleSegment> obstacles;
  double dt = 0.1;
  std::uint64_t tick = 0;
  Bounds bounds;

  friend bool operator==(const World&, const World&) = default;
};

struct LidarSpec {
  int n_beams = 512;
  double fov = std::numbers::pi;
  double max_range = 4.0;

  void validate() const {
    if (n_beams < 2) throw ContractViolation("lidar needs at least 2 beams");
    if (!(fov > 0.0 && fov <= 2.0 * std::numbers::pi)) throw ContractViolation("lidar fov must lie in (0, 2pi]");
    if (!(max_range > 0.0)) throw ContractViolation("lidar max_range must be positive");
  }

  double beam_angle(int i) const { return -0.5 * fov + i * fov / (n_beams - 1); }
  friend bool operator==(const LidarSpec&, const LidarSpec&) = default;
};

/// Commanded velocities for one robot.
struct Action {
  double v = 0.0;
  double w = 0.0;
  friend bool operator==(const Action&, const Action&) = default;
};

inline constexpr double kMaxLinear = 1.0;
inline constexpr double kMaxAngular = 1.0;

inline Action clamp_action(Action a) {
  return {std::clamp(a.v, 0.0, kMaxLinear), std::clamp(a.w, -kMaxAngular, kMaxAngular)};
}

inline std::string_view to_string(RobotStatus s) {
  switch (s) {
    case RobotStatus::Active: return "active";
    case RobotStatus::Arrived: return "arrived";
    case RobotStatus::Collided: return "collided";
    case RobotStatus::TimedOut: return "timed_out";
  }
  return "?";
}

/// Throws ContractViolation if the world breaks its construction invariants.
inline void validate_world(const World& world) {
  require(world.dt > 0.0, "world dt must be positive");
  for (const auto& r : world.robots) {
    require(r.radius > 0.0, "robot radius must be positive");
    require(r.v >= 0.0, "robot translational velocity must be non-negative");
    require(world.bounds.contains(r.pose.position()), "robot center outside world bounds");
  }
  for (const auto& s : world.obstacles) require(!(s.a == s.b), "degenerate obstacle segment");
}

/// Forward-Euler unicycle update.
inline Pose step_kinematics(const Pose& pose, double v, double w, double dt) {
  Pose next;
  next.x = pose.x + v * std::cos(pose.theta) * dt;
  next.y = pose.y + v * std::sin(pose.theta) * dt;
  next.theta = wrap_angle(pose.theta + w * dt);
  return next;
}

/// Writes one range per beam into `out`. Other robots are sensed as discs.
inline void cast_scan(const World& world, std::size_t robot_index, const LidarSpec& spec, std::span<double> out) {
  require(robot_index < world.robots.size(), "cast_scan: robot index out of range");
  require(out.size() == static_cast<std::size_t>(spec.n_beams), "cast_scan: output size != n_beams");
  const RobotState& self = world.robots[robot_index];
  const Vec2 origin = self.pose.position();
  for (int i = 0; i < spec.n_beams; ++i) {
    const double angle = self.pose.theta + spec.beam_angle(i);
    const Vec2 dir{std::cos(angle), std::sin(angle)};
    double best = spec.max_range;
    for (const auto& seg : world.obstacles) {
      if (auto t = ray_segment_hit(origin, dir, seg.a, seg.b); t && *t < best) best = *t;
    }
    for (std::size_t j = 0; j < world.robots.size(); ++j) {
      if (j == robot_index) continue;
      const RobotState& other = world.robots[j];
      if (auto t = ray_disc_hit(origin, dir, other.pose.position(), other.radius); t && *t < best) best = *t;
    }
    out[static_cast<std::size_t>(i)] = best;
  }
}

inline std::vector<double> cast_scan(const World& world, std::size_t robot_index, const LidarSpec& spec) {
  std::vector<double> out(static_cast<std::size_t>(spec.n_beams));
  cast_scan(world, robot_index, spec, out);
  return out;
}

/// Per-robot collision flags. Touching (distance == sum of radii) is not a collision.
inline std::vector<std::uint8_t> detect_collisions(const World& world) {
  const std::size_t n = world.robots.size();
  std::vector<std::uint8_t> hit(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const RobotState& a = world.robots[i];
    for (std::size_t j = i + 1; j < n; ++j) {
      const RobotState& b = world.robots[j];
      if (distance(a.pose.position(), b.pose.position()) < a.radius + b.radius) hit[i] = hit[j] = 1;
    }
    if (hit[i]) continue;
    for (const auto& seg : world.obstacles) {
      if (point_segment_distance(a.pose.position(), seg.a, seg.b) < a.radius) {
        hit[i] = 1;
        break;
      }
    }
  }
  return hit;
}

/// Advances every active robot by its action against the frozen current
/// world. `actions` holds one entry per robot slot; entries for inactive
/// robots are ignored and those robots stay put with zero velocity.
inline World world_step(const World& world, std::span<const Action> actions) {
  if (actions.size() != world.robots.size())
    throw ContractViolation("world_step: expected " + std::to_string(world.robots.size()) + " actions, got " +
                            std::to_string(actions.size()));
  World next = world;
  for (std::size_t i = 0; i < next.robots.size(); ++i) {
    RobotState& r = next.robots[i];
    if (!r.active()) {
      r.v = 0.0;
      r.w = 0.0;
      continue;
    }
    const Action& a = actions[i];
    if (!(a.v >= 0.0 && a.v <= kMaxLinear && a.w >= -kMaxAngular && a.w <= kMaxAngular))
      throw ContractViolation("world_step: action outside [0,1]x[-1,1]");
    r.pose = step_kinematics(world.robots[i].pose, a.v, a.w, world.dt);
    r.v = a.v;
    r.w = a.w;
  }
  ++next.tick;
  return next;
}

}  // namespace crowdnav
