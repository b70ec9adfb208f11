#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "crowdnav/errors.hpp"
#include "crowdnav/rng.hpp"
#include "crowdnav/sim_core.hpp"

namespace crowdnav {

enum class ScenarioId : std::uint8_t { Circle, Corridor, Crossing, Swap, RandomEmpty, RandomObstacles, Evacuation };
enum class SpawnRule : std::uint8_t { Perimeter, Random, Paired };

inline constexpr std::array<ScenarioId, 7> kAllScenarios{
    ScenarioId::Circle,      ScenarioId::Corridor,        ScenarioId::Crossing,  ScenarioId::Swap,
    ScenarioId::RandomEmpty, ScenarioId::RandomObstacles, ScenarioId::Evacuation};

inline std::string_view to_string(ScenarioId id) {
  switch (id) {
    case ScenarioId::Circle: return "Circle";
    case ScenarioId::Corridor: return "Corridor";
    case ScenarioId::Crossing: return "Crossing";
    case ScenarioId::Swap: return "Swap";
    case ScenarioId::RandomEmpty: return "RandomEmpty";
    case ScenarioId::RandomObstacles: return "RandomObstacles";
    case ScenarioId::Evacuation: return "Evacuation";
  }
  return "?";
}

inline ScenarioId scenario_from_string(std::string_view s) {
  for (ScenarioId id : kAllScenarios)
    if (to_string(id) == s) return id;
  throw ConfigError("unknown scenario id '" + std::string(s) + "'");
}

inline std::string_view to_string(SpawnRule r) {
  switch (r) {
    case SpawnRule::Perimeter: return "Perimeter";
    case SpawnRule::Random: return "Random";
    case SpawnRule::Paired: return "Paired";
  }
  return "?";
}

inline SpawnRule spawn_rule_from_string(std::string_view s) {
  for (SpawnRule r : {SpawnRule::Perimeter, SpawnRule::Random, SpawnRule::Paired})
    if (to_string(r) == s) return r;
  throw ConfigError("unknown spawn rule '" + std::string(s) + "'");
}

/// Start and goal regions for one stream of robots under SpawnRule::Paired.
struct Lane {
  Bounds start;
  Bounds goal;
  friend bool operator==(const Lane&, const Lane&) = default;
};

/// Random segment obstacles generated per world seed.
struct RandomSegmentRule {
  int min_count = 0;
  int max_count = 0;
  double min_length = 0.5;
  double max_length = 2.5;
  friend bool operator==(const RandomSegmentRule&, const RandomSegmentRule&) = default;
};

struct ScenarioSpec {
  ScenarioId id = ScenarioId::RandomEmpty;
  int n_robots = 1;
  Bounds bounds{-5.0, -5.0, 5.0, 5.0};
  std::vector<ObstacleSegment> obstacle_layout;
  SpawnRule spawn_rule = SpawnRule::Random;
  double circle_radius = 4.0;
  std::vector<Lane> lanes;
  RandomSegmentRule random_segments;
  double robot_radius = 0.12;
  double dt = 0.1;

  friend bool operator==(const ScenarioSpec&, const ScenarioSpec&) = default;
};

/// Minimum start-to-start clearance beyond touching.
inline constexpr double kSpawnMargin = 0.1;
inline constexpr double kMinGoalDistance = 1.0;
inline constexpr int kPlacementRetries = 2000;

inline void validate(const ScenarioSpec& spec) {
  if (spec.n_robots < 1) throw ConfigError(std::string(to_string(spec.id)) + ": n_robots must be >= 1");
  if (!(spec.robot_radius > 0.0)) throw ConfigError("robot_radius must be positive");
  if (!(spec.dt > 0.0)) throw ConfigError("dt must be positive");
  if (!(spec.bounds.width() > 0.0 && spec.bounds.height() > 0.0)) throw ConfigError("empty scenario bounds");
  for (const auto& s : spec.obstacle_layout)
    if (s.a == s.b) throw ConfigError("degenerate obstacle segment");
  if (spec.spawn_rule == SpawnRule::Paired && spec.lanes.empty())
    throw ConfigError(std::string(to_string(spec.id)) + ": Paired spawn rule needs at least one lane");
  if (spec.spawn_rule == SpawnRule::Perimeter && !(spec.circle_radius > 0.0))
    throw ConfigError("circle_radius must be positive");
  const auto& rs = spec.random_segments;
  if (rs.min_count < 0 || rs.max_count < rs.min_count) throw ConfigError("bad random_segments count range");
  if (rs.max_count > 0 && !(rs.min_length > 0.0 && rs.max_length >= rs.min_length))
    throw ConfigError("bad random_segments length range");
}

namespace detail {

inline Vec2 center_of(const Bounds& b) { return {0.5 * (b.min_x + b.max_x), 0.5 * (b.min_y + b.max_y)}; }

inline Vec2 sample_in(const Bounds& b, Rng& rng) { return {rng.uniform(b.min_x, b.max_x), rng.uniform(b.min_y, b.max_y)}; }

inline bool clear_of_segments(Vec2 p, const std::vector<ObstacleSegment>& segs, double clearance) {
  return std::all_of(segs.begin(), segs.end(),
                     [&](const ObstacleSegment& s) { return point_segment_distance(p, s.a, s.b) > clearance; });
}

/// Checks a candidate start/goal for slot `self` against every other robot.
inline bool placement_ok(const World& world, std::size_t self, Vec2 start, Vec2 goal, double radius) {
  const double sep = 2.0 * radius + kSpawnMargin;
  if (!world.bounds.contains(start) || !world.bounds.contains(goal)) return false;
  if (distance(start, goal) < kMinGoalDistance) return false;
  if (!clear_of_segments(start, world.obstacles, radius + kSpawnMargin)) return false;
  if (!clear_of_segments(goal, world.obstacles, radius + kSpawnMargin)) return false;
  for (std::size_t j = 0; j < world.robots.size(); ++j) {
    if (j == self) continue;
    const RobotState& o = world.robots[j];
    if (distance(start, o.pose.position()) <= sep) return false;
    if (distance(goal, o.goal) <= sep) return false;
  }
  return true;
}

inline std::vector<ObstacleSegment> random_segments(const ScenarioSpec& spec, Rng& rng) {
  const auto& rule = spec.random_segments;
  std::vector<ObstacleSegment> out = spec.obstacle_layout;
  if (rule.max_count <= 0) return out;
  const auto span = static_cast<std::uint64_t>(rule.max_count - rule.min_count + 1);
  const int count = rule.min_count + static_cast<int>(rng.below(span));
  const Bounds area = spec.bounds.inset(1.0);
  for (int k = 0; k < count; ++k) {
    const Vec2 c = sample_in(area, rng);
    const double angle = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const double half = 0.5 * rng.uniform(rule.min_length, rule.max_length);
    const Vec2 d{half * std::cos(angle), half * std::sin(angle)};
    out.push_back({c - d, c + d});
  }
  return out;
}

/// Draws a start/goal/heading for slot `index` according to the spawn rule.
/// `attempt` 0 under Perimeter means the slot's canonical circle position.
inline void draw_placement(const ScenarioSpec& spec, const World& world, std::size_t index, int attempt, Rng& rng,
                           Pose& start, Vec2& goal) {
  switch (spec.spawn_rule) {
    case SpawnRule::Perimeter: {
      const Vec2 c = center_of(spec.bounds);
      const double angle = attempt == 0 ? 2.0 * std::numbers::pi * static_cast<double>(index) / spec.n_robots
                                        : rng.uniform(-std::numbers::pi, std::numbers::pi);
      const Vec2 u{std::cos(angle), std::sin(angle)};
      const Vec2 p = c + spec.circle_radius * u;
      start = {p.x, p.y, wrap_angle(angle + std::numbers::pi)};
      goal = c - spec.circle_radius * u;
      return;
    }
    case SpawnRule::Random: {
      const Bounds area = spec.bounds.inset(spec.robot_radius + kSpawnMargin);
      const Vec2 p = sample_in(area, rng);
      start = {p.x, p.y, rng.uniform(-std::numbers::pi, std::numbers::pi)};
      goal = sample_in(area, rng);
      return;
    }
    case SpawnRule::Paired: {
      const Lane& lane = spec.lanes[index % spec.lanes.size()];
      const Vec2 p = sample_in(lane.start, rng);
      start = {p.x, p.y, rng.uniform(-std::numbers::pi, std::numbers::pi)};
      goal = sample_in(lane.goal, rng);
      return;
    }
  }
  (void)world;
}

inline void place_robot(const ScenarioSpec& spec, World& world, std::size_t index, Rng& rng) {
  for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
    Pose start;
    Vec2 goal;
    draw_placement(spec, world, index, attempt, rng, start, goal);
    if (placement_ok(world, index, start.position(), goal, spec.robot_radius)) {
      RobotState& r = world.robots[index];
      r.pose = start;
      r.goal = goal;
      r.v = 0.0;
      r.w = 0.0;
      r.radius = spec.robot_radius;
      r.status = RobotStatus::Active;
      return;
    }
  }
  throw PlacementError(std::string(to_string(spec.id)) + ": could not place robot " + std::to_string(index) +
                       " after " + std::to_string(kPlacementRetries) + " attempts");
}

}  // namespace detail

/// Builds a world as a pure function of (spec, seed).
inline World build_world(const ScenarioSpec& spec, std::uint64_t seed) {
  validate(spec);
  Rng rng(derive_seed(seed, 0x5ce7a210));
  World world;
  world.dt = spec.dt;
  world.bounds = spec.bounds;
  world.obstacles = detail::random_segments(spec, rng);
  world.robots.resize(static_cast<std::size_t>(spec.n_robots));
  // Unplaced slots sit far outside the bounds so they never block placement.
  for (std::size_t i = 0; i < world.robots.size(); ++i) {
    world.robots[i].id = static_cast<std::uint32_t>(i);
    world.robots[i].pose = {1e9 + 10.0 * static_cast<double>(i), 1e9, 0.0};
    world.robots[i].goal = {-1e9 - 10.0 * static_cast<double>(i), -1e9};
  }
  for (std::size_t i = 0; i < world.robots.size(); ++i) detail::place_robot(spec, world, i, rng);
  validate_world(world);
  return world;
}

/// Re-places a finished robot with a fresh start and goal; everyone else is untouched.
inline World respawn(const ScenarioSpec& spec, World world, std::size_t robot_index, Rng& rng) {
  require(robot_index < world.robots.size(), "respawn: robot index out of range");
  require(!world.robots[robot_index].active(), "respawn: robot is still active");
  detail::place_robot(spec, world, robot_index, rng);
  return world;
}

// ---------------------------------------------------------------------------
// Catalog

class ScenarioCatalog {
 public:
  static constexpr int kVersion = 1;

  /// The shipped layouts (mirrored by configs/scenarios.json).
  static ScenarioCatalog builtin() {
    ScenarioCatalog cat;
    const Bounds room{-5.0, -5.0, 5.0, 5.0};
    auto base = [&](ScenarioId id, SpawnRule rule) {
      ScenarioSpec s;
      s.id = id;
      s.bounds = room;
      s.spawn_rule = rule;
      return s;
    };
    const Bounds west{-4.6, -0.7, -2.5, 0.7}, east{2.5, -0.7, 4.6, 0.7};
    const Bounds south{-0.7, -4.6, 0.7, -2.5}, north{-0.7, 2.5, 0.7, 4.6};

    ScenarioSpec circle = base(ScenarioId::Circle, SpawnRule::Perimeter);
    circle.circle_radius = 4.0;
    cat.entries_.push_back(circle);

    ScenarioSpec corridor = base(ScenarioId::Corridor, SpawnRule::Paired);
    corridor.obstacle_layout = {{{-5.0, 1.0}, {5.0, 1.0}}, {{-5.0, -1.0}, {5.0, -1.0}}};
    corridor.lanes = {{west, east}, {east, west}};
    cat.entries_.push_back(corridor);

    ScenarioSpec crossing = base(ScenarioId::Crossing, SpawnRule::Paired);
    for (double sx : {-1.0, 1.0})
      for (double sy : {-1.0, 1.0}) {
        crossing.obstacle_layout.push_back({{sx * 1.0, sy * 1.0}, {sx * 5.0, sy * 1.0}});
        crossing.obstacle_layout.push_back({{sx * 1.0, sy * 1.0}, {sx * 1.0, sy * 5.0}});
      }
    crossing.lanes = {{west, east}, {south, north}, {east, west}, {north, south}};
    cat.entries_.push_back(crossing);

    ScenarioSpec swap = base(ScenarioId::Swap, SpawnRule::Paired);
    swap.lanes = {{{-4.6, -3.0, -2.5, 3.0}, {2.5, -3.0, 4.6, 3.0}}, {{2.5, -3.0, 4.6, 3.0}, {-4.6, -3.0, -2.5, 3.0}}};
    cat.entries_.push_back(swap);

    cat.entries_.push_back(base(ScenarioId::RandomEmpty, SpawnRule::Random));

    ScenarioSpec obstacles = base(ScenarioId::RandomObstacles, SpawnRule::Random);
    obstacles.random_segments = {2, 6, 0.5, 2.5};
    cat.entries_.push_back(obstacles);

    ScenarioSpec evac = base(ScenarioId::Evacuation, SpawnRule::Paired);
    evac.obstacle_layout = {{{1.0, -5.0}, {1.0, -0.6}}, {{1.0, 0.6}, {1.0, 5.0}}};
    evac.lanes = {{{-4.6, -4.6, -0.5, 4.6}, {2.5, -4.6, 4.6, 4.6}}};
    cat.entries_.push_back(evac);
    return cat;
  }

  static ScenarioCatalog from_json(const nlohmann::json& j);
  static ScenarioCatalog load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open scenario catalog '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("scenario catalog '" + path + "': " + e.what());
    }
    return from_json(j);
  }
  nlohmann::json to_json() const;

  /// Template for a scenario id (n_robots left at 1; callers set the count).
  const ScenarioSpec& get(ScenarioId id) const {
    for (const auto& s : entries_)
      if (s.id == id) return s;
    throw ConfigError("scenario '" + std::string(to_string(id)) + "' missing from catalog");
  }
  const std::vector<ScenarioSpec>& entries() const { return entries_; }

  friend bool operator==(const ScenarioCatalog&, const ScenarioCatalog&) = default;

 private:
  std::vector<ScenarioSpec> entries_;
};

namespace detail {

inline Bounds bounds_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 4) throw ConfigError(std::string(what) + ": expected [min_x, min_y, max_x, max_y]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline nlohmann::json bounds_to_json(const Bounds& b) { return {b.min_x, b.min_y, b.max_x, b.max_y}; }

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> known,
                                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

}  // namespace detail

inline ScenarioCatalog ScenarioCatalog::from_json(const nlohmann::json& j) {
  using detail::bounds_from_json;
  detail::reject_unknown_keys(j, {"version", "scenarios"}, "scenario catalog");
  try {
    if (j.at("version").get<int>() != kVersion) throw ConfigError("scenario catalog: unsupported version");
    ScenarioCatalog cat;
    for (const auto& e : j.at("scenarios")) {
      detail::reject_unknown_keys(
          e, {"id", "bounds", "spawn_rule", "segments", "circle_radius", "lanes", "random_segments"},
          "scenario entry");
      ScenarioSpec s;
      s.id = scenario_from_string(e.at("id").get<std::string>());
      s.bounds = bounds_from_json(e.at("bounds"), "bounds");
      s.spawn_rule = spawn_rule_from_string(e.at("spawn_rule").get<std::string>());
      for (const auto& seg : e.value("segments", nlohmann::json::array())) {
        if (!seg.is_array() || seg.size() != 4) throw ConfigError("segment: expected [ax, ay, bx, by]");
        s.obstacle_layout.push_back({{seg[0].get<double>(), seg[1].get<double>()},
                                     {seg[2].get<double>(), seg[3].get<double>()}});
      }
      s.circle_radius = e.value("circle_radius", s.circle_radius);
      for (const auto& lane : e.value("lanes", nlohmann::json::array())) {
        detail::reject_unknown_keys(lane, {"start", "goal"}, "lane");
        s.lanes.push_back({bounds_from_json(lane.at("start"), "lane.start"), bounds_from_json(lane.at("goal"), "lane.goal")});
      }
      if (e.contains("random_segments")) {
        const auto& r = e.at("random_segments");
        detail::reject_unknown_keys(r, {"min_count", "max_count", "min_length", "max_length"}, "random_segments");
        s.random_segments = {r.at("min_count").get<int>(), r.at("max_count").get<int>(),
                             r.at("min_length").get<double>(), r.at("max_length").get<double>()};
      }
      validate(s);
      cat.entries_.push_back(std::move(s));
    }
    return cat;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scenario catalog: ") + e.what());
  }
}

inline nlohmann::json ScenarioCatalog::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& s : entries_) {
    nlohmann::json e;
    e["id"] = to_string(s.id);
    e["bounds"] = detail::bounds_to_json(s.bounds);
    e["spawn_rule"] = to_string(s.spawn_rule);
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& seg : s.obstacle_layout) segs.push_back({seg.a.x, seg.a.y, seg.b.x, seg.b.y});
    e["segments"] = segs;
    if (s.spawn_rule == SpawnRule::Perimeter) e["circle_radius"] = s.circle_radius;
    if (!s.lanes.empty()) {
      nlohmann::json lanes = nlohmann::json::array();
      for (const auto& l : s.lanes)
        lanes.push_back({{"start", detail::bounds_to_json(l.start)}, {"goal", detail::bounds_to_json(l.goal)}});
      e["lanes"] = lanes;
    }
    if (s.random_segments.max_count > 0)
      e["random_segments"] = {{"min_count", s.random_segments.min_count},
                              {"max_count", s.random_segments.max_count},
                              {"min_length", s.random_segments.min_length},
                              {"max_length", s.random_segments.max_length}};
    list.push_back(std::move(e));
  }
  return {{"version", kVersion}, {"scenarios", list}};
}

// ---------------------------------------------------------------------------
// Stages

enum class Stage : std::uint8_t { One = 1, Two = 2 };

/// Robots per scenario for one stage. Ordered by scenario id.
using Allocation = std::map<ScenarioId, int>;

struct StageSpec {
  Stage stage = Stage::One;
  std::vector<ScenarioSpec> scenarios;

  int total_robots() const {
    int n = 0;
    for (const auto& s : scenarios) n += s.n_robots;
    return n;
  }
};

inline constexpr int kStageOneRobots = 20;
inline constexpr int kStageTwoRobots = 58;

/// With `strict`, enforces the full-scale populations (20 obstacle-free
/// robots in Stage One, 58 over every scenario in Stage Two).
inline StageSpec make_stage(Stage stage, const ScenarioCatalog& catalog, const Allocation& allocation, bool strict) {
  StageSpec spec;
  spec.stage = stage;
  for (const auto& [id, count] : allocation) {
    if (count <= 0) continue;
    ScenarioSpec s = catalog.get(id);
    s.n_robots = count;
    spec.scenarios.push_back(std::move(s));
  }
  if (spec.scenarios.empty()) throw ConfigError("stage has no robots");
  if (stage == Stage::One) {
    for (const auto& s : spec.scenarios)
      if (s.id != ScenarioId::RandomEmpty) throw ConfigError("Stage One trains on obstacle-free random worlds only");
  }
  if (strict) {
    if (stage == Stage::One && spec.total_robots() != kStageOneRobots)
      throw ConfigError("Stage One requires 20 robots (got " + std::to_string(spec.total_robots()) + ")");
    if (stage == Stage::Two) {
      if (spec.total_robots() != kStageTwoRobots)
        throw ConfigError("Stage Two requires 58 robots (got " + std::to_string(spec.total_robots()) + ")");
      if (spec.scenarios.size() != kAllScenarios.size()) throw ConfigError("Stage Two requires the full scenario set");
    }
  }
  return spec;
}

/// One world per scenario entry; world k uses a seed derived from (seed, k).
inline std::vector<World> stage_worlds(const StageSpec& stage, std::uint64_t seed) {
  std::vector<World> worlds;
  worlds.reserve(stage.scenarios.size());
  for (std::size_t k = 0; k < stage.scenarios.size(); ++k)
    worlds.push_back(build_world(stage.scenarios[k], derive_seed(seed, static_cast<std::uint64_t>(stage.stage), k)));
  return worlds;
}

}  // namespace crowdnav
