#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "crowdnav/scenarios.hpp"

using namespace crowdnav;

namespace {

ScenarioSpec spec_for(ScenarioId id, int n) {
  ScenarioSpec s = ScenarioCatalog::builtin().get(id);
  s.n_robots = n;
  return s;
}

/// Independent check of every placement invariant of a freshly built world.
void expect_valid_placement(const ScenarioSpec& spec, const World& w, const std::string& ctx) {
  ASSERT_EQ(w.robots.size(), static_cast<std::size_t>(spec.n_robots)) << ctx;
  const double sep = 2.0 * spec.robot_radius + 0.1;
  for (std::size_t i = 0; i < w.robots.size(); ++i) {
    const auto& r = w.robots[i];
    EXPECT_TRUE(r.active()) << ctx;
    EXPECT_TRUE(spec.bounds.contains(r.pose.position())) << ctx;
    EXPECT_TRUE(spec.bounds.contains(r.goal)) << ctx;
    EXPECT_GE(distance(r.pose.position(), r.goal), 1.0) << ctx;
    for (const auto& s : w.obstacles) {
      EXPECT_GT(point_segment_distance(r.pose.position(), s.a, s.b), spec.robot_radius) << ctx << " robot " << i;
      EXPECT_GT(point_segment_distance(r.goal, s.a, s.b), spec.robot_radius) << ctx << " goal " << i;
    }
    for (std::size_t j = i + 1; j < w.robots.size(); ++j)
      EXPECT_GT(distance(r.pose.position(), w.robots[j].pose.position()), sep) << ctx << " pair " << i << "," << j;
  }
}

}  // namespace

TEST(Scenarios, CircleIsEvenlySpacedWithAntipodalGoals) {
  const ScenarioSpec spec = spec_for(ScenarioId::Circle, 4);
  const World w = build_world(spec, 123);
  for (std::size_t i = 0; i < 4; ++i) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(i) / 4.0;
    const auto& r = w.robots[i];
    EXPECT_NEAR(r.pose.x, 4.0 * std::cos(angle), 1e-12);
    EXPECT_NEAR(r.pose.y, 4.0 * std::sin(angle), 1e-12);
    EXPECT_NEAR(r.goal.x, -r.pose.x, 1e-12);
    EXPECT_NEAR(r.goal.y, -r.pose.y, 1e-12);
    // facing the center
    EXPECT_NEAR(std::cos(r.pose.theta), -std::cos(angle), 1e-12);
    EXPECT_NEAR(std::sin(r.pose.theta), -std::sin(angle), 1e-12);
  }
}

TEST(Scenarios, BuildWorldIsPure) {
  const ScenarioSpec spec = spec_for(ScenarioId::RandomEmpty, 20);
  EXPECT_EQ(build_world(spec, 99), build_world(spec, 99));
  EXPECT_FALSE(build_world(spec, 99) == build_world(spec, 100));
}

TEST(Scenarios, RandomObstaclesCountAndLengths) {
  const ScenarioSpec spec = spec_for(ScenarioId::RandomObstacles, 4);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const World w = build_world(spec, seed);
    ASSERT_GE(w.obstacles.size(), 2u);
    ASSERT_LE(w.obstacles.size(), 6u);
    for (const auto& s : w.obstacles) {
      const double len = distance(s.a, s.b);
      EXPECT_GE(len, 0.5 - 1e-12);
      EXPECT_LE(len, 2.5 + 1e-12);
    }
  }
}

class SeedSweep : public ::testing::TestWithParam<ScenarioId> {};

TEST_P(SeedSweep, PlacementInvariantsHoldForThousandSeeds) {
  const ScenarioId id = GetParam();
  const int n = id == ScenarioId::Circle ? 10 : 8;
  const ScenarioSpec spec = spec_for(id, n);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const World w = build_world(spec, seed);
    expect_valid_placement(spec, w, std::string(to_string(id)) + " seed " + std::to_string(seed));
    if (::testing::Test::HasFailure()) return;
  }
}

INSTANTIATE_TEST_SUITE_P(AllScenarios, SeedSweep, ::testing::ValuesIn(kAllScenarios),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(Scenarios, CorridorRobotsStayInsideTheCorridor) {
  const ScenarioSpec spec = spec_for(ScenarioId::Corridor, 6);
  for (std::uint64_t seed = 0; seed < 100; ++seed)
    for (const auto& r : build_world(spec, seed).robots) {
      EXPECT_LT(std::abs(r.pose.y), 1.0);
      EXPECT_LT(std::abs(r.goal.y), 1.0);
      EXPECT_GT(std::abs(r.goal.x - r.pose.x), 4.0);
    }
}

TEST(Scenarios, EvacuationGoalsLieBeyondTheWall) {
  const ScenarioSpec spec = spec_for(ScenarioId::Evacuation, 8);
  for (std::uint64_t seed = 0; seed < 100; ++seed)
    for (const auto& r : build_world(spec, seed).robots) {
      EXPECT_LT(r.pose.x, 1.0);
      EXPECT_GT(r.goal.x, 1.0);
    }
}

TEST(Scenarios, OvercrowdedSpecFailsWithPlacementError) {
  ScenarioSpec spec = spec_for(ScenarioId::RandomEmpty, 1);
  spec.bounds = {-0.5, -0.5, 0.5, 0.5};
  spec.n_robots = 30;
  EXPECT_THROW(build_world(spec, 1), PlacementError);
}

TEST(Respawn, OnlyTheFinishedRobotMoves) {
  const ScenarioSpec spec = spec_for(ScenarioId::RandomEmpty, 6);
  World w = build_world(spec, 5);
  w.robots[2].status = RobotStatus::Arrived;
  Rng rng(77);
  const World n = respawn(spec, w, 2, rng);
  for (std::size_t i = 0; i < 6; ++i)
    if (i != 2) {
      EXPECT_EQ(n.robots[i], w.robots[i]);
    }
  EXPECT_TRUE(n.robots[2].active());
  EXPECT_FALSE(n.robots[2].pose == w.robots[2].pose);
}

TEST(Respawn, SameRngStateGivesSamePlacement) {
  const ScenarioSpec spec = spec_for(ScenarioId::RandomObstacles, 6);
  World w = build_world(spec, 8);
  w.robots[0].status = RobotStatus::Collided;
  Rng a(4), b(4);
  EXPECT_EQ(respawn(spec, w, 0, a), respawn(spec, w, 0, b));
}

TEST(Respawn, ActiveRobotIsAContractViolation) {
  const ScenarioSpec spec = spec_for(ScenarioId::RandomEmpty, 2);
  World w = build_world(spec, 8);
  Rng rng(1);
  EXPECT_THROW(respawn(spec, w, 0, rng), ContractViolation);
}

TEST(Respawn, NeverOverlapsLiveRobots) {
  for (ScenarioId id : kAllScenarios) {
    const ScenarioSpec spec = spec_for(id, 8);
    World w = build_world(spec, 31);
    Rng rng(derive_seed(31, 1));
    for (int round = 0; round < 200; ++round) {
      const std::size_t k = static_cast<std::size_t>(rng.below(8));
      w.robots[k].status = RobotStatus::Arrived;
      w = respawn(spec, w, k, rng);
      for (std::size_t j = 0; j < w.robots.size(); ++j) {
        if (j == k) continue;
        ASSERT_GT(distance(w.robots[k].pose.position(), w.robots[j].pose.position()), 2 * spec.robot_radius + 0.1);
      }
      for (const auto& s : w.obstacles) ASSERT_GT(point_segment_distance(w.robots[k].pose.position(), s.a, s.b), spec.robot_radius);
    }
  }
}

TEST(Stages, FullScaleCounts) {
  const auto cat = ScenarioCatalog::builtin();
  const StageSpec one = make_stage(Stage::One, cat, {{ScenarioId::RandomEmpty, 20}}, true);
  EXPECT_EQ(one.total_robots(), 20);
  const Allocation two_alloc = {{ScenarioId::Circle, 10},     {ScenarioId::Corridor, 6},        {ScenarioId::Crossing, 8},
                                {ScenarioId::Swap, 8},        {ScenarioId::RandomEmpty, 8},     {ScenarioId::RandomObstacles, 10},
                                {ScenarioId::Evacuation, 8}};
  const StageSpec two = make_stage(Stage::Two, cat, two_alloc, true);
  EXPECT_EQ(two.total_robots(), 58);
  std::size_t robots = 0;
  for (const auto& w : stage_worlds(two, 3)) robots += w.robots.size();
  EXPECT_EQ(robots, 58u);
  robots = 0;
  for (const auto& w : stage_worlds(one, 3)) robots += w.robots.size();
  EXPECT_EQ(robots, 20u);
}

TEST(Stages, StrictModeRejectsWrongPopulations) {
  const auto cat = ScenarioCatalog::builtin();
  EXPECT_THROW(make_stage(Stage::One, cat, {{ScenarioId::RandomEmpty, 4}}, true), ConfigError);
  EXPECT_THROW(make_stage(Stage::One, cat, {{ScenarioId::Circle, 20}}, false), ConfigError);
  EXPECT_THROW(make_stage(Stage::Two, cat, {{ScenarioId::Circle, 58}}, true), ConfigError);
}

TEST(Stages, DeskOverrideWins) {
  const auto cat = ScenarioCatalog::builtin();
  const StageSpec one = make_stage(Stage::One, cat, {{ScenarioId::RandomEmpty, 4}}, false);
  EXPECT_EQ(one.total_robots(), 4);
  EXPECT_EQ(stage_worlds(one, 1).front().robots.size(), 4u);
}

TEST(Catalog, JsonRoundTrip) {
  const auto cat = ScenarioCatalog::builtin();
  EXPECT_EQ(ScenarioCatalog::from_json(cat.to_json()), cat);
}

TEST(Catalog, ShippedFileMatchesBuiltin) {
  const auto path = std::filesystem::path(CROWDNAV_SOURCE_DIR) / "configs" / "scenarios.json";
  EXPECT_EQ(ScenarioCatalog::load(path.string()), ScenarioCatalog::builtin());
}

TEST(Catalog, RejectsUnknownKeysAndBadVersions) {
  auto j = ScenarioCatalog::builtin().to_json();
  j["scenarios"][0]["colour"] = "red";
  EXPECT_THROW(ScenarioCatalog::from_json(j), ConfigError);
  auto k = ScenarioCatalog::builtin().to_json();
  k["version"] = 2;
  EXPECT_THROW(ScenarioCatalog::from_json(k), ConfigError);
  auto m = ScenarioCatalog::builtin().to_json();
  m["scenarios"][0]["id"] = "Maze";
  EXPECT_THROW(ScenarioCatalog::from_json(m), ConfigError);
}
