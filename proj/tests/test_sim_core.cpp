#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "crowdnav/rng.hpp"
#include "crowdnav/sim_core.hpp"
#include "support/raycast_cases.hpp"

using namespace crowdnav;
constexpr double kPi = std::numbers::pi;

namespace {

RobotState robot_at(std::uint32_t id, double x, double y, double theta = 0.0, double radius = 0.12) {
  RobotState r;
  r.id = id;
  r.pose = {x, y, theta};
  r.radius = radius;
  r.goal = {x + 2.0, y};
  return r;
}

World open_world() {
  World w;
  w.bounds = {-10, -10, 10, 10};
  return w;
}

}  // namespace

TEST(Kinematics, StraightLine) {
  const Pose p = step_kinematics({0, 0, 0}, 1.0, 0.0, 0.1);
  EXPECT_DOUBLE_EQ(p.x, 0.1);
  EXPECT_DOUBLE_EQ(p.y, 0.0);
  EXPECT_DOUBLE_EQ(p.theta, 0.0);
}

TEST(Kinematics, HeadingAlignment) {
  const Pose p = step_kinematics({0, 0, kPi / 2}, 1.0, 0.0, 0.1);
  EXPECT_NEAR(p.x, 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(p.y, 0.1);
  EXPECT_DOUBLE_EQ(p.theta, kPi / 2);
}

TEST(Kinematics, PureRotation) {
  const Pose p = step_kinematics({0, 0, 0}, 0.0, 1.0, 0.1);
  EXPECT_EQ(p.x, 0.0);
  EXPECT_EQ(p.y, 0.0);
  EXPECT_DOUBLE_EQ(p.theta, 0.1);
}

TEST(Kinematics, HeadingWraps) {
  const Pose p = step_kinematics({0, 0, kPi - 0.05}, 0.0, 1.0, 0.1);
  EXPECT_NEAR(p.theta, -kPi + 0.05, 1e-12);
}

TEST(Kinematics, ExactPreservationProperties) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Pose p{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-kPi, kPi)};
    const Pose a = step_kinematics(p, rng.uniform(0, 1), 0.0, 0.1);
    EXPECT_EQ(a.theta, p.theta);
    const Pose b = step_kinematics(p, 0.0, rng.uniform(-1, 1), 0.1);
    EXPECT_EQ(b.x, p.x);
    EXPECT_EQ(b.y, p.y);
  }
}

TEST(Raycast, PerpendicularWallCenterBeam) {
  World w = open_world();
  w.robots.push_back(robot_at(0, 0, 0));
  w.obstacles.push_back({{2, -1}, {2, 1}});
  const LidarSpec spec{5, kPi, 4.0};  // beams at -90, -45, 0, 45, 90 degrees
  const auto scan = cast_scan(w, 0, spec);
  EXPECT_NEAR(scan[2], 2.0, 1e-12);
  EXPECT_EQ(scan[3], 4.0);  // y = 2 lies outside the segment
  EXPECT_EQ(scan[1], 4.0);
}

TEST(Raycast, EmptyWorldReturnsMaxRangeExactly) {
  World w = open_world();
  w.robots.push_back(robot_at(0, 0, 0));
  for (const auto r : cast_scan(w, 0, LidarSpec{})) EXPECT_EQ(r, 4.0);
}

TEST(Raycast, BeamAngles) {
  const LidarSpec spec{512, kPi, 4.0};
  EXPECT_DOUBLE_EQ(spec.beam_angle(0), -kPi / 2);
  EXPECT_DOUBLE_EQ(spec.beam_angle(511), kPi / 2);
  EXPECT_NEAR(spec.beam_angle(1) - spec.beam_angle(0), kPi / 511, 1e-15);
}

TEST(Raycast, AnalyticOracleCases) {
  const auto cases = oracle::raycast_cases();
  ASSERT_GE(cases.size(), 50u);
  for (const auto& c : cases) {
    const World w = oracle::raycast_world(c);
    const auto scan = cast_scan(w, 0, oracle::raycast_lidar(c));
    for (int b = 0; b < 3; ++b) EXPECT_NEAR(scan[static_cast<std::size_t>(b)], c.expected[static_cast<std::size_t>(b)], 1e-6) << c.name << " beam " << b;
  }
}

TEST(Raycast, RangesAlwaysInOpenClosedInterval) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    World w = open_world();
    for (std::uint32_t i = 0; i < 4; ++i) w.robots.push_back(robot_at(i, rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-kPi, kPi)));
    for (int s = 0; s < 4; ++s) w.obstacles.push_back({{rng.uniform(-4, 4), rng.uniform(-4, 4)}, {rng.uniform(-4, 4), rng.uniform(-4, 4)}});
    for (std::size_t i = 0; i < w.robots.size(); ++i)
      for (double r : cast_scan(w, i, LidarSpec{64, kPi, 4.0})) {
        EXPECT_GT(r, 0.0);
        EXPECT_LE(r, 4.0);
      }
  }
}

TEST(Raycast, RaySegmentPrimitive) {
  EXPECT_NEAR(*ray_segment_hit({0, 0}, {1, 0}, {2, -1}, {2, 1}), 2.0, 1e-15);
  EXPECT_FALSE(ray_segment_hit({0, 0}, {-1, 0}, {2, -1}, {2, 1}).has_value());
  EXPECT_FALSE(ray_segment_hit({0, 0}, {1, 0}, {2, 0.5}, {2, 1}).has_value());
  EXPECT_NEAR(*ray_segment_hit({0, 0}, {1, 0}, {3, 0}, {5, 0}), 3.0, 1e-15);
  EXPECT_FALSE(ray_segment_hit({0, 0}, {1, 0}, {0, 1}, {5, 1}).has_value());
}

TEST(Raycast, RayDiscPrimitive) {
  EXPECT_NEAR(*ray_disc_hit({0, 0}, {1, 0}, {2, 0}, 0.5), 1.5, 1e-15);
  EXPECT_NEAR(*ray_disc_hit({0, 0}, {1, 0}, {0, 0}, 0.5), 0.5, 1e-15);  // exit point from inside
  EXPECT_FALSE(ray_disc_hit({0, 0}, {1, 0}, {2, 1}, 0.5).has_value());
  EXPECT_FALSE(ray_disc_hit({0, 0}, {1, 0}, {-2, 0}, 0.5).has_value());
}

TEST(Collisions, RobotPairs) {
  World w = open_world();
  w.robots = {robot_at(0, 0, 0), robot_at(1, 0.2, 0)};
  EXPECT_EQ(detect_collisions(w), (std::vector<std::uint8_t>{1, 1}));
  w.robots[1].pose.x = 0.3;
  EXPECT_EQ(detect_collisions(w), (std::vector<std::uint8_t>{0, 0}));
}

TEST(Collisions, TouchingIsNotColliding) {
  World w = open_world();
  w.robots = {robot_at(0, 0, 0, 0.0, 0.25), robot_at(1, 0.5, 0, 0.0, 0.25)};
  EXPECT_EQ(detect_collisions(w), (std::vector<std::uint8_t>{0, 0}));
  World s = open_world();
  s.robots = {robot_at(0, 0, 0, 0.0, 0.25)};
  s.obstacles.push_back({{0.25, -1}, {0.25, 1}});
  EXPECT_EQ(detect_collisions(s)[0], 0);
}

TEST(Collisions, WallContact) {
  World w = open_world();
  w.robots = {robot_at(0, 0, 0)};
  w.obstacles.push_back({{0.1, -1}, {0.1, 1}});
  EXPECT_EQ(detect_collisions(w)[0], 1);
}

TEST(Collisions, Symmetric) {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    World w = open_world();
    for (std::uint32_t i = 0; i < 6; ++i) w.robots.push_back(robot_at(i, rng.uniform(-1, 1), rng.uniform(-1, 1)));
    const auto hit = detect_collisions(w);
    for (std::size_t i = 0; i < 6; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < 6; ++j) {
        if (i == j) continue;
        const bool pair = distance(w.robots[i].pose.position(), w.robots[j].pose.position()) < 0.24;
        any = any || pair;
        if (pair) {
          EXPECT_TRUE(hit[j]) << "pair " << i << "," << j;
        }
      }
      EXPECT_EQ(hit[i] != 0, any);
    }
  }
}

TEST(WorldStep, ZeroActionsKeepPosesAndAdvanceTick) {
  World w = open_world();
  w.robots = {robot_at(0, 0, 0), robot_at(1, 1, 1, 0.5)};
  const std::vector<Action> a(2);
  const World n = world_step(w, a);
  EXPECT_EQ(n.robots[0].pose, w.robots[0].pose);
  EXPECT_EQ(n.robots[1].pose, w.robots[1].pose);
  EXPECT_EQ(n.tick, w.tick + 1);
}

TEST(WorldStep, TerminalRobotsAreFrozen) {
  World w = open_world();
  w.robots = {robot_at(0, 0, 0), robot_at(1, 1, 1), robot_at(2, -1, -1)};
  w.robots[0].status = RobotStatus::Collided;
  w.robots[1].status = RobotStatus::Arrived;
  w.robots[2].status = RobotStatus::TimedOut;
  const std::vector<Action> a(3, Action{1.0, 1.0});
  const World n = world_step(w, a);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(n.robots[i].pose, w.robots[i].pose);
    EXPECT_EQ(n.robots[i].v, 0.0);
  }
}

TEST(WorldStep, ActionCountMismatchThrows) {
  World w = open_world();
  w.robots = {robot_at(0, 0, 0), robot_at(1, 1, 1)};
  const std::vector<Action> a(1);
  EXPECT_THROW(world_step(w, a), ContractViolation);
}

TEST(WorldStep, OutOfRangeActionThrows) {
  World w = open_world();
  w.robots = {robot_at(0, 0, 0)};
  EXPECT_THROW(world_step(w, std::vector<Action>{{1.5, 0.0}}), ContractViolation);
  EXPECT_THROW(world_step(w, std::vector<Action>{{-0.1, 0.0}}), ContractViolation);
  EXPECT_THROW(world_step(w, std::vector<Action>{{0.5, 1.01}}), ContractViolation);
}

TEST(WorldStep, PermutationOracle) {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    World w = open_world();
    std::vector<Action> actions;
    for (std::uint32_t i = 0; i < 5; ++i) {
      w.robots.push_back(robot_at(i, rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-kPi, kPi)));
      actions.push_back({rng.uniform(0, 1), rng.uniform(-1, 1)});
    }
    std::vector<std::size_t> perm = {0, 1, 2, 3, 4};
    shuffle(std::span<std::size_t>(perm), rng);
    World pw = w;
    std::vector<Action> pa(5);
    for (std::size_t k = 0; k < 5; ++k) {
      pw.robots[k] = w.robots[perm[k]];
      pa[k] = actions[perm[k]];
    }
    const World n = world_step(w, actions);
    const World pn = world_step(pw, pa);
    for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(pn.robots[k], n.robots[perm[k]]);
  }
}

TEST(WorldStep, BitwiseDeterministic) {
  Rng rng(29);
  World w = open_world();
  std::vector<Action> actions;
  for (std::uint32_t i = 0; i < 8; ++i) {
    w.robots.push_back(robot_at(i, rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-kPi, kPi)));
    actions.push_back({rng.uniform(0, 1), rng.uniform(-1, 1)});
  }
  EXPECT_EQ(world_step(w, actions), world_step(w, actions));
}

TEST(WorldValidation, RejectsBadWorlds) {
  World w = open_world();
  w.robots = {robot_at(0, 20, 0)};
  EXPECT_THROW(validate_world(w), ContractViolation);
  w.robots = {robot_at(0, 0, 0)};
  w.dt = 0.0;
  EXPECT_THROW(validate_world(w), ContractViolation);
  EXPECT_THROW((LidarSpec{1, kPi, 4.0}.validate()), ContractViolation);
  EXPECT_THROW((LidarSpec{16, 7.0, 4.0}.validate()), ContractViolation);
  EXPECT_THROW((LidarSpec{16, kPi, 0.0}.validate()), ContractViolation);
}
