#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "crowdnav/errors.hpp"
#include "crowdnav/mdp.hpp"
#include "crowdnav/policy_net.hpp"
#include "crowdnav/ppo.hpp"
#include "crowdnav/rollout.hpp"
#include "crowdnav/scenarios.hpp"
#include "crowdnav/sim_core.hpp"

namespace crowdnav {

using Digest = std::array<std::uint8_t, 32>;

inline Digest sha256(std::string_view bytes) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size())
    throw std::runtime_error("SHA-256 failed");
  return out;
}

inline std::string to_hex(const Digest& d) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  for (auto b : d) {
    s += kHex[b >> 4];
    s += kHex[b & 15];
  }
  return s;
}

struct SimConfig {
  double dt = 0.1;
  double robot_radius = 0.12;
  std::uint64_t horizon = 400;
  friend bool operator==(const SimConfig&, const SimConfig&) = default;
};

struct CurriculumConfig {
  /// false trains on the Stage Two setup from iteration 0 ("scratch").
  bool enabled = true;
  Allocation stage1{{ScenarioId::RandomEmpty, kStageOneRobots}};
  Allocation stage2;
  /// Stage One ends when the mean success rate of the last `success_window`
  /// iterations reaches `success_threshold`, or after `max_stage1_iterations`.
  int success_window = 20;
  double success_threshold = 0.9;
  int max_stage1_iterations = 300;
  int total_iterations = 1000;
  friend bool operator==(const CurriculumConfig&, const CurriculumConfig&) = default;
};

/// Every knob of a training run. Loaded from JSON on top of a profile.
struct TrainConfig {
  std::string profile = "paper";
  std::uint64_t seed = 1;
  LidarSpec lidar;
  SimConfig sim;
  NetConfig net;
  PPOConfig ppo;
  RewardConfig reward;
  CurriculumConfig curriculum;
  ScenarioCatalog catalog = ScenarioCatalog::builtin();
  int threads = 1;
  int checkpoint_every = 25;
  std::string out_dir = "runs/default";

  /// Full-scale constants: 512 beams, 20 then 58 robots.
  static TrainConfig paper() {
    TrainConfig c;
    c.profile = "paper";
    c.lidar = {512, std::numbers::pi, 4.0};
    c.net.n_beams = 512;
    c.curriculum.stage1 = {{ScenarioId::RandomEmpty, 20}};
    c.curriculum.stage2 = {{ScenarioId::Circle, 10},     {ScenarioId::Corridor, 6},         {ScenarioId::Crossing, 8},
                           {ScenarioId::Swap, 8},        {ScenarioId::RandomEmpty, 8},      {ScenarioId::RandomObstacles, 10},
                           {ScenarioId::Evacuation, 8}};
    c.curriculum.max_stage1_iterations = 300;
    c.curriculum.total_iterations = 1000;
    c.out_dir = "runs/paper";
    return c;
  }

  /// Workstation scale: 128 beams, 4 robots in Stage One.
  static TrainConfig desk() {
    TrainConfig c;
    c.profile = "desk";
    c.lidar = {128, std::numbers::pi, 4.0};
    c.net.n_beams = 128;
    c.ppo.minibatch_size = 256;
    c.ppo.lr_policy = 3e-4;
    c.ppo.lr_value = 1e-3;
    c.curriculum.stage1 = {{ScenarioId::RandomEmpty, 4}};
    c.curriculum.stage2 = {{ScenarioId::Circle, 4}, {ScenarioId::RandomObstacles, 4}};
    c.curriculum.max_stage1_iterations = 100;
    c.curriculum.total_iterations = 500;
    c.checkpoint_every = 25;
    c.out_dir = "runs/desk";
    return c;
  }

  static TrainConfig for_profile(const std::string& name) {
    if (name == "paper") return paper();
    if (name == "desk") return desk();
    throw ConfigError("unknown profile '" + name + "' (expected desk or paper)");
  }

  bool strict() const { return profile == "paper"; }

  void validate() const {
    lidar.validate();
    net.validate();
    if (net.n_beams != lidar.n_beams) throw ConfigError("net beam count differs from lidar beam count");
    ppo.validate();
    reward.validate();
    if (!(sim.dt > 0.0)) throw ConfigError("sim.dt must be positive");
    if (!(sim.robot_radius > 0.0)) throw ConfigError("sim.robot_radius must be positive");
    if (sim.horizon < 1) throw ConfigError("sim.horizon must be positive");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (curriculum.success_window < 1) throw ConfigError("curriculum.success_window must be >= 1");
    if (curriculum.total_iterations < 0 || curriculum.max_stage1_iterations < 0)
      throw ConfigError("curriculum iteration counts must be non-negative");
    (void)stage_spec(Stage::One);
    (void)stage_spec(Stage::Two);
  }

  StageSpec stage_spec(Stage stage) const {
    StageSpec s = make_stage(stage, catalog, stage == Stage::One ? curriculum.stage1 : curriculum.stage2, strict());
    for (auto& sc : s.scenarios) {
      sc.robot_radius = sim.robot_radius;
      sc.dt = sim.dt;
    }
    return s;
  }

  RolloutSettings rollout_settings() const { return {net, lidar, reward, sim.horizon, ppo.rollout_length, threads}; }

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {},
                               const std::string& default_profile = "paper");
  static TrainConfig load(const std::filesystem::path& path, const std::string& default_profile = "paper");

  /// SHA-256 of the canonical JSON minus fields that cannot change results.
  Digest digest() const {
    nlohmann::json j = to_json();
    j.erase("out_dir");
    j.erase("threads");
    j.erase("checkpoint_every");
    return sha256(j.dump());
  }
};

namespace detail {

inline nlohmann::json allocation_to_json(const Allocation& a) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, n] : a) j[std::string(to_string(id))] = n;
  return j;
}

inline Allocation allocation_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("allocation must be an object of scenario id -> robot count");
  Allocation a;
  for (const auto& [k, v] : j.items()) a[scenario_from_string(k)] = v.get<int>();
  return a;
}

template <typename V>
void read_field(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace detail

inline nlohmann::json TrainConfig::to_json() const {
  using nlohmann::json;
  json j;
  j["profile"] = profile;
  j["seed"] = seed;
  j["threads"] = threads;
  j["checkpoint_every"] = checkpoint_every;
  j["out_dir"] = out_dir;
  j["lidar"] = {{"n_beams", lidar.n_beams}, {"fov", lidar.fov}, {"max_range", lidar.max_range}};
  j["sim"] = {{"dt", sim.dt}, {"robot_radius", sim.robot_radius}, {"horizon", sim.horizon}};
  j["net"] = {{"conv1_filters", net.conv1_filters}, {"conv1_kernel", net.conv1_kernel}, {"conv1_stride", net.conv1_stride},
              {"conv2_filters", net.conv2_filters}, {"conv2_kernel", net.conv2_kernel}, {"conv2_stride", net.conv2_stride},
              {"fc1", net.fc1},                     {"fc2", net.fc2}};
  j["ppo"] = {{"gamma", ppo.gamma},
              {"lambda", ppo.lambda},
              {"clip_epsilon", ppo.clip_epsilon},
              {"epochs", ppo.epochs},
              {"minibatch_size", ppo.minibatch_size},
              {"lr_policy", ppo.lr_policy},
              {"lr_value", ppo.lr_value},
              {"grad_norm_clip", ppo.grad_norm_clip},
              {"rollout_length", ppo.rollout_length},
              {"entropy_coeff", ppo.entropy_coeff}};
  j["reward"] = {{"r_arrival", reward.r_arrival},       {"omega_g", reward.omega_g},
                 {"r_collision", reward.r_collision},   {"omega_w", reward.omega_w},
                 {"arrival_threshold", reward.arrival_threshold}, {"w_threshold", reward.w_threshold}};
  j["curriculum"] = {{"enabled", curriculum.enabled},
                     {"stage1", detail::allocation_to_json(curriculum.stage1)},
                     {"stage2", detail::allocation_to_json(curriculum.stage2)},
                     {"success_window", curriculum.success_window},
                     {"success_threshold", curriculum.success_threshold},
                     {"max_stage1_iterations", curriculum.max_stage1_iterations},
                     {"total_iterations", curriculum.total_iterations}};
  j["scenario_catalog"] = catalog.to_json();
  return j;
}

inline TrainConfig TrainConfig::from_json(const nlohmann::json& j, const std::filesystem::path& base_dir,
                                          const std::string& default_profile) {
  using detail::read_field;
  using detail::reject_unknown_keys;
  reject_unknown_keys(j,
                      {"profile", "seed", "threads", "checkpoint_every", "out_dir", "lidar", "sim", "net", "ppo", "reward",
                       "curriculum", "scenario_catalog"},
                      "config");
  try {
    TrainConfig c = for_profile(j.value("profile", default_profile));
    read_field(j, "seed", c.seed);
    read_field(j, "threads", c.threads);
    read_field(j, "checkpoint_every", c.checkpoint_every);
    read_field(j, "out_dir", c.out_dir);
    if (j.contains("lidar")) {
      const auto& l = j.at("lidar");
      reject_unknown_keys(l, {"n_beams", "fov", "max_range"}, "lidar");
      read_field(l, "n_beams", c.lidar.n_beams);
      read_field(l, "fov", c.lidar.fov);
      read_field(l, "max_range", c.lidar.max_range);
    }
    c.net.n_beams = c.lidar.n_beams;
    if (j.contains("sim")) {
      const auto& s = j.at("sim");
      reject_unknown_keys(s, {"dt", "robot_radius", "horizon"}, "sim");
      read_field(s, "dt", c.sim.dt);
      read_field(s, "robot_radius", c.sim.robot_radius);
      read_field(s, "horizon", c.sim.horizon);
    }
    if (j.contains("net")) {
      const auto& n = j.at("net");
      reject_unknown_keys(n,
                          {"conv1_filters", "conv1_kernel", "conv1_stride", "conv2_filters", "conv2_kernel", "conv2_stride",
                           "fc1", "fc2"},
                          "net");
      read_field(n, "conv1_filters", c.net.conv1_filters);
      read_field(n, "conv1_kernel", c.net.conv1_kernel);
      read_field(n, "conv1_stride", c.net.conv1_stride);
      read_field(n, "conv2_filters", c.net.conv2_filters);
      read_field(n, "conv2_kernel", c.net.conv2_kernel);
      read_field(n, "conv2_stride", c.net.conv2_stride);
      read_field(n, "fc1", c.net.fc1);
      read_field(n, "fc2", c.net.fc2);
    }
    if (j.contains("ppo")) {
      const auto& p = j.at("ppo");
      reject_unknown_keys(p,
                          {"gamma", "lambda", "clip_epsilon", "epochs", "minibatch_size", "lr_policy", "lr_value",
                           "grad_norm_clip", "rollout_length", "entropy_coeff"},
                          "ppo");
      read_field(p, "gamma", c.ppo.gamma);
      read_field(p, "lambda", c.ppo.lambda);
      read_field(p, "clip_epsilon", c.ppo.clip_epsilon);
      read_field(p, "epochs", c.ppo.epochs);
      read_field(p, "minibatch_size", c.ppo.minibatch_size);
      read_field(p, "lr_policy", c.ppo.lr_policy);
      read_field(p, "lr_value", c.ppo.lr_value);
      read_field(p, "grad_norm_clip", c.ppo.grad_norm_clip);
      read_field(p, "rollout_length", c.ppo.rollout_length);
      read_field(p, "entropy_coeff", c.ppo.entropy_coeff);
    }
    if (j.contains("reward")) {
      const auto& r = j.at("reward");
      reject_unknown_keys(r, {"r_arrival", "omega_g", "r_collision", "omega_w", "arrival_threshold", "w_threshold"},
                          "reward");
      read_field(r, "r_arrival", c.reward.r_arrival);
      read_field(r, "omega_g", c.reward.omega_g);
      read_field(r, "r_collision", c.reward.r_collision);
      read_field(r, "omega_w", c.reward.omega_w);
      read_field(r, "arrival_threshold", c.reward.arrival_threshold);
      read_field(r, "w_threshold", c.reward.w_threshold);
    }
    if (j.contains("curriculum")) {
      const auto& cu = j.at("curriculum");
      reject_unknown_keys(cu,
                          {"enabled", "stage1", "stage2", "success_window", "success_threshold", "max_stage1_iterations",
                           "total_iterations"},
                          "curriculum");
      read_field(cu, "enabled", c.curriculum.enabled);
      if (cu.contains("stage1")) c.curriculum.stage1 = detail::allocation_from_json(cu.at("stage1"));
      if (cu.contains("stage2")) c.curriculum.stage2 = detail::allocation_from_json(cu.at("stage2"));
      read_field(cu, "success_window", c.curriculum.success_window);
      read_field(cu, "success_threshold", c.curriculum.success_threshold);
      read_field(cu, "max_stage1_iterations", c.curriculum.max_stage1_iterations);
      read_field(cu, "total_iterations", c.curriculum.total_iterations);
    }
    if (j.contains("scenario_catalog")) {
      const auto& cat = j.at("scenario_catalog");
      if (cat.is_string()) {
        std::filesystem::path p = cat.get<std::string>();
        if (p.is_relative()) p = base_dir / p;
        c.catalog = ScenarioCatalog::load(p.string());
      } else {
        c.catalog = ScenarioCatalog::from_json(cat);
      }
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ContractViolation& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline TrainConfig TrainConfig::load(const std::filesystem::path& path, const std::string& default_profile) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return from_json(j, path.parent_path(), default_profile);
}

}  // namespace crowdnav
