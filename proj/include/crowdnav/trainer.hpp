#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "crowdnav/checkpoint.hpp"
#include "crowdnav/config.hpp"
#include "crowdnav/mdp.hpp"
#include "crowdnav/ppo.hpp"
#include "crowdnav/rollout.hpp"
#include "crowdnav/scenarios.hpp"

namespace crowdnav {

/// One row of the reward curve.
struct CurvePoint {
  std::uint64_t iteration = 0;
  double wall_seconds = 0.0;
  double mean_episode_reward = 0.0;
  double success_rate = 0.0;
  double collision_rate = 0.0;
  Stage stage = Stage::One;
  std::int32_t episodes = 0;
};

struct TrainState {
  ActorCritic model;
  RunningNormalizer normalizer;
  Stage stage = Stage::One;
  std::uint64_t iteration = 0;        // completed iterations
  std::uint64_t stage_iteration = 0;  // completed iterations in the current stage
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;
  std::vector<CurvePoint> curve;
  std::vector<WorldRunner> runners;
};

struct IterationReport {
  CurvePoint point;
  LossStats loss;
  EpisodeStats episodes;
  bool stage_changed = false;
};

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const TrainConfig& config() const { return cfg_; }

  TrainState initial_state() const {
    TrainState s;
    s.seed = cfg_.seed;
    s.model = ActorCritic::create(cfg_.net, derive_seed(cfg_.seed, 0x1417));
    s.normalizer = RunningNormalizer(static_cast<std::size_t>(cfg_.net.obs_dim()));
    s.stage = cfg_.curriculum.enabled ? Stage::One : Stage::Two;
    s.runners = make_runners(s.stage);
    return s;
  }

  /// Fresh worlds and per-world rng streams for a stage.
  std::vector<WorldRunner> make_runners(Stage stage) const {
    const StageSpec spec = cfg_.stage_spec(stage);
    const auto worlds = stage_worlds(spec, derive_seed(cfg_.seed, 0x3017));
    std::vector<WorldRunner> runners;
    for (std::size_t k = 0; k < worlds.size(); ++k)
      runners.push_back(WorldRunner::start(spec.scenarios[k], worlds[k],
                                           derive_seed(cfg_.seed, 0x4a11 + static_cast<std::uint64_t>(stage), k), cfg_.lidar));
    return runners;
  }

  bool finished(const TrainState& s) const {
    return s.iteration >= static_cast<std::uint64_t>(cfg_.curriculum.total_iterations);
  }

  /// Collect, update the normalizer, estimate advantages, optimize, then
  /// apply the Stage One -> Stage Two rule.
  IterationReport iterate(TrainState& s) const {
    const auto t0 = std::chrono::steady_clock::now();
    RolloutResult r = collect_rollouts(s.runners, s.model.policy, s.model.value, s.normalizer, cfg_.rollout_settings());
    s.normalizer.update_rows<float>(std::span<const float>(r.batch.raw_obs.data(), static_cast<std::size_t>(r.batch.raw_obs.size())));
    compute_gae(r.batch, cfg_.ppo);
    IterationReport rep;
    rep.loss = ppo_update(s.model, r.batch, cfg_.net, cfg_.ppo, derive_seed(cfg_.seed, 0x99d, s.iteration));
    rep.episodes = r.stats;

    CurvePoint& p = rep.point;
    p.iteration = s.iteration;
    p.stage = s.stage;
    p.episodes = r.stats.episodes;
    if (r.stats.episodes > 0) {
      p.mean_episode_reward = r.stats.mean_reward();
      p.success_rate = r.stats.success_rate();
      p.collision_rate = r.stats.collision_rate();
    } else if (!s.curve.empty()) {
      // No episode ended this iteration: carry the previous values forward.
      p.mean_episode_reward = s.curve.back().mean_episode_reward;
      p.success_rate = s.curve.back().success_rate;
      p.collision_rate = s.curve.back().collision_rate;
    }
    s.wall_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    p.wall_seconds = s.wall_seconds;
    s.curve.push_back(p);
    ++s.iteration;
    ++s.stage_iteration;

    if (s.stage == Stage::One && stage_one_done(s)) {
      s.stage = Stage::Two;
      s.stage_iteration = 0;
      s.runners = make_runners(Stage::Two);
      rep.stage_changed = true;
    }
    return rep;
  }

  bool stage_one_done(const TrainState& s) const {
    const auto& cu = cfg_.curriculum;
    if (s.stage_iteration >= static_cast<std::uint64_t>(cu.max_stage1_iterations)) return true;
    const auto window = static_cast<std::size_t>(cu.success_window);
    if (s.stage_iteration < window || s.curve.size() < window) return false;
    double sum = 0.0;
    for (std::size_t k = s.curve.size() - window; k < s.curve.size(); ++k) sum += s.curve[k].success_rate;
    return sum / static_cast<double>(window) >= cu.success_threshold;
  }

 private:
  TrainConfig cfg_;
};

// ---------------------------------------------------------------------------
// Checkpointing

namespace detail {

inline void write_runner(ByteWriter& w, const WorldRunner& r) {
  const World& world = r.world;
  w.put<std::uint64_t>(world.tick);
  w.put(world.dt);
  w.put(world.bounds);
  w.put<std::uint64_t>(world.robots.size());
  for (const auto& rb : world.robots) {
    w.put(rb.id);
    w.put(rb.pose);
    w.put(rb.v);
    w.put(rb.w);
    w.put(rb.radius);
    w.put(rb.goal);
    w.put(rb.status);
  }
  w.put_vector(world.obstacles);
  w.put(r.rng.state());
  for (const auto& slot : r.slots) {
    w.put(slot.episode_tick);
    w.put(slot.episode_reward);
    w.put<std::uint64_t>(slot.history.size());
    for (const auto& f : slot.history.raw()) w.put_vector(f);
  }
}

inline WorldRunner read_runner(ByteReader& rd, ScenarioSpec spec) {
  WorldRunner r;
  r.spec = std::move(spec);
  World& world = r.world;
  world.tick = rd.get<std::uint64_t>();
  world.dt = rd.get<double>();
  world.bounds = rd.get<Bounds>();
  world.robots.resize(static_cast<std::size_t>(rd.get<std::uint64_t>()));
  for (auto& rb : world.robots) {
    rb.id = rd.get<std::uint32_t>();
    rb.pose = rd.get<Pose>();
    rb.v = rd.get<double>();
    rb.w = rd.get<double>();
    rb.radius = rd.get<double>();
    rb.goal = rd.get<Vec2>();
    rb.status = rd.get<RobotStatus>();
  }
  world.obstacles = rd.get_vector<ObstacleSegment>();
  r.rng.set_state(rd.get<std::uint64_t>());
  r.slots.resize(world.robots.size());
  for (auto& slot : r.slots) {
    slot.episode_tick = rd.get<std::uint64_t>();
    slot.episode_reward = rd.get<double>();
    const auto frames = rd.get<std::uint64_t>();
    for (std::uint64_t k = 0; k < frames; ++k) slot.history.push(rd.get_vector<float>());
  }
  return r;
}

}  // namespace detail

struct LoadedCheckpoint {
  TrainConfig config;
  TrainState state;
};

inline CheckpointFile make_checkpoint(const TrainConfig& cfg, const TrainState& s) {
  CheckpointFile f;
  f.config_digest = cfg.digest();
  append_params(f, "policy/", s.model.policy);
  append_params(f, "value/", s.model.value);
  append_params(f, "adam/policy/m/", s.model.policy_adam.m);
  append_params(f, "adam/policy/v/", s.model.policy_adam.v);
  append_params(f, "adam/value/m/", s.model.value_adam.m);
  append_params(f, "adam/value/v/", s.model.value_adam.v);

  f.tensors.push_back(blob_tensor("blob/config", cfg.to_json().dump()));

  ByteWriter st;
  st.put(static_cast<std::uint8_t>(s.stage));
  st.put(s.iteration);
  st.put(s.stage_iteration);
  st.put(s.seed);
  st.put(s.wall_seconds);
  st.put(s.model.policy_adam.step);
  st.put(s.model.value_adam.step);
  f.tensors.push_back(blob_tensor("blob/state", st.bytes()));

  ByteWriter nm;
  nm.put(s.normalizer.count());
  nm.put_vector(s.normalizer.mean());
  nm.put_vector(s.normalizer.m2());
  f.tensors.push_back(blob_tensor("blob/normalizer", nm.bytes()));

  ByteWriter cv;
  cv.put<std::uint64_t>(s.curve.size());
  for (const auto& p : s.curve) {
    cv.put(p.iteration);
    cv.put(p.wall_seconds);
    cv.put(p.mean_episode_reward);
    cv.put(p.success_rate);
    cv.put(p.collision_rate);
    cv.put(static_cast<std::uint8_t>(p.stage));
    cv.put(p.episodes);
  }
  f.tensors.push_back(blob_tensor("blob/curve", cv.bytes()));

  ByteWriter rn;
  rn.put<std::uint64_t>(s.runners.size());
  for (const auto& r : s.runners) detail::write_runner(rn, r);
  f.tensors.push_back(blob_tensor("blob/runners", rn.bytes()));
  return f;
}

inline void save_checkpoint(const TrainConfig& cfg, const TrainState& s, const std::filesystem::path& path) {
  write_checkpoint_file(path, make_checkpoint(cfg, s));
}

inline LoadedCheckpoint restore_checkpoint(const CheckpointFile& f) {
  LoadedCheckpoint out;
  try {
    out.config = TrainConfig::from_json(nlohmann::json::parse(blob_bytes(f.at("blob/config"))));
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointErrorKind::Format, std::string("embedded config: ") + e.what());
  }
  if (out.config.digest() != f.config_digest)
    throw CheckpointError(CheckpointErrorKind::Digest, "embedded config does not hash to the header digest");
  const TrainConfig& cfg = out.config;
  TrainState& s = out.state;
  try {
    s.model.policy = PolicyParams<float>::zeros(cfg.net);
    s.model.value = ValueParams<float>::zeros(cfg.net);
    s.model.policy_adam = AdamState<PolicyParams<float>>::like(s.model.policy);
    s.model.value_adam = AdamState<ValueParams<float>>::like(s.model.value);
    read_params(f, "policy/", s.model.policy);
    read_params(f, "value/", s.model.value);
    read_params(f, "adam/policy/m/", s.model.policy_adam.m);
    read_params(f, "adam/policy/v/", s.model.policy_adam.v);
    read_params(f, "adam/value/m/", s.model.value_adam.m);
    read_params(f, "adam/value/v/", s.model.value_adam.v);

    ByteReader st(blob_bytes(f.at("blob/state")));
    s.stage = static_cast<Stage>(st.get<std::uint8_t>());
    s.iteration = st.get<std::uint64_t>();
    s.stage_iteration = st.get<std::uint64_t>();
    s.seed = st.get<std::uint64_t>();
    s.wall_seconds = st.get<double>();
    s.model.policy_adam.step = st.get<std::uint64_t>();
    s.model.value_adam.step = st.get<std::uint64_t>();

    ByteReader nm(blob_bytes(f.at("blob/normalizer")));
    const auto count = nm.get<std::uint64_t>();
    auto mean = nm.get_vector<double>();
    auto m2 = nm.get_vector<double>();
    s.normalizer.restore(count, std::move(mean), std::move(m2));

    ByteReader cv(blob_bytes(f.at("blob/curve")));
    s.curve.resize(static_cast<std::size_t>(cv.get<std::uint64_t>()));
    for (auto& p : s.curve) {
      p.iteration = cv.get<std::uint64_t>();
      p.wall_seconds = cv.get<double>();
      p.mean_episode_reward = cv.get<double>();
      p.success_rate = cv.get<double>();
      p.collision_rate = cv.get<double>();
      p.stage = static_cast<Stage>(cv.get<std::uint8_t>());
      p.episodes = cv.get<std::int32_t>();
    }

    ByteReader rn(blob_bytes(f.at("blob/runners")));
    const auto n = rn.get<std::uint64_t>();
    const StageSpec spec = cfg.stage_spec(s.stage);
    if (n != spec.scenarios.size()) throw CheckpointError(CheckpointErrorKind::Format, "world count does not match the stage");
    for (std::uint64_t k = 0; k < n; ++k) s.runners.push_back(detail::read_runner(rn, spec.scenarios[k]));
  } catch (const ContractViolation& e) {
    throw CheckpointError(CheckpointErrorKind::Format, e.what());
  }
  return out;
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                        const std::optional<Digest>& expected_digest = {}) {
  return restore_checkpoint(read_checkpoint_file(path, expected_digest));
}

// ---------------------------------------------------------------------------
// Outputs

inline void write_curve_csv(const std::filesystem::path& path, const std::vector<CurvePoint>& curve) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "iteration,wall_seconds,mean_episode_reward,success_rate,collision_rate\n";
  char line[256];
  for (const auto& p : curve) {
    std::snprintf(line, sizeof line, "%llu,%.3f,%.17g,%.17g,%.17g\n", static_cast<unsigned long long>(p.iteration),
                  p.wall_seconds, p.mean_episode_reward, p.success_rate, p.collision_rate);
    out << line;
  }
}

inline void write_config_snapshot(const std::filesystem::path& path, const TrainConfig& cfg) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << cfg.to_json().dump(2) << "\n";
}

struct CurriculumHooks {
  std::function<void(const TrainState&, const IterationReport&)> on_iteration;
  /// Output directory for checkpoints and the curve; empty disables file output.
  std::filesystem::path out_dir;
};

/// Runs (or resumes) training until the configured iteration budget is spent.
/// Writes periodic checkpoints, the Stage One policy on transition, and the
/// reward curve. A non-finite training signal saves `abort.cm3m` and rethrows.
inline TrainState run_curriculum(const TrainConfig& cfg, std::optional<TrainState> resume = {},
                                 const CurriculumHooks& hooks = {}) {
  Trainer trainer(cfg);
  TrainState s = resume ? std::move(*resume) : trainer.initial_state();
  const bool files = !hooks.out_dir.empty();
  if (files) write_config_snapshot(hooks.out_dir / "effective_config.json", cfg);
  while (!trainer.finished(s)) {
    std::optional<TrainState> before;
    if (files) before = s;
    IterationReport rep;
    try {
      rep = trainer.iterate(s);
    } catch (const TrainingError&) {
      if (files) save_checkpoint(cfg, *before, hooks.out_dir / "abort.cm3m");
      throw;
    }
    if (hooks.on_iteration) hooks.on_iteration(s, rep);
    if (files) {
      if (rep.stage_changed) save_checkpoint(cfg, s, hooks.out_dir / "stage1.cm3m");
      if (cfg.checkpoint_every > 0 && s.iteration % static_cast<std::uint64_t>(cfg.checkpoint_every) == 0) {
        save_checkpoint(cfg, s, hooks.out_dir / "checkpoint.cm3m");
        write_curve_csv(hooks.out_dir / "reward_curve.csv", s.curve);
      }
    }
  }
  if (files) {
    save_checkpoint(cfg, s, hooks.out_dir / "checkpoint.cm3m");
    write_curve_csv(hooks.out_dir / "reward_curve.csv", s.curve);
  }
  return s;
}

}  // namespace crowdnav
