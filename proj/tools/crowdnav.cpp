#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "crowdnav.hpp"

using namespace crowdnav;
namespace fs = std::filesystem;

namespace {

enum Exit : int { kOk = 0, kRuntime = 1, kUsage = 2, kCheckpoint = 3, kValidation = 4 };

struct ConfigFlags {
  std::string config;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> threads;
};

void add_config_flags(CLI::App* app, ConfigFlags& f) {
  app->add_option("--config", f.config, "JSON config file (keys override the profile)");
  app->add_option("--profile", f.profile, "Base profile: desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  app->add_option("--seed", f.seed, "Master seed");
  app->add_option("--out", f.out, "Output directory");
  app->add_option("--threads", f.threads, "Worlds collected in parallel");
}

/// Profile, then config file, then flags.
TrainConfig resolve_config(const ConfigFlags& f) {
  nlohmann::json j = nlohmann::json::object();
  fs::path base;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ConfigError("cannot open config '" + f.config + "'");
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config '" + f.config + "': " + e.what());
    }
    base = fs::path(f.config).parent_path();
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (!f.profile.empty()) j["profile"] = f.profile;
  if (f.seed) j["seed"] = *f.seed;
  if (!f.out.empty()) j["out_dir"] = f.out;
  if (f.threads) j["threads"] = *f.threads;
  return TrainConfig::from_json(j, base);
}

std::string checkpoint_digest(const LoadedCheckpoint& c) { return to_hex(c.config.digest()).substr(0, 16); }

// ---------------------------------------------------------------------------

struct TrainArgs {
  ConfigFlags cfg;
  std::string resume;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg = resolve_config(a.cfg);
  std::optional<TrainState> resume;
  if (!a.resume.empty()) {
    LoadedCheckpoint lc = load_checkpoint(a.resume);
    if (lc.config.digest() != cfg.digest())
      throw CheckpointError(CheckpointErrorKind::Digest, "checkpoint was written by a different config; resume with its "
                                                         "effective_config.json");
    resume = std::move(lc.state);
  }
  CurriculumHooks hooks;
  hooks.out_dir = cfg.out_dir;
  hooks.on_iteration = [&](const TrainState& s, const IterationReport& r) {
    if (a.quiet) return;
    std::printf("iteration=%llu stage=%d episodes=%d mean_reward=%.4f success=%.3f collision=%.3f policy_loss=%.5f "
                "value_loss=%.5f wall=%.1fs%s\n",
                static_cast<unsigned long long>(r.point.iteration), r.point.stage == Stage::One ? 1 : 2, r.point.episodes,
                r.point.mean_episode_reward, r.point.success_rate, r.point.collision_rate, r.loss.policy_loss,
                r.loss.value_loss, s.wall_seconds, r.stage_changed ? " stage_transition" : "");
    std::fflush(stdout);
  };
  const TrainState s = run_curriculum(cfg, std::move(resume), hooks);
  std::printf("done iterations=%llu stage=%d out=%s\n", static_cast<unsigned long long>(s.iteration),
              s.stage == Stage::One ? 1 : 2, cfg.out_dir.c_str());
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string scenario;
  std::optional<int> robots;
  std::size_t episodes = 100;
  std::uint64_t seed = 0;
  bool deterministic = true;
  std::string trajectory;
  std::size_t log_episode = 0;
  std::string out;
};

ScenarioSpec pick_scenario(const TrainConfig& cfg, const std::string& name, std::optional<int> robots) {
  if (name.empty()) {
    ScenarioSpec spec = cfg.stage_spec(Stage::One).scenarios.front();
    if (robots) spec.n_robots = *robots;
    validate(spec);
    return spec;
  }
  return evaluation_scenario(cfg, scenario_from_string(name), robots);
}

nlohmann::json trajectory_meta(const LoadedCheckpoint& ckpt, const ScenarioSpec& spec, const EvalArgs& a) {
  return {{"config", ckpt.config.to_json()},
          {"scenario", std::string(to_string(spec.id))},
          {"robots", spec.n_robots},
          {"seed", a.seed},
          {"episode", a.log_episode},
          {"deterministic", a.deterministic}};
}

int cmd_eval(const EvalArgs& a) {
  const LoadedCheckpoint ckpt = load_checkpoint(a.checkpoint);
  const ScenarioSpec spec = pick_scenario(ckpt.config, a.scenario, a.robots);
  const EvalOptions opt = evaluation_options(ckpt.config, a.log_episode);
  std::string trajectory = a.trajectory;
  if (trajectory.empty() && !a.out.empty()) trajectory = (fs::path(a.out) / "trajectory.csv").string();
  TrajectoryLog log;
  const EvalSummary sum =
      evaluate_policy(ckpt, spec, a.episodes, a.seed, a.deterministic, opt, trajectory.empty() ? nullptr : &log);
  const std::string line = sum.line() + " deterministic=" + (a.deterministic ? "true" : "false") +
                           " seed=" + std::to_string(a.seed) + " config=" + checkpoint_digest(ckpt);
  std::printf("%s\n", line.c_str());
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_config_snapshot(fs::path(a.out) / "effective_config.json", ckpt.config);
    std::ofstream(fs::path(a.out) / "eval_summary.txt") << line << "\n";
  }
  if (!trajectory.empty()) {
    export_trajectories(log, trajectory);
    std::ofstream(trajectory + ".meta.json") << trajectory_meta(ckpt, spec, a).dump(2) << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct ReplayArgs {
  std::string trajectory;
  std::string meta;
};

int cmd_replay(const ReplayArgs& a) {
  const std::string meta_path = a.meta.empty() ? a.trajectory + ".meta.json" : a.meta;
  std::ifstream in(meta_path);
  if (!in) throw ConfigError("cannot open replay metadata '" + meta_path + "'");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("replay metadata: " + std::string(e.what()));
  }
  TrainConfig cfg;
  ScenarioSpec spec;
  std::uint64_t seed = 0;
  std::size_t episode = 0;
  try {
    cfg = TrainConfig::from_json(meta.at("config"));
    spec = evaluation_scenario(cfg, scenario_from_string(meta.at("scenario").get<std::string>()), meta.at("robots").get<int>());
    seed = meta.at("seed").get<std::uint64_t>();
    episode = meta.at("episode").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("replay metadata: " + std::string(e.what()));
  }
  const TrajectoryLog log = parse_trajectories(a.trajectory);
  const ReplayReport rep = replay_trajectory(spec, seed, episode, log, evaluation_options(cfg, episode));
  if (!rep.bit_exact) {
    std::printf("replay MISMATCH rows_checked=%zu: %s\n", rep.rows_checked, rep.first_mismatch.c_str());
    return kValidation;
  }
  std::printf("replay bit-exact rows=%zu ticks=%llu\n", rep.rows_checked, static_cast<unsigned long long>(rep.ticks));
  return kOk;
}

// ---------------------------------------------------------------------------

struct ServeArgs {
  std::string checkpoint;
  std::string address = "127.0.0.1";
  std::uint16_t port = 7878;
};

int cmd_serve(const ServeArgs& a) {
  const LoadedCheckpoint ckpt = load_checkpoint(a.checkpoint);
  auto engine = std::make_shared<const InferenceEngine>(InferenceEngine::from_checkpoint(ckpt));

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  PolicyServer server(engine, a.address, a.port);
  const std::uint16_t port = server.bind();
  server.start();
  std::printf("listening address=%s port=%u n_beams=%d config=%s\n", a.address.c_str(), port, engine->n_beams(),
              checkpoint_digest(ckpt).c_str());
  std::fflush(stdout);
  int sig = 0;
  sigwait(&signals, &sig);
  server.stop();
  std::printf("stopped signal=%d\n", sig);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-robot navigation: train, evaluate, replay and serve PPO policies"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "crowdnav 1.0.0");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Run (or resume) curriculum training");
  add_config_flags(t, train.cfg);
  t->add_option("--resume", train.resume, "Checkpoint to continue from");
  t->add_flag("--quiet", train.quiet, "Only print the final line");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on one scenario");
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  e->add_option("--scenario", eval.scenario, "Scenario id (default: the checkpoint's Stage One scenario)");
  e->add_option("--robots", eval.robots, "Robots per world");
  e->add_option("--episodes", eval.episodes, "Robot episodes to evaluate")->check(CLI::PositiveNumber);
  e->add_option("--seed", eval.seed, "Evaluation seed");
  e->add_flag("--deterministic,!--stochastic", eval.deterministic, "Mean actions (default) or sampled actions");
  e->add_option("--trajectory", eval.trajectory, "Write the logged world-episode as CSV");
  e->add_option("--log-episode", eval.log_episode, "World-episode to log");
  e->add_option("--out", eval.out, "Directory for the summary, config snapshot and trajectory");

  ReplayArgs replay;
  auto* r = app.add_subcommand("replay", "Re-execute a trajectory CSV and check it bit for bit");
  r->add_option("--trajectory", replay.trajectory, "Trajectory CSV written by eval")->required();
  r->add_option("--meta", replay.meta, "Metadata file (default: <trajectory>.meta.json)");

  ServeArgs serve;
  auto* s = app.add_subcommand("serve", "Serve a checkpoint over TCP (newline-delimited JSON)");
  s->add_option("--checkpoint", serve.checkpoint, "Checkpoint file")->required();
  s->add_option("--address", serve.address, "Bind address");
  s->add_option("--port", serve.port, "TCP port (0 picks a free one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(eval);
    if (*r) return cmd_replay(replay);
    if (*s) return cmd_serve(serve);
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "config error: %s\n", err.what());
    return kUsage;
  } catch (const CheckpointError& err) {
    std::fprintf(stderr, "%s\n", err.what());
    return kCheckpoint;
  } catch (const TrainingError& err) {
    std::fprintf(stderr, "training aborted: %s\n", err.what());
    return kRuntime;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kRuntime;
  }
  return kUsage;
}
