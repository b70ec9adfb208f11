#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "crowdnav/trainer.hpp"
#include "support/tiny_config.hpp"

using namespace crowdnav;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("crowdnav_test_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

CheckpointErrorKind load_error(const fs::path& p, const std::optional<Digest>& digest = {}) {
  try {
    load_checkpoint(p, digest);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "checkpoint loaded without error";
  return CheckpointErrorKind::Io;
}

}  // namespace

TEST(Trainer, SameSeedSameCurve) {
  const TrainConfig cfg = oracle::tiny_config(3);
  const TrainState a = run_curriculum(cfg);
  const TrainState b = run_curriculum(cfg);
  EXPECT_EQ(a.curve.size(), 6u);
  EXPECT_TRUE(oracle::same_curve(a.curve, b.curve));
  EXPECT_TRUE(oracle::same_model(a, b));
}

TEST(Trainer, DifferentSeedDifferentRun) {
  const TrainState a = run_curriculum(oracle::tiny_config(3));
  const TrainState b = run_curriculum(oracle::tiny_config(4));
  EXPECT_FALSE(oracle::same_model(a, b));
}

TEST(Trainer, ThreadCountDoesNotChangeResults) {
  TrainConfig cfg = oracle::tiny_config(5);
  const TrainState a = run_curriculum(cfg);
  cfg.threads = 3;
  const TrainState b = run_curriculum(cfg);
  EXPECT_TRUE(oracle::same_curve(a.curve, b.curve));
  EXPECT_TRUE(oracle::same_model(a, b));
}

TEST(Trainer, StageOneEndsAtTheIterationCap) {
  const TrainState s = run_curriculum(oracle::tiny_config(2));
  ASSERT_EQ(s.curve.size(), 6u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(s.curve[i].stage, Stage::One);
  for (std::size_t i = 3; i < 6; ++i) EXPECT_EQ(s.curve[i].stage, Stage::Two);
  EXPECT_EQ(s.stage, Stage::Two);
  EXPECT_EQ(s.stage_iteration, 3u);
  ASSERT_EQ(s.runners.size(), 2u);
  EXPECT_EQ(s.runners[0].world.robots.size() + s.runners[1].world.robots.size(), 5u);
}

TEST(Trainer, StageOneEndsOnTheSuccessWindow) {
  TrainConfig cfg = oracle::tiny_config(2);
  cfg.curriculum.max_stage1_iterations = 100;
  cfg.curriculum.success_window = 2;
  cfg.curriculum.success_threshold = 0.0;
  Trainer t(cfg);
  TrainState s = t.initial_state();
  EXPECT_FALSE(t.iterate(s).stage_changed);
  EXPECT_TRUE(t.iterate(s).stage_changed);
  EXPECT_EQ(s.stage, Stage::Two);

  cfg.curriculum.success_threshold = 1.5;
  Trainer never(cfg);
  TrainState u = never.initial_state();
  for (int i = 0; i < 4; ++i) EXPECT_FALSE(never.iterate(u).stage_changed);
}

TEST(Trainer, ScratchTrainsOnStageTwoFromTheStart) {
  TrainConfig cfg = oracle::tiny_config(2);
  cfg.curriculum.enabled = false;
  const TrainState s = run_curriculum(cfg);
  for (const auto& p : s.curve) EXPECT_EQ(p.stage, Stage::Two);
  EXPECT_EQ(s.runners.size(), 2u);
}

TEST(Trainer, NormalizerSeesEveryTransition) {
  const TrainConfig cfg = oracle::tiny_config(1);
  Trainer t(cfg);
  TrainState s = t.initial_state();
  t.iterate(s);
  EXPECT_EQ(s.normalizer.count(), 4u * 24u);
}

TEST(Checkpoint, EncodeDecodeIsByteIdentical) {
  const TrainConfig cfg = oracle::tiny_config(7);
  const TrainState s = run_curriculum(cfg);
  const std::string bytes = encode_checkpoint(make_checkpoint(cfg, s));
  const LoadedCheckpoint back = restore_checkpoint(decode_checkpoint(bytes));
  EXPECT_EQ(back.config.digest(), cfg.digest());
  EXPECT_TRUE(oracle::same_model(s, back.state));
  EXPECT_EQ(encode_checkpoint(make_checkpoint(back.config, back.state)), bytes);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  const TrainConfig cfg = oracle::tiny_config(8);
  const TrainState full = run_curriculum(cfg);
  for (int stop : {1, 2, 3, 4}) {
    const fs::path dir = scratch_dir("resume");
    Trainer t(cfg);
    TrainState s = t.initial_state();
    for (int i = 0; i < stop; ++i) t.iterate(s);
    save_checkpoint(cfg, s, dir / "mid.cm3m");
    LoadedCheckpoint lc = load_checkpoint(dir / "mid.cm3m", cfg.digest());
    const TrainState resumed = run_curriculum(lc.config, std::move(lc.state));
    EXPECT_TRUE(oracle::same_curve(full.curve, resumed.curve)) << "stop " << stop;
    EXPECT_TRUE(oracle::same_model(full, resumed)) << "stop " << stop;
  }
}

TEST(Checkpoint, CorruptionIsReportedByKind) {
  const TrainConfig cfg = oracle::tiny_config(9);
  Trainer t(cfg);
  const TrainState s = t.initial_state();
  const fs::path dir = scratch_dir("corrupt");
  save_checkpoint(cfg, s, dir / "good.cm3m");
  const std::string good = slurp(dir / "good.cm3m");

  std::string bad = good;
  bad[0] = 'X';
  spit(dir / "bad.cm3m", bad);
  EXPECT_EQ(load_error(dir / "bad.cm3m"), CheckpointErrorKind::Format);

  bad = good;
  bad[4] = 9;
  spit(dir / "bad.cm3m", bad);
  EXPECT_EQ(load_error(dir / "bad.cm3m"), CheckpointErrorKind::Version);

  spit(dir / "bad.cm3m", good.substr(0, good.size() / 2));
  EXPECT_EQ(load_error(dir / "bad.cm3m"), CheckpointErrorKind::Truncated);

  bad = good;
  bad[good.size() / 2] ^= 0x10;
  spit(dir / "bad.cm3m", bad);
  EXPECT_EQ(load_error(dir / "bad.cm3m"), CheckpointErrorKind::Checksum);

  EXPECT_EQ(load_error(dir / "good.cm3m", oracle::tiny_config(10).digest()), CheckpointErrorKind::Digest);
  EXPECT_EQ(load_error(dir / "missing.cm3m"), CheckpointErrorKind::Io);
  EXPECT_NO_THROW(load_checkpoint(dir / "good.cm3m", cfg.digest()));
}

TEST(Checkpoint, BlobsRoundTripArbitraryBytes) {
  for (std::size_t n : {0u, 1u, 3u, 4u, 5u, 257u}) {
    std::string bytes(n, '\0');
    for (std::size_t i = 0; i < n; ++i) bytes[i] = static_cast<char>((i * 37 + 11) & 0xff);
    EXPECT_EQ(blob_bytes(blob_tensor("b", bytes)), bytes);
  }
}

TEST(Curriculum, WritesCheckpointsCurveAndConfig) {
  const TrainConfig cfg = oracle::tiny_config(4);
  const fs::path dir = scratch_dir("files");
  CurriculumHooks hooks;
  hooks.out_dir = dir;
  int calls = 0;
  hooks.on_iteration = [&](const TrainState&, const IterationReport&) { ++calls; };
  const TrainState s = run_curriculum(cfg, {}, hooks);
  EXPECT_EQ(calls, 6);
  EXPECT_TRUE(fs::exists(dir / "checkpoint.cm3m"));
  EXPECT_TRUE(fs::exists(dir / "stage1.cm3m"));
  EXPECT_TRUE(fs::exists(dir / "effective_config.json"));
  EXPECT_EQ(TrainConfig::load(dir / "effective_config.json").digest(), cfg.digest());

  std::ifstream csv(dir / "reward_curve.csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "iteration,wall_seconds,mean_episode_reward,success_rate,collision_rate");
  int rows = 0;
  while (std::getline(csv, line)) {
    EXPECT_EQ(line.rfind(std::to_string(rows) + ",", 0), 0u);
    ++rows;
  }
  EXPECT_EQ(rows, 6);

  const LoadedCheckpoint stage1 = load_checkpoint(dir / "stage1.cm3m");
  EXPECT_EQ(stage1.state.iteration, 3u);
  EXPECT_EQ(stage1.state.stage, Stage::Two);
  const LoadedCheckpoint last = load_checkpoint(dir / "checkpoint.cm3m");
  EXPECT_TRUE(oracle::same_model(s, last.state));
}

TEST(Curriculum, DivergenceSavesAnAbortCheckpoint) {
  TrainConfig cfg = oracle::tiny_config(4);
  cfg.ppo.lr_policy = 1e30;
  cfg.ppo.lr_value = 1e30;
  const fs::path dir = scratch_dir("abort");
  CurriculumHooks hooks;
  hooks.out_dir = dir;
  EXPECT_THROW(run_curriculum(cfg, {}, hooks), TrainingError);
  ASSERT_TRUE(fs::exists(dir / "abort.cm3m"));
  const LoadedCheckpoint lc = load_checkpoint(dir / "abort.cm3m");
  EXPECT_TRUE(all_finite(lc.state.model.policy));
}
