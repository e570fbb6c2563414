#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "marlab/scheduler.hpp"

namespace marlab {

enum class ExperimentKind {
  VerifyTheory,
  Train,
  AblationReweight,
  AblationParallel,
  AblationRoundsEpochs,
};

/// Configuration parse failure with position information for the CLI.
struct ConfigError : std::runtime_error {
  ConfigError(const std::string& msg, int line_ = 0, int column_ = 0)
      : std::runtime_error(msg), line(line_), column(column_) {}
  int line = 0;
  int column = 0;
};

struct GameSpec {
  enum class Kind { Chain2, File, Random };
  Kind kind = Kind::Chain2;
  std::string path;
  RandomGameSpec random;

  MarkovGame resolve() const;
};

struct TaskSuiteSpec {
  // Generated fixture suite.
  int n_tasks = 20;
  int width = 4;
  int height = 4;
  int horizon = 12;
  std::uint64_t seed = 7;
  int warmup_tasks = 10;
  std::uint64_t warmup_seed = 707;
  // Alternative: explicit task files (first warmup_tasks files feed
  // warm-up when nonempty and warmup_files is empty).
  std::vector<std::string> files;
  std::vector<std::string> warmup_files;

  std::vector<gridgui::GridGuiTask> resolve_train() const;
  std::vector<gridgui::GridGuiTask> resolve_warmup() const;
};

struct BoundSuiteSpec {
  long trials = 1000;            // per game
  double perturbation = 4.0;     // logit noise amplitude
  std::uint64_t seed = 424242;
  bool include_main_game = true;
  std::vector<RandomGameSpec> games;
};

struct RoundsEpochsArm {
  int rounds;
  int epochs_per_round;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Train;
  bool use_gridgui = true;  // false: train on the game
  GameSpec game;
  TaskSuiteSpec tasks;
  RewardWeights weights;
  ScheduleConfig schedule;  // seed field is overridden per run
  std::string out_dir = "out";
  std::vector<std::uint64_t> seeds{1};
  BoundSuiteSpec bound_suite;
  std::vector<RoundsEpochsArm> arms{{10, 2}, {2, 10}};
};

ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config(const std::string& json_text);

/// One named invariant suite outcome for the summary document.
struct SuiteResult {
  std::string name;
  bool run = false;
  bool passed = false;
  std::string detail;
};

struct SeedRunSummary {
  std::uint64_t seed = 0;
  std::string arm;
  TrainingLog log;
};

/// Machine-readable summary: per-seed final J, per-round deltas, slack
/// extrema, filtered-sample fractions, suite outcomes. The timestamp is the
/// only non-deterministic field; CSV bodies stay byte-reproducible.
std::string emit_summary(const ExperimentConfig& config,
                         const std::vector<SeedRunSummary>& runs,
                         const std::vector<SuiteResult>& suites);

/// Randomized micro-step bound certification over a set of games: random
/// single-slot policy perturbations must keep the certificate slack above
/// -1e-8 in every trial.
struct BoundSuiteOutcome {
  long trials = 0;
  long violations = 0;
  double min_slack = 0.0;
};
BoundSuiteOutcome run_bound_suite(const std::vector<MarkovGame>& games,
                                  long trials_per_game, double perturbation,
                                  std::uint64_t seed);

/// Runs the configured experiment, writing rounds.csv / metrics.csv /
/// microstep_reports.csv per seed plus summary.json. Returns the process
/// exit status: 0 when every configured invariant suite passes, 1 on
/// runtime failure or a failed suite.
int run_experiment(const ExperimentConfig& config);

// --- policy files (used by the serve verb and final artifacts) ----------

std::string policy_to_json(const TabularPolicy& policy);
TabularPolicy parse_policy(const std::string& json_text);
void save_policy(const TabularPolicy& policy, const std::string& path);
TabularPolicy load_policy(const std::string& path);

// CSV assembly, exposed for tests.
std::string rounds_csv(const std::vector<SeedRunSummary>& runs);
std::string metrics_csv(const std::vector<SeedRunSummary>& runs);
std::string microsteps_csv(const std::vector<SeedRunSummary>& runs);

}  // namespace marlab
