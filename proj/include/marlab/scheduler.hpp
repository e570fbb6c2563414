#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "marlab/gridgui.hpp"
#include "marlab/grpo.hpp"
#include "marlab/oracle.hpp"
#include "marlab/rollout.hpp"
#include "marlab/service.hpp"

namespace marlab {

enum class UpdateMode { Sequential, Parallel, Joint };
enum class SolverKind { Exact, Grpo };
enum class TransportKind { InProcess, Remote };

/// Per-agent warm-up and stage-2 settings.
struct AgentSchedule {
  GrpoHyperparams grpo;
  ReweightRule reweight;
  bool reweight_enabled = true;
  int exact_microsteps = 8;  // K_i for the exact solver
};

struct WarmupSpec {
  enum class Kind { Skip, Random, Staged };
  Kind kind = Kind::Skip;
  double sigma = 0.5;  // Random: logits drawn uniformly from [-sigma, sigma]
  // Staged (GridGUI): cross-entropy imitation of the scripted planner for
  // the Navigator, single-agent GRPO against scripted instructions for the
  // Interactor.
  int imitation_passes = 12;
  double imitation_rate = 0.5;
  GrpoHyperparams interactor_rl{.learning_rate = 2.0,
                                .rollouts_k = 6,
                                .iterations_m = 1,
                                .steps_b = 8,
                                .batch_groups = 6};
};

struct EarlyStopRule {
  bool enabled = false;
  double tolerance = 1e-6;
  int patience = 3;  // consecutive small deltas before stopping
};

struct ScheduleConfig {
  int rounds = 10;
  UpdateMode mode = UpdateMode::Sequential;
  SolverKind solver = SolverKind::Grpo;
  TransportKind transport = TransportKind::InProcess;
  std::vector<int> agent_order;  // permutation of 0..n-1
  std::vector<AgentSchedule> agents;
  WarmupSpec warmup;
  EarlyStopRule early_stop;
  std::uint64_t seed = 0;
  int game_horizon = 40;   // rollout horizon on tabular games
  int eval_episodes = 8;   // Monte-Carlo evaluation episodes per input
  double exact_step_init = 0.5;

  void validate(int n_agents) const;
};

struct RoundLog {
  int round = 0;  // 0 is the post-warm-up baseline
  bool has_exact = false;
  double j_exact = 0.0;
  double j_mc = 0.0;
  double delta = 0.0;  // vs the previous round's headline value
};

struct TrainingLog {
  std::vector<RoundLog> rounds;
  std::vector<std::pair<int, StepMetrics>> steps;  // (round, metrics)
  std::vector<MicroStepReport> microsteps;         // exact mode only
  std::vector<long> filtered_by_agent;
  std::vector<long> scored_steps_by_agent;
  int max_resident_blocks = 0;
  bool early_stopped = false;
  double wall_clock_seconds = 0.0;
  JointPolicy final_policies;
};

/// Deterministic seed derivations shared by the trainer, its tests, and the
/// transport-equivalence checks. agent is the updating agent's id (-1 for
/// joint updates); seeds depend on ids, not on the update order, so a
/// parallel block and a sequential block with the same round-start
/// complement draw identical rollouts.
std::uint64_t rollout_seed(std::uint64_t config_seed, int round, int agent,
                           int iteration, int step, int group);
std::uint64_t reweight_seed(std::uint64_t config_seed, int round, int agent,
                            int iteration, int step);
std::uint64_t eval_seed(std::uint64_t config_seed, int round, long input,
                        int episode);
std::uint64_t warmup_seed(std::uint64_t config_seed, int agent);

/// Round-level interleaved trainer: one agent updates per block while the
/// complement stays frozen (served in-process or over the wire), with
/// parallel (Jacobi) and joint-update baselines for ablations.
class InterleavedTrainer {
 public:
  /// Tabular-game context. The exact solver maximizes the KL-penalized
  /// surrogate with certified micro-steps; the GRPO solver trains from
  /// sampled rollouts on the same game.
  InterleavedTrainer(MarkovGame game, ScheduleConfig config);

  /// GridGUI context (GRPO solver only). Warm-up uses the warm-up suite;
  /// stage 2 trains on the training suite.
  InterleavedTrainer(std::vector<gridgui::GridGuiTask> train_tasks,
                     std::vector<gridgui::GridGuiTask> warmup_tasks,
                     RewardWeights weights, ScheduleConfig config);

  ~InterleavedTrainer();

  /// Stage 1: independent per-agent initialization.
  void warm_up();

  /// One round in the configured mode; rounds are 1-based.
  void run_round(int round);
  void run_parallel_round(int round);
  void run_joint_round(int round);

  /// Warm-up, transport setup, N rounds, per-round evaluation and logging.
  TrainingLog run_training();

  JointPolicy policies() const;
  int resident_trainable_blocks() const;
  /// Remote mode only: the live service for one agent (null otherwise).
  PolicyServer* service(int agent);
  bool has_exact_eval() const { return game_.has_value(); }
  double evaluate_exact() const;
  double evaluate_mc(int round);
  const ScheduleConfig& config() const { return config_; }
  const TrainingLog& log() const { return log_; }

 private:
  struct AgentSlot {
    std::optional<TabularPolicy> local;  // resident trainable block
    std::shared_ptr<const PolicySnapshot> committed;  // in-process serving
    std::unique_ptr<PolicyServer> server;             // remote serving
    std::unique_ptr<RemoteAgentHandle> remote;
  };

  void init_policies();
  void setup_transport();
  void note_residency();
  TabularPolicy pull_local(int agent);
  void commit(int agent, TabularPolicy policy);
  TabularPolicy committed_policy(int agent) const;
  AgentHandle* handle_for(
      int agent, const std::shared_ptr<const PolicySnapshot>& override_snap,
      std::vector<std::unique_ptr<AgentHandle>>& owned);
  void run_grpo_block(int round, int agent,
                      const std::vector<std::shared_ptr<const PolicySnapshot>>&
                          complement_override);
  void run_exact_block(int round, int agent);
  void warm_up_staged();

  std::optional<MarkovGame> game_;
  std::unique_ptr<RolloutDomain> domain_;
  std::unique_ptr<GridGuiDomain> warmup_domain_;
  RewardWeights weights_;
  ScheduleConfig config_;
  int n_agents_ = 0;
  std::vector<AgentSlot> slots_;
  std::vector<double> exact_step_size_;
  TrainingLog log_;
  bool transport_ready_ = false;
};

}  // namespace marlab
