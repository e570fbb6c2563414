#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "marlab/game.hpp"

namespace marlab {

/// Composite reward weights: alpha/beta split format vs accuracy, lambda1/
/// lambda2 split action-type vs parameter accuracy inside the accuracy term.
struct RewardWeights {
  double alpha = 0.1;
  double beta = 0.9;
  double lambda1 = 0.2;
  double lambda2 = 0.8;

  void validate() const;
};

/// R = alpha * R_form + beta * (lambda1 * R_act + lambda2 * R_info).
/// All inputs must lie in [0, 1].
double composite_reward(double format_ok, double action_type_score,
                        double param_score, const RewardWeights& weights);

/// Group-relative advantages A_k = (R_k - mu) / sigma with the population
/// standard deviation. A zero-variance group is flagged degenerate and gets
/// all-zero advantages instead of an epsilon floor.
struct AdvantageBatch {
  Vector advantages;
  double mean = 0.0;
  double stddev = 0.0;
  bool degenerate = false;
};

AdvantageBatch normalized_advantage(std::span<const double> rewards);

/// Keep a rollout group iff lower < mean reward < upper (strict).
struct ReweightRule {
  double lower = 0.1;
  double upper = 1.0;

  void validate() const;
  bool keeps(double mean_reward) const {
    return mean_reward > lower && mean_reward < upper;
  }
};

struct GrpoHyperparams {
  double clip_eps = 0.2;
  double kl_coef = 0.04;
  double learning_rate = 0.5;
  int rollouts_k = 8;    // K: rollouts per input
  int iterations_m = 1;  // M: outer iterations (reference refresh)
  int steps_b = 1;       // B: steps per iteration
  int batch_groups = 8;  // inputs per step

  void validate() const;
};

/// One sampled decision: the emitting agent (the indicator), the encoded
/// observation it acted on, the action, and the behavior log-probability.
struct DecisionRecord {
  int agent;
  int state;
  int action;
  double old_log_prob;
};

struct Rollout {
  std::vector<DecisionRecord> decisions;
  double reward = 0.0;  // R_k for the whole rollout
};

/// K rollouts sampled for one input instance.
struct RolloutGroup {
  std::uint64_t input_id = 0;
  std::vector<Rollout> rollouts;

  double mean_reward() const;
  void validate() const;  // K >= 2, finite rewards and log-probs
};

/// Result of the online reweighting filter. Groups whose mean reward falls
/// outside the rule's band are dropped and the batch is refilled to its
/// original size by seeded uniform resampling (with replacement) from the
/// kept groups. If nothing survives, `skip` is set and the batch is empty.
struct ReweightOutcome {
  std::vector<RolloutGroup> batch;
  int n_filtered = 0;
  int n_refilled = 0;
  bool skip = false;
};

ReweightOutcome reweight_batch(const std::vector<RolloutGroup>& groups,
                               const ReweightRule& rule, std::uint64_t seed);

/// v = exp(new_log_prob - old_log_prob); throws on non-finite input.
double importance_ratio(double new_log_prob, double old_log_prob);

/// min(v * A, clamp(v, 1-eps, 1+eps) * A), the PPO-style pessimistic term.
double clipped_term(double v, double advantage, double clip_eps);

/// Value and exact tabular gradient of the clipped, KL-anchored objective
/// over a batch of rollout groups.
struct ObjectiveEval {
  double objective = 0.0;
  std::vector<Matrix> gradients;  // per agent; zero for frozen agents
  double mean_kl_ref = 0.0;       // mean KL(pi || pi_ref) over scored decisions
  double clip_fraction = 0.0;
  int n_scored_decisions = 0;
};

/// Evaluates the group-relative clipped objective with a KL anchor:
/// mean over rollouts of sum_l I * (clip(v, A_k) - lambda KL) / sum_l I,
/// averaged over the batch. Only decisions of `active_agent` contribute
/// (frozen agents' ratios are never computed); pass kAllAgents to score
/// every agent, which is the joint-update control condition.
inline constexpr int kAllAgents = -1;

ObjectiveEval grpo_objective(const std::vector<RolloutGroup>& batch,
                             int active_agent, const JointPolicy& policy,
                             const JointPolicy& old_policy,
                             const JointPolicy& ref_policy,
                             const GrpoHyperparams& hyper);

/// Per-step training metrics, serialized one CSV row per ascent step.
struct StepMetrics {
  int iteration = 0;
  int step = 0;
  int agent = 0;
  double objective = 0.0;
  double mean_kl_ref = 0.0;
  double clip_fraction = 0.0;
  int n_filtered = 0;
  int n_refilled = 0;
  bool skipped = false;

  static std::string csv_header();
  std::string csv_row() const;
};

struct GrpoStepResult {
  JointPolicy policy;
  StepMetrics metrics;
};

/// One gradient-ascent step on the objective. The step is safeguarded: if
/// the batch objective would decrease, the learning rate is halved and the
/// step retried (up to 5 halvings); with no acceptable step the parameters
/// stay untouched and the metrics record a skipped step. An empty batch is
/// the reweighting skip signal and also leaves the policy unchanged.
GrpoStepResult grpo_step(const JointPolicy& policy,
                         const std::vector<RolloutGroup>& batch,
                         int active_agent, const JointPolicy& ref_policy,
                         const GrpoHyperparams& hyper);

}  // namespace marlab
