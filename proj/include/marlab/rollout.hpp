#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "marlab/game.hpp"
#include "marlab/gridgui.hpp"
#include "marlab/grpo.hpp"

namespace marlab {

struct SampleResult {
  int action;
  double log_prob;
};

/// Immutable snapshot of one agent's policy with precomputed tables. The
/// in-process handle and the network service sample through the same code
/// path, so identical (observation, seed, snapshot) triples produce
/// bit-identical results on both transports.
struct PolicySnapshot {
  TabularPolicy policy;
  Matrix probs;
  Matrix log_probs;
  std::uint64_t version = 0;

  static std::shared_ptr<const PolicySnapshot> make(TabularPolicy policy,
                                                    std::uint64_t version);
};

SampleResult sample_from_snapshot(const PolicySnapshot& snapshot, int state,
                                  std::uint64_t seed);

/// How a trainer talks to an agent it does not own: sample an action for an
/// encoded observation, or fetch the full distribution.
class AgentHandle {
 public:
  virtual ~AgentHandle() = default;
  virtual SampleResult sample(int state, std::uint64_t seed) = 0;
  virtual Vector distribution(int state) = 0;
};

class LocalAgentHandle : public AgentHandle {
 public:
  explicit LocalAgentHandle(std::shared_ptr<const PolicySnapshot> snapshot)
      : snapshot_(std::move(snapshot)) {}

  SampleResult sample(int state, std::uint64_t seed) override {
    return sample_from_snapshot(*snapshot_, state, seed);
  }
  Vector distribution(int state) override {
    return snapshot_->probs.row(state).transpose();
  }

 private:
  std::shared_ptr<const PolicySnapshot> snapshot_;
};

/// Adapts an environment family to group-based rollout collection. Agent i
/// observes observation_count(i) encoded states and picks among
/// action_count(i) actions; one rollout records every decision with its
/// behavior log-probability plus the scalar rollout reward R_k.
class RolloutDomain {
 public:
  virtual ~RolloutDomain() = default;
  virtual int n_agents() const = 0;
  virtual int observation_count(int agent) const = 0;
  virtual int action_count(int agent) const = 0;
  /// Size of the input pool (tasks); 0 means inputs are seed-generated.
  virtual long input_pool_size() const = 0;
  virtual Rollout run_rollout(std::span<AgentHandle* const> agents,
                              std::uint64_t input_id,
                              std::uint64_t seed) const = 0;
};

/// Markov-game domain: the group's input fixes the initial state, rewards
/// are horizon-truncated discounted returns, every agent observes the raw
/// state index.
class TabularGameDomain : public RolloutDomain {
 public:
  TabularGameDomain(MarkovGame game, int horizon);

  int n_agents() const override { return game_.n_agents; }
  int observation_count(int) const override { return game_.n_states; }
  int action_count(int agent) const override {
    return game_.actions_per_agent[agent];
  }
  long input_pool_size() const override { return 0; }
  Rollout run_rollout(std::span<AgentHandle* const> agents,
                      std::uint64_t input_id,
                      std::uint64_t seed) const override;

  const MarkovGame& game() const { return game_; }
  int horizon() const { return horizon_; }

 private:
  MarkovGame game_;
  int horizon_;
};

/// Navigator/Interactor domain over a task suite: the input selects the
/// task, the Navigator emits an instruction token, the Interactor answers
/// it, and R_k is the mean per-step composite reward of the episode.
class GridGuiDomain : public RolloutDomain {
 public:
  GridGuiDomain(std::vector<gridgui::GridGuiTask> tasks, RewardWeights weights);

  int n_agents() const override { return 2; }
  int observation_count(int agent) const override;
  int action_count(int agent) const override;
  long input_pool_size() const override {
    return static_cast<long>(tasks_.size());
  }
  Rollout run_rollout(std::span<AgentHandle* const> agents,
                      std::uint64_t input_id,
                      std::uint64_t seed) const override;

  const std::vector<gridgui::GridGuiTask>& tasks() const { return tasks_; }
  const RewardWeights& weights() const { return weights_; }
  int n_elements() const { return n_elements_; }

 private:
  std::vector<gridgui::GridGuiTask> tasks_;
  RewardWeights weights_;
  int n_elements_;
};

/// K rollouts for one input with per-rollout derived seeds.
RolloutGroup collect_group(const RolloutDomain& domain,
                           std::span<AgentHandle* const> agents,
                           std::uint64_t input_id, int k, std::uint64_t seed);

}  // namespace marlab
