#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "marlab/rng.hpp"

namespace marlab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// One successor of a (state, joint action) pair.
struct Transition {
  int next_state;
  double prob;
};

/// Finite cooperative Markov game <N, S, A, r, P, d> with shared reward and
/// discount gamma in [0, 1). Joint actions are indexed in mixed radix with
/// agent 0 most significant (the last agent varies fastest).
struct MarkovGame {
  int n_agents = 0;
  int n_states = 0;
  std::vector<int> actions_per_agent;
  /// transition[s][a] lists the successors of (s, joint action a);
  /// probabilities in each list sum to 1 within 1e-12.
  std::vector<std::vector<std::vector<Transition>>> transition;
  Matrix reward;        // n_states x n_joint_actions
  Vector initial_dist;  // over states, sums to 1 within 1e-12
  double discount = 0.0;

  int n_joint_actions() const;
  int joint_action_index(std::span<const int> actions) const;
  void decompose_joint_action(int joint, std::span<int> out) const;

  /// Checks all structural invariants; throws std::invalid_argument naming
  /// the first violated row.
  void validate() const;
};

/// Row-wise softmax with max subtraction, safe for logits up to ~1e3.
Matrix softmax_rows(const Matrix& logits);
Matrix log_softmax_rows(const Matrix& logits);

/// Per-agent policy: one softmax action distribution per state. Rows of
/// probs() are strictly positive and sum to 1 within 1e-12 for any finite
/// logits, which keeps KL divergences and importance ratios finite.
struct TabularPolicy {
  int agent_id = 0;
  Matrix logits;  // n_states x n_actions

  int n_states() const { return static_cast<int>(logits.rows()); }
  int n_actions() const { return static_cast<int>(logits.cols()); }
  Matrix probs() const { return softmax_rows(logits); }
  Matrix log_probs() const { return log_softmax_rows(logits); }
};

/// Product policy over all agents, ordered by agent id.
struct JointPolicy {
  std::vector<TabularPolicy> agents;

  int n_agents() const { return static_cast<int>(agents.size()); }
};

/// Probability the joint policy assigns to a joint action at a state:
/// the product of the per-agent probabilities. Throws on out-of-range
/// state or action indices.
double joint_action_prob(const JointPolicy& policy, int state,
                         std::span<const int> actions);

/// Builds the rolling baseline for a micro-step of the active agent:
/// already-committed next-round policies for earlier agents, the active
/// iterate in its own slot, and current-round policies for later agents.
/// Exactly one policy per agent must be supplied across the three groups;
/// a missing or duplicated slot throws.
JointPolicy compose_rolling_baseline(std::span<const TabularPolicy> updated_prev,
                                     std::span<const TabularPolicy> frozen_next,
                                     const TabularPolicy& active);

struct TrajectoryStep {
  int state;
  std::vector<int> actions;     // one per agent
  double reward;
  std::vector<double> log_probs;  // log pi^i(a^i | s) per agent
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
  std::uint64_t seed = 0;
  int horizon = 0;

  double discounted_return(double gamma) const;
};

/// Samples one episode: s0 ~ d, a_t ~ pi(.|s_t), s_{t+1} ~ P. The same seed
/// reproduces the trajectory bit for bit. Horizon must be >= 1.
Trajectory sample_episode(const MarkovGame& game, const JointPolicy& policy,
                          std::uint64_t seed, int horizon);

// --- fixtures and generators ------------------------------------------

/// Canonical 2-state, 2-agent fixture: joint action (0,0) moves s0 -> s1,
/// everything else self-loops, reward 1 only at (s1, (1,1)), gamma 0.9,
/// initial state s0.
MarkovGame make_chain2();

struct RandomGameSpec {
  int n_states = 4;
  int n_agents = 2;
  int actions = 2;     // per agent
  double discount = 0.9;
  std::uint64_t seed = 0;
};

/// Random dense game with row-normalized transitions and rewards in [0, 1].
MarkovGame make_random_game(const RandomGameSpec& spec);

/// Zero-logit (uniform) policy for one agent of the game.
TabularPolicy make_uniform_policy(const MarkovGame& game, int agent);
JointPolicy make_uniform_joint_policy(const MarkovGame& game);

/// Seeded logits drawn uniformly from [-sigma, sigma].
TabularPolicy make_random_policy(const MarkovGame& game, int agent,
                                 double sigma, std::uint64_t seed);

// --- game definition files --------------------------------------------

/// Loads a game from a JSON document with fields n_agents, n_states,
/// actions_per_agent, transition (S x A x S nested arrays), reward (S x A),
/// initial_dist, discount. Validates all invariants and reports the first
/// violated row. Unknown keys are rejected.
MarkovGame load_game(const std::string& path);
MarkovGame parse_game(const std::string& json_text);
std::string game_to_json(const MarkovGame& game);
void save_game(const MarkovGame& game, const std::string& path);

}  // namespace marlab
