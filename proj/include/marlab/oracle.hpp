#pragma once

#include <string>
#include <vector>

#include "marlab/game.hpp"

namespace marlab {

/// Exact policy evaluation of a joint policy on a tabular game. All
/// quantities come from dense LU solves, not samples; Bellman residuals
/// stay below 1e-10 for games within the supported size cap.
struct ExactEvaluation {
  Vector v;                     // state values, V = (I - gamma P_pi)^-1 r_pi
  Matrix q;                     // state x joint-action values
  Matrix a_joint;               // Q - V
  std::vector<Matrix> a_agent;  // per agent: state x own-action advantage
  Vector rho;                   // discounted visitation, (1-gamma)-normalized
  double j = 0.0;               // d . V
};

/// Exact quantities certifying the micro-step lower bound for a single-slot
/// policy change: J_new >= J_old + L - C * max_kl, i.e. slack >= 0 up to
/// floating-point error.
struct MicroStepReport {
  int round = 0;
  int agent = 0;
  int microstep = 0;
  double j_old = 0.0;
  double j_new = 0.0;
  double surrogate = 0.0;  // L under the old baseline
  double max_kl = 0.0;     // sup_s KL(old(.|s) || new(.|s)) of the changed slot
  double epsilon = 0.0;    // max |A_joint| under the old baseline
  double c = 0.0;          // 4 gamma epsilon / (1-gamma)^2
  double slack = 0.0;      // j_new - j_old - surrogate + c * max_kl

  /// CSV row: round, agent, microstep, J_old, J_new, L, max_kl, epsilon, C,
  /// slack. Floats use 12 significant digits.
  std::string csv_row() const;
  static std::string csv_header();
};

/// Full evaluation; games are capped at n_states * n_joint_actions <= 1e5.
ExactEvaluation evaluate(const MarkovGame& game, const JointPolicy& policy);

/// J(pi) = d . V with V from the exact linear solve.
double return_j(const MarkovGame& game, const JointPolicy& policy);

/// Discounted state-visitation distribution rho = (1-gamma) d (I - gamma
/// P_pi)^-1; nonnegative and sums to 1.
Vector occupancy(const MarkovGame& game, const JointPolicy& policy);

/// Single-agent advantage A^i(s, a^i) = E_{a^-i ~ pi^-i}[Q(s, (a^-i, a^i))]
/// - V(s). Zero mean under the agent's own policy at every state.
Matrix agent_advantage(const MarkovGame& game, const JointPolicy& policy,
                       int agent);

/// Precomputed pieces of the micro-step objective for one active slot, so a
/// line search can score many candidates without re-solving the game.
struct MicroStepContext {
  int agent = 0;
  double discount = 0.0;
  Vector rho_unnormalized;  // rho / (1-gamma): discounted visitation weights
  Matrix advantage;         // A^i under the baseline
  double epsilon = 0.0;
  double c = 0.0;
  Matrix incumbent_probs;
  Matrix incumbent_log_probs;

  double surrogate(const TabularPolicy& candidate) const;
  double penalized_objective(const TabularPolicy& candidate) const;  // F
  /// Gradient of the surrogate w.r.t. candidate logits, evaluated at the
  /// incumbent (where the KL term has zero gradient).
  Matrix surrogate_gradient_at_incumbent() const;
};

MicroStepContext make_microstep_context(const MarkovGame& game,
                                        const JointPolicy& baseline,
                                        int agent);

/// Surrogate improvement L: the candidate's expected single-agent advantage
/// under the baseline's discounted visitation. The visitation enters
/// unnormalized (weight 1/(1-gamma)), matching the trust-region bound the
/// micro-step certificate checks; occupancy() above stays normalized.
double surrogate_l(const MarkovGame& game, const JointPolicy& baseline,
                   const TabularPolicy& candidate);

/// Max conditional KL: sup over states of KL(old(.|s) || new(.|s)).
double max_kl(const TabularPolicy& p_old, const TabularPolicy& p_new);

/// C = 4 gamma epsilon / (1-gamma)^2.
double penalty_coefficient(double gamma, double epsilon);
double penalty_c(const MarkovGame& game, const JointPolicy& baseline);

/// F = L - C * max_kl(baseline slot, candidate); zero at the incumbent.
double surrogate_f(const MarkovGame& game, const JointPolicy& baseline,
                   const TabularPolicy& candidate);

/// Certifies the micro-step bound for a pair of joint policies differing in
/// exactly the changed_agent slot; throws if any other slot differs.
MicroStepReport microstep_bound(const MarkovGame& game,
                                const JointPolicy& old_joint,
                                const JointPolicy& new_joint,
                                int changed_agent);

}  // namespace marlab
