#include "marlab/oracle.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace marlab {

namespace {

constexpr long kOracleSizeCap = 100000;  // n_states * n_joint_actions

void check_size(const MarkovGame& game) {
  const long cells = static_cast<long>(game.n_states) * game.n_joint_actions();
  if (cells > kOracleSizeCap)
    throw std::invalid_argument(
        "game too large for the exact oracle: " + std::to_string(cells) +
        " state-action cells (cap " + std::to_string(kOracleSizeCap) + ")");
}

void check_shapes(const MarkovGame& game, const JointPolicy& policy) {
  if (policy.n_agents() != game.n_agents)
    throw std::invalid_argument("policy must cover every agent");
  for (int i = 0; i < game.n_agents; ++i) {
    const TabularPolicy& p = policy.agents[i];
    if (p.n_states() != game.n_states ||
        p.n_actions() != game.actions_per_agent[i])
      throw std::invalid_argument("policy shape mismatch for agent " +
                                  std::to_string(i));
  }
}

std::string fmt12(double x) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.12g", x);
  return buf;
}

}  // namespace

std::string MicroStepReport::csv_header() {
  return "round,agent,microstep,J_old,J_new,L,max_kl,epsilon,C,slack";
}

std::string MicroStepReport::csv_row() const {
  return std::to_string(round) + "," + std::to_string(agent) + "," +
         std::to_string(microstep) + "," + fmt12(j_old) + "," + fmt12(j_new) +
         "," + fmt12(surrogate) + "," + fmt12(max_kl) + "," + fmt12(epsilon) +
         "," + fmt12(c) + "," + fmt12(slack);
}

ExactEvaluation evaluate(const MarkovGame& game, const JointPolicy& policy) {
  check_size(game);
  check_shapes(game, policy);

  const int ns = game.n_states;
  const int na = game.n_joint_actions();
  const double gamma = game.discount;

  std::vector<Matrix> probs;
  probs.reserve(game.n_agents);
  for (const TabularPolicy& p : policy.agents) probs.push_back(p.probs());

  // Joint action weights per state and the induced P_pi, r_pi.
  Matrix joint_w(ns, na);
  std::vector<int> decomp(game.n_agents);
  for (int a = 0; a < na; ++a) {
    game.decompose_joint_action(a, decomp);
    for (int s = 0; s < ns; ++s) {
      double w = 1.0;
      for (int i = 0; i < game.n_agents; ++i) w *= probs[i](s, decomp[i]);
      joint_w(s, a) = w;
    }
  }

  Matrix p_pi = Matrix::Zero(ns, ns);
  Vector r_pi = Vector::Zero(ns);
  for (int s = 0; s < ns; ++s) {
    for (int a = 0; a < na; ++a) {
      const double w = joint_w(s, a);
      if (w == 0.0) continue;
      r_pi[s] += w * game.reward(s, a);
      for (const Transition& t : game.transition[s][a])
        p_pi(s, t.next_state) += w * t.prob;
    }
  }

  ExactEvaluation out;
  Matrix system = Matrix::Identity(ns, ns) - gamma * p_pi;
  Eigen::PartialPivLU<Matrix> lu(system);
  out.v = lu.solve(r_pi);
  if (!out.v.allFinite()) throw std::runtime_error("value solve failed");

  out.q = Matrix(ns, na);
  for (int s = 0; s < ns; ++s) {
    for (int a = 0; a < na; ++a) {
      double next = 0.0;
      for (const Transition& t : game.transition[s][a])
        next += t.prob * out.v[t.next_state];
      out.q(s, a) = game.reward(s, a) + gamma * next;
    }
  }
  out.a_joint = out.q.colwise() - out.v;

  out.a_agent.resize(game.n_agents);
  for (int i = 0; i < game.n_agents; ++i) {
    Matrix acc = Matrix::Zero(ns, game.actions_per_agent[i]);
    for (int a = 0; a < na; ++a) {
      game.decompose_joint_action(a, decomp);
      for (int s = 0; s < ns; ++s) {
        double w = 1.0;
        for (int k = 0; k < game.n_agents; ++k)
          if (k != i) w *= probs[k](s, decomp[k]);
        acc(s, decomp[i]) += w * out.q(s, a);
      }
    }
    out.a_agent[i] = acc.colwise() - out.v;
  }

  // (I - gamma P_pi)^T y = d; rho = (1-gamma) y sums to 1 exactly in theory.
  Eigen::PartialPivLU<Matrix> lu_t(system.transpose());
  Vector y = lu_t.solve(game.initial_dist);
  if (!y.allFinite()) throw std::runtime_error("occupancy solve failed");
  out.rho = (1.0 - gamma) * y;

  out.j = game.initial_dist.dot(out.v);
  return out;
}

double return_j(const MarkovGame& game, const JointPolicy& policy) {
  return evaluate(game, policy).j;
}

Vector occupancy(const MarkovGame& game, const JointPolicy& policy) {
  return evaluate(game, policy).rho;
}

Matrix agent_advantage(const MarkovGame& game, const JointPolicy& policy,
                       int agent) {
  if (agent < 0 || agent >= game.n_agents)
    throw std::invalid_argument("agent index out of range");
  return evaluate(game, policy).a_agent[agent];
}

double MicroStepContext::surrogate(const TabularPolicy& candidate) const {
  const Matrix cand = candidate.probs();
  double l = 0.0;
  for (Eigen::Index s = 0; s < advantage.rows(); ++s)
    l += rho_unnormalized[s] * cand.row(s).dot(advantage.row(s));
  return l;
}

double MicroStepContext::penalized_objective(
    const TabularPolicy& candidate) const {
  const Matrix cand_log = candidate.log_probs();
  double sup = 0.0;
  for (Eigen::Index s = 0; s < incumbent_probs.rows(); ++s) {
    const double kl =
        incumbent_probs.row(s)
            .cwiseProduct(incumbent_log_probs.row(s) - cand_log.row(s))
            .sum();
    if (kl > sup) sup = kl;
  }
  return surrogate(candidate) - c * sup;
}

Matrix MicroStepContext::surrogate_gradient_at_incumbent() const {
  // d L / d z(s,b) = rho_u(s) pi(b|s) (A(s,b) - sum_a pi(a|s) A(s,a)).
  Matrix grad(advantage.rows(), advantage.cols());
  for (Eigen::Index s = 0; s < advantage.rows(); ++s) {
    const double mean = incumbent_probs.row(s).dot(advantage.row(s));
    grad.row(s) = rho_unnormalized[s] *
                  (incumbent_probs.row(s).array() *
                   (advantage.row(s).array() - mean))
                      .matrix();
  }
  return grad;
}

namespace {

MicroStepContext context_from_eval(const MarkovGame& game,
                                   const JointPolicy& baseline, int agent,
                                   const ExactEvaluation& eval) {
  MicroStepContext ctx;
  ctx.agent = agent;
  ctx.discount = game.discount;
  ctx.rho_unnormalized = eval.rho / (1.0 - game.discount);
  ctx.advantage = eval.a_agent[agent];
  ctx.epsilon = eval.a_joint.cwiseAbs().maxCoeff();
  ctx.c = penalty_coefficient(game.discount, ctx.epsilon);
  ctx.incumbent_probs = baseline.agents[agent].probs();
  ctx.incumbent_log_probs = baseline.agents[agent].log_probs();
  return ctx;
}

}  // namespace

MicroStepContext make_microstep_context(const MarkovGame& game,
                                        const JointPolicy& baseline,
                                        int agent) {
  if (agent < 0 || agent >= game.n_agents)
    throw std::invalid_argument("agent index out of range");
  return context_from_eval(game, baseline, agent, evaluate(game, baseline));
}

double surrogate_l(const MarkovGame& game, const JointPolicy& baseline,
                   const TabularPolicy& candidate) {
  MicroStepContext ctx = make_microstep_context(game, baseline,
                                                candidate.agent_id);
  if (candidate.n_states() != game.n_states ||
      candidate.n_actions() != game.actions_per_agent[candidate.agent_id])
    throw std::invalid_argument("candidate shape mismatch");
  return ctx.surrogate(candidate);
}

double max_kl(const TabularPolicy& p_old, const TabularPolicy& p_new) {
  if (p_old.logits.rows() != p_new.logits.rows() ||
      p_old.logits.cols() != p_new.logits.cols())
    throw std::invalid_argument("policy shape mismatch in max_kl");
  const Matrix po = p_old.probs();
  const Matrix lo = p_old.log_probs();
  const Matrix ln = p_new.log_probs();
  double sup = 0.0;
  for (Eigen::Index s = 0; s < po.rows(); ++s) {
    const double kl = po.row(s).cwiseProduct(lo.row(s) - ln.row(s)).sum();
    if (kl > sup) sup = kl;
  }
  return sup;
}

double penalty_coefficient(double gamma, double epsilon) {
  const double one_minus = 1.0 - gamma;
  return 4.0 * gamma * epsilon / (one_minus * one_minus);
}

double penalty_c(const MarkovGame& game, const JointPolicy& baseline) {
  const ExactEvaluation eval = evaluate(game, baseline);
  return penalty_coefficient(game.discount,
                             eval.a_joint.cwiseAbs().maxCoeff());
}

double surrogate_f(const MarkovGame& game, const JointPolicy& baseline,
                   const TabularPolicy& candidate) {
  MicroStepContext ctx =
      make_microstep_context(game, baseline, candidate.agent_id);
  return ctx.penalized_objective(candidate);
}

MicroStepReport microstep_bound(const MarkovGame& game,
                                const JointPolicy& old_joint,
                                const JointPolicy& new_joint,
                                int changed_agent) {
  if (changed_agent < 0 || changed_agent >= game.n_agents)
    throw std::invalid_argument("changed_agent out of range");
  if (old_joint.n_agents() != game.n_agents ||
      new_joint.n_agents() != game.n_agents)
    throw std::invalid_argument("joint policies must cover every agent");
  for (int i = 0; i < game.n_agents; ++i) {
    if (i == changed_agent) continue;
    const Matrix& a = old_joint.agents[i].logits;
    const Matrix& b = new_joint.agents[i].logits;
    if (a.rows() != b.rows() || a.cols() != b.cols() || a != b)
      throw std::invalid_argument(
          "joint policies differ outside the changed slot (agent " +
          std::to_string(i) + ")");
  }

  const ExactEvaluation eval_old = evaluate(game, old_joint);
  MicroStepContext ctx =
      context_from_eval(game, old_joint, changed_agent, eval_old);
  MicroStepReport rep;
  rep.agent = changed_agent;
  rep.j_old = eval_old.j;
  rep.j_new = return_j(game, new_joint);
  rep.surrogate = ctx.surrogate(new_joint.agents[changed_agent]);
  rep.max_kl = max_kl(old_joint.agents[changed_agent],
                      new_joint.agents[changed_agent]);
  rep.epsilon = ctx.epsilon;
  rep.c = ctx.c;
  rep.slack = rep.j_new - rep.j_old - rep.surrogate + rep.c * rep.max_kl;
  return rep;
}

}  // namespace marlab
