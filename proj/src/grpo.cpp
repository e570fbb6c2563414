#include "marlab/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace marlab {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::string fmt12(double x) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.12g", x);
  return buf;
}

}  // namespace

void RewardWeights::validate() const {
  require(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0, 1]");
  require(beta >= 0.0 && beta <= 1.0, "beta must lie in [0, 1]");
  require(lambda1 >= 0.0 && lambda1 <= 1.0, "lambda1 must lie in [0, 1]");
  require(lambda2 >= 0.0 && lambda2 <= 1.0, "lambda2 must lie in [0, 1]");
}

double composite_reward(double format_ok, double action_type_score,
                        double param_score, const RewardWeights& weights) {
  weights.validate();
  require(format_ok >= 0.0 && format_ok <= 1.0,
          "format score out of range [0, 1]");
  require(action_type_score >= 0.0 && action_type_score <= 1.0,
          "action-type score out of range [0, 1]");
  require(param_score >= 0.0 && param_score <= 1.0,
          "parameter score out of range [0, 1]");
  return weights.alpha * format_ok +
         weights.beta * (weights.lambda1 * action_type_score +
                         weights.lambda2 * param_score);
}

AdvantageBatch normalized_advantage(std::span<const double> rewards) {
  const int k = static_cast<int>(rewards.size());
  require(k >= 2, "a rollout group needs at least two rewards");

  AdvantageBatch out;
  out.advantages = Vector::Zero(k);

  bool all_equal = true;
  for (int i = 1; i < k; ++i)
    if (rewards[i] != rewards[0]) all_equal = false;
  if (all_equal) {
    out.mean = rewards[0];
    out.stddev = 0.0;
    out.degenerate = true;
    return out;
  }

  double mu = 0.0;
  for (double r : rewards) mu += r;
  mu /= k;
  double var = 0.0;
  for (double r : rewards) var += (r - mu) * (r - mu);
  var /= k;  // population variance, no Bessel correction
  const double sigma = std::sqrt(var);
  out.mean = mu;
  out.stddev = sigma;
  if (sigma <= 1e-12 * (1.0 + std::abs(mu))) {
    out.degenerate = true;
    out.stddev = 0.0;
    return out;
  }
  for (int i = 0; i < k; ++i) out.advantages[i] = (rewards[i] - mu) / sigma;
  return out;
}

void ReweightRule::validate() const {
  require(lower < upper, "reweight rule needs lower < upper");
}

void GrpoHyperparams::validate() const {
  require(clip_eps > 0.0 && clip_eps < 1.0, "clip epsilon must lie in (0, 1)");
  require(kl_coef >= 0.0, "KL coefficient must be nonnegative");
  require(learning_rate > 0.0, "learning rate must be positive");
  require(rollouts_k >= 2, "K must be at least 2");
  require(iterations_m >= 1, "M must be at least 1");
  require(steps_b >= 1, "B must be at least 1");
  require(batch_groups >= 1, "batch size must be at least 1");
}

double RolloutGroup::mean_reward() const {
  double sum = 0.0;
  for (const Rollout& r : rollouts) sum += r.reward;
  return rollouts.empty() ? 0.0 : sum / rollouts.size();
}

void RolloutGroup::validate() const {
  require(rollouts.size() >= 2, "a rollout group needs K >= 2 rollouts");
  for (const Rollout& r : rollouts) {
    require(std::isfinite(r.reward), "rollout reward must be finite");
    for (const DecisionRecord& d : r.decisions)
      require(std::isfinite(d.old_log_prob),
              "decision log-probability must be finite");
  }
}

ReweightOutcome reweight_batch(const std::vector<RolloutGroup>& groups,
                               const ReweightRule& rule, std::uint64_t seed) {
  require(!groups.empty(), "reweight_batch needs a nonempty batch");
  rule.validate();

  ReweightOutcome out;
  for (const RolloutGroup& g : groups)
    if (rule.keeps(g.mean_reward())) out.batch.push_back(g);
  out.n_filtered = static_cast<int>(groups.size() - out.batch.size());
  if (out.batch.empty()) {
    out.skip = true;
    return out;
  }
  const int kept = static_cast<int>(out.batch.size());
  SplitMix64 rng(seed);
  while (out.batch.size() < groups.size()) {
    const int pick = static_cast<int>(rng.uniform() * kept);
    out.batch.push_back(out.batch[pick]);
    ++out.n_refilled;
  }
  return out;
}

double importance_ratio(double new_log_prob, double old_log_prob) {
  if (!std::isfinite(new_log_prob) || !std::isfinite(old_log_prob))
    throw std::runtime_error("non-finite log-probability in importance ratio");
  return std::exp(new_log_prob - old_log_prob);
}

double clipped_term(double v, double advantage, double clip_eps) {
  const double clamped = std::clamp(v, 1.0 - clip_eps, 1.0 + clip_eps);
  return std::min(v * advantage, clamped * advantage);
}

ObjectiveEval grpo_objective(const std::vector<RolloutGroup>& batch,
                             int active_agent, const JointPolicy& policy,
                             const JointPolicy& old_policy,
                             const JointPolicy& ref_policy,
                             const GrpoHyperparams& hyper) {
  hyper.validate();
  const int n_agents = policy.n_agents();
  require(old_policy.n_agents() == n_agents &&
              ref_policy.n_agents() == n_agents,
          "policy snapshots must cover the same agents");
  require(active_agent == kAllAgents ||
              (active_agent >= 0 && active_agent < n_agents),
          "active agent out of range");

  ObjectiveEval out;
  out.gradients.resize(n_agents);
  std::vector<Matrix> probs(n_agents), logp(n_agents), old_logp(n_agents),
      ref_logp(n_agents);
  for (int i = 0; i < n_agents; ++i) {
    out.gradients[i] = Matrix::Zero(policy.agents[i].logits.rows(),
                                    policy.agents[i].logits.cols());
    if (active_agent != kAllAgents && i != active_agent) continue;
    probs[i] = policy.agents[i].probs();
    logp[i] = policy.agents[i].log_probs();
    old_logp[i] = old_policy.agents[i].log_probs();
    ref_logp[i] = ref_policy.agents[i].log_probs();
  }

  if (batch.empty()) return out;

  double kl_sum = 0.0;
  int clip_count = 0;

  const double inv_groups = 1.0 / static_cast<double>(batch.size());
  for (const RolloutGroup& group : batch) {
    group.validate();
    std::vector<double> rewards;
    rewards.reserve(group.rollouts.size());
    for (const Rollout& r : group.rollouts) rewards.push_back(r.reward);
    const AdvantageBatch adv = normalized_advantage(rewards);
    const double inv_k = 1.0 / static_cast<double>(group.rollouts.size());

    for (size_t k = 0; k < group.rollouts.size(); ++k) {
      const Rollout& rollout = group.rollouts[k];
      const double a_k = adv.degenerate ? 0.0 : adv.advantages[k];

      for (int j = 0; j < n_agents; ++j) {
        if (active_agent != kAllAgents && j != active_agent) continue;
        int count = 0;
        for (const DecisionRecord& d : rollout.decisions)
          if (d.agent == j) ++count;
        if (count == 0) continue;  // rollout contributes nothing for agent j
        const double w = inv_groups * inv_k / count;

        for (const DecisionRecord& d : rollout.decisions) {
          if (d.agent != j) continue;
          const int s = d.state;
          require(s >= 0 && s < logp[j].rows() && d.action >= 0 &&
                      d.action < logp[j].cols(),
                  "decision indices out of range for agent " +
                      std::to_string(j));
          const double lp_new = logp[j](s, d.action);
          const double lp_old = old_logp[j](s, d.action);
          const double v = std::exp(lp_new - lp_old);
          const double u1 = v * a_k;
          const double clamped =
              std::clamp(v, 1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps);
          const double u2 = clamped * a_k;
          out.objective += w * std::min(u1, u2);
          if (u2 < u1) ++clip_count;

          const double dterm_dv = (u1 <= u2) ? a_k : 0.0;
          if (dterm_dv != 0.0) {
            const double scale = w * dterm_dv * v;
            out.gradients[j].row(s) -= scale * probs[j].row(s);
            out.gradients[j](s, d.action) += scale;
          }

          const Eigen::RowVectorXd diff = logp[j].row(s) - ref_logp[j].row(s);
          const double kl = probs[j].row(s).dot(diff);
          out.objective -= w * hyper.kl_coef * kl;
          kl_sum += kl;
          if (hyper.kl_coef != 0.0) {
            out.gradients[j].row(s) -=
                w * hyper.kl_coef *
                (probs[j].row(s).array() * (diff.array() - kl)).matrix();
          }
          ++out.n_scored_decisions;
        }
      }
    }
  }

  if (out.n_scored_decisions > 0) {
    out.mean_kl_ref = kl_sum / out.n_scored_decisions;
    out.clip_fraction =
        static_cast<double>(clip_count) / out.n_scored_decisions;
  }
  return out;
}

std::string StepMetrics::csv_header() {
  return "iteration,step,agent,objective,mean_kl_ref,clip_fraction,"
         "n_filtered,n_refilled,skipped";
}

std::string StepMetrics::csv_row() const {
  return std::to_string(iteration) + "," + std::to_string(step) + "," +
         std::to_string(agent) + "," + fmt12(objective) + "," +
         fmt12(mean_kl_ref) + "," + fmt12(clip_fraction) + "," +
         std::to_string(n_filtered) + "," + std::to_string(n_refilled) + "," +
         (skipped ? "1" : "0");
}

GrpoStepResult grpo_step(const JointPolicy& policy,
                         const std::vector<RolloutGroup>& batch,
                         int active_agent, const JointPolicy& ref_policy,
                         const GrpoHyperparams& hyper) {
  GrpoStepResult out;
  out.policy = policy;
  out.metrics.agent = active_agent;
  if (batch.empty()) {
    out.metrics.skipped = true;
    return out;
  }

  // At step time the policy equals the sampling snapshot (theta_old was
  // refreshed just before the rollouts were drawn).
  const ObjectiveEval base =
      grpo_objective(batch, active_agent, policy, policy, ref_policy, hyper);
  out.metrics.objective = base.objective;
  out.metrics.mean_kl_ref = base.mean_kl_ref;
  out.metrics.clip_fraction = base.clip_fraction;

  double lr = hyper.learning_rate;
  for (int attempt = 0; attempt < 6; ++attempt, lr *= 0.5) {
    JointPolicy candidate = policy;
    for (int j = 0; j < policy.n_agents(); ++j) {
      if (active_agent != kAllAgents && j != active_agent) continue;
      candidate.agents[j].logits += lr * base.gradients[j];
    }
    const ObjectiveEval stepped = grpo_objective(batch, active_agent, candidate,
                                                 policy, ref_policy, hyper);
    if (stepped.objective >= base.objective) {
      out.policy = std::move(candidate);
      out.metrics.objective = stepped.objective;
      out.metrics.mean_kl_ref = stepped.mean_kl_ref;
      out.metrics.clip_fraction = stepped.clip_fraction;
      return out;
    }
  }
  out.metrics.skipped = true;  // no step improved the batch objective
  return out;
}

}  // namespace marlab
