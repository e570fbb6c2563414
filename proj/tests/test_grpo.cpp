#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "marlab/game.hpp"
#include "marlab/grpo.hpp"

using namespace marlab;

namespace {

JointPolicy chain2_joint(double sigma, std::uint64_t seed) {
  MarkovGame g = make_chain2();
  JointPolicy pi;
  for (int i = 0; i < 2; ++i)
    pi.agents.push_back(make_random_policy(g, i, sigma, seed + 17 * i));
  return pi;
}

// Samples rollout groups on chain2 under `sampler`, recording decisions for
// both agents with their sampling log-probabilities.
std::vector<RolloutGroup> chain2_batch(const JointPolicy& sampler,
                                       int n_groups, int k, int horizon,
                                       std::uint64_t seed) {
  MarkovGame g = make_chain2();
  std::vector<RolloutGroup> batch;
  for (int gi = 0; gi < n_groups; ++gi) {
    RolloutGroup group;
    group.input_id = gi;
    for (int r = 0; r < k; ++r) {
      Trajectory t = sample_episode(g, sampler,
                                    seed_combine(seed, gi * 1000 + r), horizon);
      Rollout rollout;
      for (const TrajectoryStep& step : t.steps)
        for (int agent = 0; agent < 2; ++agent)
          rollout.decisions.push_back({agent, step.state, step.actions[agent],
                                       step.log_probs[agent]});
      rollout.reward = t.discounted_return(g.discount);
      group.rollouts.push_back(std::move(rollout));
    }
    batch.push_back(std::move(group));
  }
  return batch;
}

// Central finite differences of the objective w.r.t. every logit of every
// scored agent; returns the worst per-coordinate relative error.
double fd_worst_error(const std::vector<RolloutGroup>& batch, int active,
                      const JointPolicy& policy, const JointPolicy& old_policy,
                      const JointPolicy& ref_policy,
                      const GrpoHyperparams& hyper, double h) {
  const ObjectiveEval eval =
      grpo_objective(batch, active, policy, old_policy, ref_policy, hyper);
  double worst = 0.0;
  for (int j = 0; j < policy.n_agents(); ++j) {
    if (active != kAllAgents && j != active) continue;
    for (Eigen::Index s = 0; s < policy.agents[j].logits.rows(); ++s) {
      for (Eigen::Index a = 0; a < policy.agents[j].logits.cols(); ++a) {
        JointPolicy plus = policy, minus = policy;
        plus.agents[j].logits(s, a) += h;
        minus.agents[j].logits(s, a) -= h;
        const double op = grpo_objective(batch, active, plus, old_policy,
                                         ref_policy, hyper)
                              .objective;
        const double om = grpo_objective(batch, active, minus, old_policy,
                                         ref_policy, hyper)
                              .objective;
        const double fd = (op - om) / (2.0 * h);
        const double an = eval.gradients[j](s, a);
        const double rel =
            std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
        worst = std::max(worst, rel);
      }
    }
  }
  return worst;
}

}  // namespace

TEST_SUITE("composite_reward") {
  TEST_CASE("all-correct and all-wrong endpoints") {
    RewardWeights w;
    CHECK(composite_reward(1, 1, 1, w) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(composite_reward(0, 0, 0, w) == doctest::Approx(0.0).epsilon(1e-15));
  }

  TEST_CASE("kind right but parameters wrong scores 0.28") {
    RewardWeights w;
    CHECK(composite_reward(1, 1, 0, w) ==
          doctest::Approx(0.28).epsilon(1e-12));
  }

  TEST_CASE("out-of-range scores throw") {
    RewardWeights w;
    CHECK_THROWS_AS((void)composite_reward(1.2, 0, 0, w),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)composite_reward(0, -0.1, 0, w),
                    std::invalid_argument);
  }
}

TEST_SUITE("normalized_advantage") {
  TEST_CASE("binary rewards standardize to plus-minus one") {
    std::vector<double> rewards{1, 0, 0, 1};
    AdvantageBatch b = normalized_advantage(rewards);
    CHECK_FALSE(b.degenerate);
    CHECK(b.advantages[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(b.advantages[1] == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(b.advantages[2] == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(b.advantages[3] == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("uniform group is degenerate with zero advantages") {
    std::vector<double> rewards{0.7, 0.7, 0.7};
    AdvantageBatch b = normalized_advantage(rewards);
    CHECK(b.degenerate);
    CHECK(b.advantages.cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("pair standardizes to plus-minus one") {
    std::vector<double> rewards{1, 0};
    AdvantageBatch b = normalized_advantage(rewards);
    CHECK(b.advantages[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(b.advantages[1] == doctest::Approx(-1.0).epsilon(1e-12));
  }

  TEST_CASE("fewer than two rewards throw") {
    std::vector<double> one{0.5};
    CHECK_THROWS_AS((void)normalized_advantage(one), std::invalid_argument);
  }

  TEST_CASE("zero mean and unit population std on random groups") {
    SplitMix64 rng(606);
    for (int trial = 0; trial < 1000; ++trial) {
      const int k = 2 + static_cast<int>(rng.uniform() * 7);
      std::vector<double> rewards(k);
      for (double& r : rewards) r = rng.uniform();
      AdvantageBatch b = normalized_advantage(rewards);
      if (b.degenerate) continue;
      CHECK(std::abs(b.advantages.mean()) <= 1e-10);
      const double var = b.advantages.squaredNorm() / k;
      CHECK(std::abs(std::sqrt(var) - 1.0) <= 1e-10);
    }
  }
}

TEST_SUITE("reweighting") {
  static RolloutGroup group_with_mean(double mean, std::uint64_t id) {
    RolloutGroup g;
    g.input_id = id;
    g.rollouts.resize(2);
    g.rollouts[0].reward = mean;
    g.rollouts[1].reward = mean;
    return g;
  }

  TEST_CASE("saturated group is discarded by the default band") {
    ReweightRule rule{0.1, 1.0};
    std::vector<RolloutGroup> batch{group_with_mean(1.0, 0),
                                    group_with_mean(0.5, 1)};
    ReweightOutcome out = reweight_batch(batch, rule, 3);
    CHECK(out.n_filtered == 1);
    REQUIRE(out.batch.size() == 2);
    for (const RolloutGroup& g : out.batch) CHECK(g.input_id == 1);
  }

  TEST_CASE("mid-band group is kept") {
    ReweightRule rule{0.1, 1.0};
    std::vector<RolloutGroup> batch{group_with_mean(0.5, 7)};
    ReweightOutcome out = reweight_batch(batch, rule, 3);
    CHECK(out.n_filtered == 0);
    CHECK(out.n_refilled == 0);
    CHECK_FALSE(out.skip);
  }

  TEST_CASE("refills restore the batch size from kept groups") {
    ReweightRule rule{0.1, 1.0};
    std::vector<RolloutGroup> batch{
        group_with_mean(1.0, 0), group_with_mean(0.5, 1),
        group_with_mean(0.05, 2), group_with_mean(0.6, 3)};
    ReweightOutcome out = reweight_batch(batch, rule, 99);
    CHECK(out.n_filtered == 2);
    CHECK(out.n_refilled == 2);
    REQUIRE(out.batch.size() == 4);
    for (const RolloutGroup& g : out.batch)
      CHECK((g.input_id == 1 || g.input_id == 3));

    ReweightOutcome again = reweight_batch(batch, rule, 99);
    for (size_t i = 0; i < out.batch.size(); ++i)
      CHECK(out.batch[i].input_id == again.batch[i].input_id);
  }

  TEST_CASE("empty survivor set raises the skip signal") {
    ReweightRule rule{0.1, 1.0};
    std::vector<RolloutGroup> batch{group_with_mean(0.0, 0),
                                    group_with_mean(1.0, 1)};
    ReweightOutcome out = reweight_batch(batch, rule, 5);
    CHECK(out.skip);
    CHECK(out.batch.empty());
    CHECK(out.n_filtered == 2);
  }

  TEST_CASE("bad rule or empty batch throws") {
    std::vector<RolloutGroup> batch{group_with_mean(0.5, 0)};
    CHECK_THROWS_AS((void)reweight_batch(batch, ReweightRule{0.8, 0.2}, 1),
                    std::invalid_argument);
    std::vector<RolloutGroup> empty;
    CHECK_THROWS_AS((void)reweight_batch(empty, ReweightRule{0.1, 1.0}, 1),
                    std::invalid_argument);
  }
}

TEST_SUITE("ratio_and_clip") {
  TEST_CASE("importance ratio identities") {
    CHECK(importance_ratio(-1.3, -1.3) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(importance_ratio(-1.0 + std::log(2.0), -1.0) ==
          doctest::Approx(2.0).epsilon(1e-12));
    CHECK(importance_ratio(-1.0 - std::log(4.0), -1.0) ==
          doctest::Approx(0.25).epsilon(1e-12));
    CHECK_THROWS_AS(
        (void)importance_ratio(std::numeric_limits<double>::infinity(), 0.0),
        std::runtime_error);
  }

  TEST_CASE("clipped term examples") {
    CHECK(clipped_term(1.0, 1.0, 0.2) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(clipped_term(1.5, 1.0, 0.2) == doctest::Approx(1.2).epsilon(1e-15));
    CHECK(clipped_term(0.5, -1.0, 0.2) ==
          doctest::Approx(-0.8).epsilon(1e-15));
  }

  TEST_CASE("clipped term never exceeds the unclipped term") {
    SplitMix64 rng(414);
    for (int trial = 0; trial < 10000; ++trial) {
      const double v = 0.01 + 3.0 * rng.uniform();
      const double a = 4.0 * (2.0 * rng.uniform() - 1.0);
      const double eps = 0.01 + 0.9 * rng.uniform();
      CHECK(clipped_term(v, a, eps) <= v * a + 1e-12);
    }
  }
}

TEST_SUITE("grpo_objective") {
  TEST_CASE("fixed point: identical snapshots and degenerate advantages") {
    JointPolicy pi = chain2_joint(1.0, 4);
    RolloutGroup group;
    group.input_id = 0;
    for (int r = 0; r < 2; ++r) {
      Rollout rollout;
      rollout.reward = 0.5;  // identical rewards -> degenerate
      rollout.decisions.push_back({0, 0, 0, std::log(0.5)});
      group.rollouts.push_back(rollout);
    }
    GrpoHyperparams hyper;
    ObjectiveEval eval =
        grpo_objective({group}, 0, pi, pi, pi, hyper);
    CHECK(eval.objective == doctest::Approx(0.0).epsilon(1e-14));
    for (const Matrix& grad : eval.gradients)
      CHECK(grad.cwiseAbs().maxCoeff() <= 1e-14);
  }

  TEST_CASE("single scored decision reduces to the clipped term") {
    JointPolicy pi = chain2_joint(0.8, 9);
    RolloutGroup group;
    group.input_id = 0;
    Rollout best;
    best.reward = 1.0;
    best.decisions.push_back({0, 0, 1, pi.agents[0].log_probs()(0, 1)});
    Rollout rest;  // no active decisions: contributes exactly zero
    rest.reward = 0.0;
    rest.decisions.push_back({1, 0, 0, pi.agents[1].log_probs()(0, 0)});
    group.rollouts = {best, rest};

    GrpoHyperparams hyper;
    hyper.kl_coef = 0.0;
    ObjectiveEval eval = grpo_objective({group}, 0, pi, pi, pi, hyper);
    // v = 1 and A = +1 for the only scored decision, so the per-rollout mean
    // is clipped_term(1, 1, eps) = 1 and the group average is 1/K.
    CHECK(eval.n_scored_decisions == 1);
    CHECK(eval.objective * group.rollouts.size() ==
          doctest::Approx(clipped_term(1.0, 1.0, hyper.clip_eps))
              .epsilon(1e-12));
  }

  TEST_CASE("frozen agents receive exactly zero gradient") {
    JointPolicy sampler = chain2_joint(0.7, 21);
    std::vector<RolloutGroup> batch = chain2_batch(sampler, 3, 4, 6, 77);
    JointPolicy policy = sampler;
    policy.agents[0].logits.array() += 0.13;
    policy.agents[1].logits.array() -= 0.21;
    GrpoHyperparams hyper;
    ObjectiveEval eval =
        grpo_objective(batch, 0, policy, sampler, sampler, hyper);
    CHECK(eval.gradients[1].cwiseAbs().maxCoeff() < 1e-12);
    CHECK(eval.gradients[0].cwiseAbs().maxCoeff() > 0.0);
  }

  TEST_CASE("chain2 batch of 8 matches finite differences tightly") {
    JointPolicy sampler = chain2_joint(0.6, 33);
    std::vector<RolloutGroup> batch = chain2_batch(sampler, 1, 8, 8, 101);
    JointPolicy policy = sampler;
    // Move away from the sampling snapshot so ratios differ from 1.
    SplitMix64 rng(55);
    for (TabularPolicy& p : policy.agents)
      for (Eigen::Index s = 0; s < p.logits.rows(); ++s)
        for (Eigen::Index a = 0; a < p.logits.cols(); ++a)
          p.logits(s, a) += 0.12 * (2.0 * rng.uniform() - 1.0);
    JointPolicy ref = chain2_joint(0.5, 71);

    GrpoHyperparams hyper;
    for (int active = 0; active < 2; ++active) {
      const double worst =
          fd_worst_error(batch, active, policy, sampler, ref, hyper, 1e-5);
      CHECK(worst < 1e-5);
    }
  }

  TEST_CASE("randomized batches match finite differences") {
    SplitMix64 rng(2024);
    double worst_all = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      JointPolicy sampler = chain2_joint(0.9, 300 + trial);
      std::vector<RolloutGroup> batch =
          chain2_batch(sampler, 2, 4, 5, 9000 + trial);
      JointPolicy policy = sampler;
      for (TabularPolicy& p : policy.agents)
        for (Eigen::Index s = 0; s < p.logits.rows(); ++s)
          for (Eigen::Index a = 0; a < p.logits.cols(); ++a)
            p.logits(s, a) += 0.2 * (2.0 * rng.uniform() - 1.0);
      JointPolicy ref = chain2_joint(0.4, 600 + trial);
      GrpoHyperparams hyper;
      const int active = trial % 3 == 2 ? kAllAgents : trial % 2;
      const double worst =
          fd_worst_error(batch, active, policy, sampler, ref, hyper, 1e-5);
      worst_all = std::max(worst_all, worst);
    }
    CHECK(worst_all < 1e-4);
  }
}

TEST_SUITE("grpo_step") {
  TEST_CASE("zero-gradient batch leaves parameters unchanged") {
    JointPolicy pi = chain2_joint(1.1, 40);
    RolloutGroup group;
    group.input_id = 0;
    for (int r = 0; r < 3; ++r) {
      Rollout rollout;
      rollout.reward = 0.25;  // degenerate group
      rollout.decisions.push_back({0, 1, 0, pi.agents[0].log_probs()(1, 0)});
      group.rollouts.push_back(rollout);
    }
    GrpoHyperparams hyper;
    hyper.kl_coef = 0.0;
    GrpoStepResult out = grpo_step(pi, {group}, 0, pi, hyper);
    CHECK_FALSE(out.metrics.skipped);
    CHECK(out.policy.agents[0].logits == pi.agents[0].logits);
    CHECK(out.policy.agents[1].logits == pi.agents[1].logits);
  }

  TEST_CASE("empty batch records a skipped step") {
    JointPolicy pi = chain2_joint(1.0, 41);
    GrpoStepResult out = grpo_step(pi, {}, 0, pi, GrpoHyperparams{});
    CHECK(out.metrics.skipped);
    CHECK(out.policy.agents[0].logits == pi.agents[0].logits);
  }

  TEST_CASE("positive-advantage action strictly gains probability") {
    JointPolicy pi = chain2_joint(0.5, 42);
    RolloutGroup group;
    group.input_id = 0;
    Rollout good, bad;
    good.reward = 1.0;
    good.decisions.push_back({0, 0, 1, pi.agents[0].log_probs()(0, 1)});
    bad.reward = 0.0;
    bad.decisions.push_back({0, 0, 0, pi.agents[0].log_probs()(0, 0)});
    group.rollouts = {good, bad};

    GrpoHyperparams hyper;
    hyper.kl_coef = 0.0;
    const double before = pi.agents[0].probs()(0, 1);
    GrpoStepResult out = grpo_step(pi, {group}, 0, pi, hyper);
    REQUIRE_FALSE(out.metrics.skipped);
    CHECK(out.policy.agents[0].probs()(0, 1) > before);
    // The frozen agent is untouched.
    CHECK(out.policy.agents[1].logits == pi.agents[1].logits);
  }

  TEST_CASE("huge KL coefficient pins the policy to the reference") {
    JointPolicy pi = chain2_joint(0.8, 43);
    std::vector<RolloutGroup> batch = chain2_batch(pi, 2, 4, 6, 505);
    GrpoHyperparams hyper;
    hyper.kl_coef = 1e3;
    hyper.learning_rate = 1.0;
    GrpoStepResult out = grpo_step(pi, batch, 1, pi, hyper);
    const double moved =
        (out.policy.agents[1].logits - pi.agents[1].logits).cwiseAbs().maxCoeff();
    CHECK(moved < 1e-8);
  }

  TEST_CASE("batch objective never decreases across the accepted step") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      JointPolicy pi = chain2_joint(0.7, 80 + seed);
      std::vector<RolloutGroup> batch = chain2_batch(pi, 3, 4, 6, 700 + seed);
      GrpoHyperparams hyper;
      const ObjectiveEval before =
          grpo_objective(batch, 0, pi, pi, pi, hyper);
      GrpoStepResult out = grpo_step(pi, batch, 0, pi, hyper);
      if (out.metrics.skipped) continue;
      const ObjectiveEval after =
          grpo_objective(batch, 0, out.policy, pi, pi, hyper);
      CHECK(after.objective >= before.objective - 1e-12);
    }
  }
}

TEST_SUITE("step_metrics") {
  TEST_CASE("csv row matches the documented schema") {
    StepMetrics m;
    m.iteration = 2;
    m.step = 5;
    m.agent = 1;
    m.objective = 0.5;
    m.n_filtered = 3;
    m.skipped = false;
    CHECK(StepMetrics::csv_header() ==
          "iteration,step,agent,objective,mean_kl_ref,clip_fraction,"
          "n_filtered,n_refilled,skipped");
    CHECK(m.csv_row() == "2,5,1,0.5,0,0,3,0,0");
  }
}
