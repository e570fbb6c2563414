#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "marlab/game.hpp"
#include "marlab/gridgui.hpp"
#include "marlab/oracle.hpp"
#include "marlab/rollout.hpp"
#include "marlab/scheduler.hpp"

using namespace marlab;

namespace {

ScheduleConfig chain2_grpo_config(int rounds, std::uint64_t seed) {
  ScheduleConfig cfg;
  cfg.rounds = rounds;
  cfg.solver = SolverKind::Grpo;
  cfg.agent_order = {0, 1};
  cfg.agents.resize(2);
  for (AgentSchedule& a : cfg.agents) {
    a.grpo.iterations_m = 1;
    a.grpo.steps_b = 2;
    a.grpo.batch_groups = 3;
    a.grpo.rollouts_k = 4;
    a.reweight_enabled = false;
  }
  cfg.warmup.kind = WarmupSpec::Kind::Random;
  cfg.warmup.sigma = 0.3;
  cfg.seed = seed;
  cfg.game_horizon = 8;
  cfg.eval_episodes = 2;
  return cfg;
}

ScheduleConfig chain2_exact_config(int rounds, std::uint64_t seed) {
  ScheduleConfig cfg = chain2_grpo_config(rounds, seed);
  cfg.solver = SolverKind::Exact;
  for (AgentSchedule& a : cfg.agents) a.exact_microsteps = 6;
  return cfg;
}

std::vector<gridgui::GridGuiTask> train_suite() {
  return gridgui::make_fixture_suite(6, 4, 4, 12, 100);
}
std::vector<gridgui::GridGuiTask> warm_suite() {
  return gridgui::make_fixture_suite(10, 4, 4, 12, 200);
}

ScheduleConfig gridgui_config(int rounds, std::uint64_t seed) {
  ScheduleConfig cfg;
  cfg.rounds = rounds;
  cfg.solver = SolverKind::Grpo;
  cfg.agent_order = {0, 1};
  cfg.agents.resize(2);
  for (AgentSchedule& a : cfg.agents) {
    a.grpo.iterations_m = 1;
    a.grpo.steps_b = 2;
    a.grpo.batch_groups = 3;
    a.grpo.rollouts_k = 4;
    a.grpo.learning_rate = 2.0;
    a.reweight = ReweightRule{0.1, 1.0};
    a.reweight_enabled = true;
  }
  cfg.warmup.kind = WarmupSpec::Kind::Staged;
  cfg.seed = seed;
  cfg.eval_episodes = 2;
  return cfg;
}

}  // namespace

TEST_SUITE("warm_up") {
  TEST_CASE("skip mode leaves uniform zero logits") {
    InterleavedTrainer trainer(make_chain2(), chain2_grpo_config(1, 1));
    // Construction initializes to zeros; force warm-up and re-check.
    ScheduleConfig cfg = chain2_grpo_config(1, 1);
    cfg.warmup.kind = WarmupSpec::Kind::Skip;
    InterleavedTrainer skip_trainer(make_chain2(), cfg);
    skip_trainer.warm_up();
    for (const TabularPolicy& p : skip_trainer.policies().agents)
      CHECK(p.logits.cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("random mode is seeded and nontrivial") {
    ScheduleConfig cfg = chain2_grpo_config(1, 7);
    cfg.warmup.kind = WarmupSpec::Kind::Random;
    InterleavedTrainer a(make_chain2(), cfg);
    InterleavedTrainer b(make_chain2(), cfg);
    a.warm_up();
    b.warm_up();
    CHECK(a.policies().agents[0].logits == b.policies().agents[0].logits);
    CHECK(a.policies().agents[0].logits.cwiseAbs().maxCoeff() > 0.0);
  }

  TEST_CASE("imitation matches the scripted planner on 90% of labels") {
    InterleavedTrainer trainer(train_suite(), warm_suite(), RewardWeights{},
                               gridgui_config(1, 3));
    trainer.warm_up();
    const TabularPolicy nav = trainer.policies().agents[0];
    const TabularPolicy scripted = gridgui::scripted_navigator_policy(2);

    int total = 0, match = 0;
    for (const gridgui::GridGuiTask& task : warm_suite()) {
      gridgui::GridGuiEnv env(task);
      env.reset(0);
      for (const gridgui::GoldStep& step : task.gold_trace) {
        const int state = env.navigator_state();
        int got, want;
        nav.logits.row(state).maxCoeff(&got);
        scripted.logits.row(state).maxCoeff(&want);
        ++total;
        if (got == want) ++match;
        env.step(step.instruction, step.action);
      }
    }
    CHECK(match >= (9 * total) / 10);
  }

  TEST_CASE("interactor warm-up beats the uniform baseline") {
    RewardWeights weights;
    auto tasks = warm_suite();
    GridGuiDomain domain(tasks, weights);
    auto scripted_nav = PolicySnapshot::make(
        gridgui::scripted_navigator_policy(2), 0);

    auto mean_reward = [&](const TabularPolicy& interactor) {
      LocalAgentHandle nav(scripted_nav);
      LocalAgentHandle inter(PolicySnapshot::make(interactor, 0));
      std::vector<AgentHandle*> handles{&nav, &inter};
      double total = 0.0;
      int count = 0;
      for (long input = 0; input < domain.input_pool_size(); ++input)
        for (int e = 0; e < 6; ++e) {
          total += domain.run_rollout(handles, input, eval_seed(9, 0, input, e))
                       .reward;
          ++count;
        }
      return total / count;
    };

    TabularPolicy uniform;
    uniform.agent_id = 1;
    uniform.logits = Matrix::Zero(gridgui::interactor_state_count(2),
                                  gridgui::kNumActions);
    const double baseline = mean_reward(uniform);

    InterleavedTrainer trainer(train_suite(), warm_suite(), weights,
                               gridgui_config(1, 3));
    trainer.warm_up();
    const double warmed = mean_reward(trainer.policies().agents[1]);
    CHECK(warmed > baseline);
  }
}

TEST_SUITE("exact_mode") {
  TEST_CASE("every committed micro-step certifies the bound") {
    InterleavedTrainer trainer(make_chain2(), chain2_exact_config(4, 5));
    TrainingLog log = trainer.run_training();
    REQUIRE(!log.microsteps.empty());
    for (const MicroStepReport& rep : log.microsteps)
      CHECK(rep.slack >= -1e-8);
  }

  TEST_CASE("rounds never decrease the exact return") {
    InterleavedTrainer trainer(make_chain2(), chain2_exact_config(6, 9));
    TrainingLog log = trainer.run_training();
    REQUIRE(log.rounds.size() == 7);
    for (size_t i = 1; i < log.rounds.size(); ++i)
      CHECK(log.rounds[i].delta >= -1e-9);
  }

  TEST_CASE("micro-step gains telescope to the round gain") {
    InterleavedTrainer trainer(make_chain2(), chain2_exact_config(3, 11));
    TrainingLog log = trainer.run_training();
    for (size_t r = 1; r < log.rounds.size(); ++r) {
      double gain = 0.0;
      for (const MicroStepReport& rep : log.microsteps)
        if (rep.round == static_cast<int>(r)) gain += rep.j_new - rep.j_old;
      CHECK(std::abs(gain - log.rounds[r].delta) <= 1e-9);
    }
  }

  TEST_CASE("zero micro-step budget leaves the state unchanged") {
    ScheduleConfig cfg = chain2_exact_config(1, 13);
    for (AgentSchedule& a : cfg.agents) a.exact_microsteps = 0;
    InterleavedTrainer trainer(make_chain2(), cfg);
    trainer.warm_up();
    const JointPolicy before = trainer.policies();
    trainer.run_round(1);
    const JointPolicy after = trainer.policies();
    for (int i = 0; i < 2; ++i)
      CHECK(before.agents[i].logits == after.agents[i].logits);
  }
}

TEST_SUITE("round_structure") {
  TEST_CASE("single agent reduces to the plain GRPO loop") {
    // One-agent game: interleaving degenerates to Alg-3-style updates.
    MarkovGame g;
    g.n_agents = 1;
    g.n_states = 2;
    g.actions_per_agent = {3};
    g.discount = 0.8;
    g.transition.assign(2, std::vector<std::vector<Transition>>(3));
    for (int s = 0; s < 2; ++s)
      for (int a = 0; a < 3; ++a)
        g.transition[s][a] = {{(s + a) % 2, 1.0}};
    g.reward = Matrix::Zero(2, 3);
    g.reward(1, 1) = 1.0;
    g.initial_dist = Vector::Zero(2);
    g.initial_dist[0] = 1.0;
    g.validate();

    ScheduleConfig cfg;
    cfg.rounds = 1;
    cfg.agent_order = {0};
    cfg.agents.resize(1);
    cfg.agents[0].grpo.iterations_m = 2;
    cfg.agents[0].grpo.steps_b = 2;
    cfg.agents[0].grpo.batch_groups = 2;
    cfg.agents[0].grpo.rollouts_k = 4;
    cfg.agents[0].reweight_enabled = false;
    cfg.warmup.kind = WarmupSpec::Kind::Random;
    cfg.warmup.sigma = 0.4;
    cfg.seed = 21;
    cfg.game_horizon = 6;

    InterleavedTrainer trainer(g, cfg);
    trainer.warm_up();
    trainer.run_round(1);
    const TabularPolicy via_trainer = trainer.policies().agents[0];

    // Reference: hand-rolled single-agent GRPO with the same seeds.
    TabularGameDomain domain(g, cfg.game_horizon);
    TabularPolicy theta;
    theta.agent_id = 0;
    theta.logits = Matrix::Zero(2, 3);
    SplitMix64 rng(warmup_seed(cfg.seed, 0));
    for (Eigen::Index s = 0; s < 2; ++s)
      for (Eigen::Index a = 0; a < 3; ++a)
        theta.logits(s, a) = cfg.warmup.sigma * (2.0 * rng.uniform() - 1.0);

    const GrpoHyperparams& hyper = cfg.agents[0].grpo;
    for (int m = 0; m < hyper.iterations_m; ++m) {
      const JointPolicy ref{{theta}};
      for (int b = 0; b < hyper.steps_b; ++b) {
        auto old_snap = PolicySnapshot::make(theta, 0);
        LocalAgentHandle handle(old_snap);
        std::vector<AgentHandle*> handles{&handle};
        std::vector<RolloutGroup> batch;
        const long ordinal = static_cast<long>(m) * hyper.steps_b + b;
        for (int gi = 0; gi < hyper.batch_groups; ++gi)
          batch.push_back(collect_group(
              domain, handles,
              static_cast<std::uint64_t>(ordinal) * hyper.batch_groups + gi,
              hyper.rollouts_k, rollout_seed(cfg.seed, 1, 0, m, b, gi)));
        GrpoStepResult step = grpo_step(JointPolicy{{theta}}, batch, 0,
                                        ref, hyper);
        if (!step.metrics.skipped) theta = step.policy.agents[0];
      }
    }
    CHECK(via_trainer.logits == theta.logits);
  }

  TEST_CASE("single agent makes all three modes coincide") {
    MarkovGame g;
    g.n_agents = 1;
    g.n_states = 2;
    g.actions_per_agent = {2};
    g.discount = 0.85;
    g.transition.assign(2, std::vector<std::vector<Transition>>(2));
    for (int s = 0; s < 2; ++s)
      for (int a = 0; a < 2; ++a) g.transition[s][a] = {{(s + a) % 2, 1.0}};
    g.reward = Matrix::Zero(2, 2);
    g.reward(1, 1) = 1.0;
    g.initial_dist = Vector::Zero(2);
    g.initial_dist[0] = 1.0;
    g.validate();

    ScheduleConfig cfg;
    cfg.rounds = 1;
    cfg.agent_order = {0};
    cfg.agents.resize(1);
    cfg.agents[0].grpo.steps_b = 2;
    cfg.agents[0].grpo.batch_groups = 2;
    cfg.agents[0].grpo.rollouts_k = 4;
    cfg.agents[0].reweight_enabled = false;
    cfg.warmup.kind = WarmupSpec::Kind::Random;
    cfg.seed = 77;
    cfg.game_horizon = 6;

    Matrix sequential, parallel, joint;
    {
      InterleavedTrainer trainer(g, cfg);
      trainer.warm_up();
      trainer.run_round(1);
      sequential = trainer.policies().agents[0].logits;
    }
    {
      ScheduleConfig par = cfg;
      par.mode = UpdateMode::Parallel;
      InterleavedTrainer trainer(g, par);
      trainer.warm_up();
      trainer.run_parallel_round(1);
      parallel = trainer.policies().agents[0].logits;
    }
    {
      ScheduleConfig jnt = cfg;
      jnt.mode = UpdateMode::Joint;
      InterleavedTrainer trainer(g, jnt);
      trainer.warm_up();
      trainer.run_joint_round(1);
      joint = trainer.policies().agents[0].logits;
    }
    CHECK(sequential == parallel);
    CHECK(sequential == joint);
    CHECK(sequential.cwiseAbs().maxCoeff() > 0.0);
  }

  TEST_CASE("parallel blocks equal sequential blocks against the snapshot") {
    MarkovGame g = make_chain2();
    ScheduleConfig cfg = chain2_grpo_config(1, 31);

    ScheduleConfig par = cfg;
    par.mode = UpdateMode::Parallel;
    InterleavedTrainer parallel(g, par);
    parallel.warm_up();
    parallel.run_parallel_round(1);

    // Agent 0 first in a sequential round sees the round-start complement.
    InterleavedTrainer seq01(g, cfg);
    seq01.warm_up();
    seq01.run_round(1);
    CHECK(parallel.policies().agents[0].logits ==
          seq01.policies().agents[0].logits);

    // Agent 1 first (order reversed) also sees the round-start complement.
    ScheduleConfig rev = cfg;
    rev.agent_order = {1, 0};
    InterleavedTrainer seq10(g, rev);
    seq10.warm_up();
    seq10.run_round(1);
    CHECK(parallel.policies().agents[1].logits ==
          seq10.policies().agents[1].logits);

    // And the sequential agent-1 block (which saw the committed agent 0)
    // generally differs from the parallel one.
    CHECK(parallel.policies().agents[1].logits !=
          seq01.policies().agents[1].logits);
  }

  TEST_CASE("joint mode updates every agent in one step") {
    ScheduleConfig cfg = chain2_grpo_config(1, 41);
    cfg.mode = UpdateMode::Joint;
    InterleavedTrainer trainer(make_chain2(), cfg);
    trainer.warm_up();
    const JointPolicy before = trainer.policies();
    trainer.run_joint_round(1);
    const JointPolicy after = trainer.policies();
    CHECK((after.agents[0].logits - before.agents[0].logits)
              .cwiseAbs()
              .maxCoeff() > 0.0);
    CHECK((after.agents[1].logits - before.agents[1].logits)
              .cwiseAbs()
              .maxCoeff() > 0.0);
    for (const auto& [round, metrics] : trainer.log().steps)
      CHECK(metrics.agent == -1);
  }

  TEST_CASE("zero rounds logs only the warm-up baseline") {
    InterleavedTrainer trainer(make_chain2(), chain2_grpo_config(0, 51));
    TrainingLog log = trainer.run_training();
    CHECK(log.rounds.size() == 1);
    CHECK(log.rounds[0].round == 0);
    CHECK(log.steps.empty());
  }

  TEST_CASE("identical configs reproduce identical logs") {
    auto run = [&] {
      InterleavedTrainer trainer(make_chain2(), chain2_grpo_config(2, 61));
      return trainer.run_training();
    };
    TrainingLog a = run();
    TrainingLog b = run();
    REQUIRE(a.rounds.size() == b.rounds.size());
    for (size_t i = 0; i < a.rounds.size(); ++i) {
      CHECK(a.rounds[i].j_exact == b.rounds[i].j_exact);
      CHECK(a.rounds[i].j_mc == b.rounds[i].j_mc);
    }
    REQUIRE(a.steps.size() == b.steps.size());
    for (size_t i = 0; i < a.steps.size(); ++i)
      CHECK(a.steps[i].second.csv_row() == b.steps[i].second.csv_row());
    for (int i = 0; i < 2; ++i)
      CHECK(a.final_policies.agents[i].logits ==
            b.final_policies.agents[i].logits);
  }

  TEST_CASE("early stopping halts after persistent tiny deltas") {
    ScheduleConfig cfg = chain2_exact_config(30, 71);
    for (AgentSchedule& a : cfg.agents) a.exact_microsteps = 0;  // no motion
    cfg.early_stop.enabled = true;
    cfg.early_stop.tolerance = 1e-6;
    cfg.early_stop.patience = 3;
    InterleavedTrainer trainer(make_chain2(), cfg);
    TrainingLog log = trainer.run_training();
    CHECK(log.early_stopped);
    CHECK(log.rounds.size() == 4);  // baseline + 3 tiny rounds
  }
}

TEST_SUITE("transport") {
  TEST_CASE("remote and in-process training produce identical logs") {
    ScheduleConfig cfg = chain2_grpo_config(2, 81);
    InterleavedTrainer local(make_chain2(), cfg);
    TrainingLog log_local = local.run_training();

    ScheduleConfig remote_cfg = cfg;
    remote_cfg.transport = TransportKind::Remote;
    InterleavedTrainer remote(make_chain2(), remote_cfg);
    TrainingLog log_remote = remote.run_training();

    REQUIRE(log_local.steps.size() == log_remote.steps.size());
    for (size_t i = 0; i < log_local.steps.size(); ++i)
      CHECK(log_local.steps[i].second.csv_row() ==
            log_remote.steps[i].second.csv_row());
    REQUIRE(log_local.rounds.size() == log_remote.rounds.size());
    for (size_t i = 0; i < log_local.rounds.size(); ++i) {
      CHECK(log_local.rounds[i].j_mc == log_remote.rounds[i].j_mc);
      CHECK(log_local.rounds[i].j_exact == log_remote.rounds[i].j_exact);
    }
    for (int i = 0; i < 2; ++i)
      CHECK(log_local.final_policies.agents[i].logits ==
            log_remote.final_policies.agents[i].logits);

    // The structural memory property: remote training holds at most one
    // trainable block; in-process holds all of them.
    CHECK(log_remote.max_resident_blocks == 1);
    CHECK(log_local.max_resident_blocks == 2);
  }
}

TEST_SUITE("gridgui_training") {
  TEST_CASE("a short staged run completes and logs sane metrics") {
    InterleavedTrainer trainer(train_suite(), warm_suite(), RewardWeights{},
                               gridgui_config(2, 5));
    TrainingLog log = trainer.run_training();
    REQUIRE(log.rounds.size() == 3);
    for (const RoundLog& r : log.rounds) {
      CHECK(std::isfinite(r.j_mc));
      CHECK(r.j_mc >= 0.0);
      CHECK(r.j_mc <= 1.0);
      CHECK_FALSE(r.has_exact);
    }
    CHECK(!log.steps.empty());
    CHECK(log.filtered_by_agent.size() == 2);
  }
}

TEST_SUITE("transport_failure") {
  TEST_CASE("an unreachable service aborts the round without commits") {
    ScheduleConfig cfg = chain2_grpo_config(1, 91);
    cfg.transport = TransportKind::Remote;
    InterleavedTrainer trainer(make_chain2(), cfg);
    TrainingLog log = trainer.run_training();
    const JointPolicy committed = trainer.policies();

    // Kill the frozen complement's service and attempt another round: the
    // first block needs agent 1's answers, so it must abort.
    REQUIRE(trainer.service(1) != nullptr);
    trainer.service(1)->stop();
    CHECK_THROWS_AS(trainer.run_round(cfg.rounds + 1), TransportError);

    const JointPolicy after = trainer.policies();
    for (int i = 0; i < 2; ++i)
      CHECK(after.agents[i].logits == committed.agents[i].logits);
  }
}
