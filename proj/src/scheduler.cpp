#include "marlab/scheduler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace marlab {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

constexpr std::uint64_t kRolloutSalt = 0xAB5010ULL;
constexpr std::uint64_t kReweightSalt = 0x5EEDFEEDULL;
constexpr std::uint64_t kEvalSalt = 0xE7A1ULL;
constexpr std::uint64_t kWarmupSalt = 0x3A93ULL;

}  // namespace

std::uint64_t rollout_seed(std::uint64_t config_seed, int round, int agent,
                           int iteration, int step, int group) {
  std::uint64_t s = seed_combine(config_seed, kRolloutSalt);
  s = seed_combine(s, static_cast<std::uint64_t>(round));
  s = seed_combine(s, static_cast<std::uint64_t>(agent + 1));
  s = seed_combine(s, static_cast<std::uint64_t>(iteration));
  s = seed_combine(s, static_cast<std::uint64_t>(step));
  return seed_combine(s, static_cast<std::uint64_t>(group));
}

std::uint64_t reweight_seed(std::uint64_t config_seed, int round, int agent,
                            int iteration, int step) {
  std::uint64_t s = seed_combine(config_seed, kReweightSalt);
  s = seed_combine(s, static_cast<std::uint64_t>(round));
  s = seed_combine(s, static_cast<std::uint64_t>(agent + 1));
  s = seed_combine(s, static_cast<std::uint64_t>(iteration));
  return seed_combine(s, static_cast<std::uint64_t>(step));
}

std::uint64_t eval_seed(std::uint64_t config_seed, int round, long input,
                        int episode) {
  std::uint64_t s = seed_combine(config_seed, kEvalSalt);
  s = seed_combine(s, static_cast<std::uint64_t>(round));
  s = seed_combine(s, static_cast<std::uint64_t>(input));
  return seed_combine(s, static_cast<std::uint64_t>(episode));
}

std::uint64_t warmup_seed(std::uint64_t config_seed, int agent) {
  return seed_combine(seed_combine(config_seed, kWarmupSalt),
                      static_cast<std::uint64_t>(agent));
}

void ScheduleConfig::validate(int n_agents) const {
  require(rounds >= 0, "rounds must be nonnegative");
  require(static_cast<int>(agents.size()) == n_agents,
          "one AgentSchedule per agent required");
  require(static_cast<int>(agent_order.size()) == n_agents,
          "agent_order must list every agent");
  std::vector<bool> seen(n_agents, false);
  for (int a : agent_order) {
    require(a >= 0 && a < n_agents, "agent_order entry out of range");
    require(!seen[a], "agent_order must be a permutation");
    seen[a] = true;
  }
  for (const AgentSchedule& s : agents) {
    s.grpo.validate();
    s.reweight.validate();
    require(s.exact_microsteps >= 0, "exact micro-step budget must be >= 0");
  }
  require(game_horizon >= 1, "game horizon must be >= 1");
  require(eval_episodes >= 1, "eval episodes must be >= 1");
  require(exact_step_init > 0.0, "exact step size must be positive");
  if (solver == SolverKind::Exact)
    require(transport == TransportKind::InProcess,
            "the exact solver needs full oracle access and runs in-process");
  if (mode != UpdateMode::Sequential)
    require(transport == TransportKind::InProcess,
            "parallel and joint modes run in-process; remote serving targets "
            "the sequential scheme");
}

InterleavedTrainer::InterleavedTrainer(MarkovGame game, ScheduleConfig config)
    : game_(std::move(game)), config_(std::move(config)) {
  game_->validate();
  n_agents_ = game_->n_agents;
  config_.validate(n_agents_);
  domain_ = std::make_unique<TabularGameDomain>(*game_, config_.game_horizon);
  init_policies();
}

InterleavedTrainer::InterleavedTrainer(
    std::vector<gridgui::GridGuiTask> train_tasks,
    std::vector<gridgui::GridGuiTask> warmup_tasks, RewardWeights weights,
    ScheduleConfig config)
    : weights_(weights), config_(std::move(config)) {
  require(config_.solver == SolverKind::Grpo,
          "the exact solver requires a tabular game context");
  n_agents_ = 2;
  config_.validate(n_agents_);
  domain_ = std::make_unique<GridGuiDomain>(std::move(train_tasks), weights_);
  if (!warmup_tasks.empty())
    warmup_domain_ =
        std::make_unique<GridGuiDomain>(std::move(warmup_tasks), weights_);
  init_policies();
}

InterleavedTrainer::~InterleavedTrainer() = default;

void InterleavedTrainer::init_policies() {
  slots_.resize(n_agents_);
  exact_step_size_.assign(n_agents_, config_.exact_step_init);
  log_.filtered_by_agent.assign(n_agents_, 0);
  log_.scored_steps_by_agent.assign(n_agents_, 0);
  for (int i = 0; i < n_agents_; ++i) {
    TabularPolicy p;
    p.agent_id = i;
    p.logits = Matrix::Zero(domain_->observation_count(i),
                            domain_->action_count(i));
    commit(i, std::move(p));
  }
}

void InterleavedTrainer::note_residency() {
  log_.max_resident_blocks =
      std::max(log_.max_resident_blocks, resident_trainable_blocks());
}

int InterleavedTrainer::resident_trainable_blocks() const {
  int n = 0;
  for (const AgentSlot& slot : slots_)
    if (slot.local.has_value()) ++n;
  return n;
}

TabularPolicy InterleavedTrainer::pull_local(int agent) {
  AgentSlot& slot = slots_[agent];
  if (config_.transport == TransportKind::Remote && transport_ready_) {
    TabularPolicy p = slot.server->snapshot()->policy;
    slot.local = p;
    note_residency();
    return p;
  }
  return *slot.local;
}

void InterleavedTrainer::commit(int agent, TabularPolicy policy) {
  AgentSlot& slot = slots_[agent];
  policy.agent_id = agent;
  if (config_.transport == TransportKind::Remote && transport_ready_) {
    slot.server->swap_snapshot(policy);
    slot.local.reset();  // the trainer drops the block once it is served
  } else {
    slot.committed = PolicySnapshot::make(policy, 0);
    slot.local = std::move(policy);
  }
  note_residency();
}

TabularPolicy InterleavedTrainer::committed_policy(int agent) const {
  const AgentSlot& slot = slots_[agent];
  if (config_.transport == TransportKind::Remote && transport_ready_)
    return slot.server->snapshot()->policy;
  return *slot.local;
}

PolicyServer* InterleavedTrainer::service(int agent) {
  return slots_[agent].server.get();
}

JointPolicy InterleavedTrainer::policies() const {
  JointPolicy joint;
  for (int i = 0; i < n_agents_; ++i)
    joint.agents.push_back(committed_policy(i));
  return joint;
}

void InterleavedTrainer::setup_transport() {
  if (config_.transport != TransportKind::Remote || transport_ready_) return;
  for (int i = 0; i < n_agents_; ++i) {
    AgentSlot& slot = slots_[i];
    slot.server = std::make_unique<PolicyServer>(i, *slot.local);
    slot.remote = std::make_unique<RemoteAgentHandle>(slot.server->host(),
                                                      slot.server->port(), i);
    slot.local.reset();
  }
  transport_ready_ = true;
  note_residency();
}

AgentHandle* InterleavedTrainer::handle_for(
    int agent, const std::shared_ptr<const PolicySnapshot>& override_snap,
    std::vector<std::unique_ptr<AgentHandle>>& owned) {
  if (override_snap) {
    owned.push_back(std::make_unique<LocalAgentHandle>(override_snap));
    return owned.back().get();
  }
  if (config_.transport == TransportKind::Remote && transport_ready_)
    return slots_[agent].remote.get();  // one connection per agent, reused
  owned.push_back(
      std::make_unique<LocalAgentHandle>(slots_[agent].committed));
  return owned.back().get();
}

namespace {

JointPolicy placeholder_joint(int n_agents, int active, TabularPolicy theta) {
  JointPolicy joint;
  joint.agents.resize(n_agents);
  for (int i = 0; i < n_agents; ++i) {
    joint.agents[i].agent_id = i;
    joint.agents[i].logits = Matrix(0, 0);
  }
  theta.agent_id = active;
  joint.agents[active] = std::move(theta);
  return joint;
}

}  // namespace

void InterleavedTrainer::run_grpo_block(
    int round, int agent,
    const std::vector<std::shared_ptr<const PolicySnapshot>>&
        complement_override) {
  const AgentSchedule& sched = config_.agents[agent];
  const GrpoHyperparams& hyper = sched.grpo;
  TabularPolicy theta = pull_local(agent);

  for (int m = 0; m < hyper.iterations_m; ++m) {
    const JointPolicy ref_joint = placeholder_joint(n_agents_, agent, theta);
    for (int b = 0; b < hyper.steps_b; ++b) {
      // theta_old <- theta; rollouts sample from the refreshed snapshot.
      auto old_snap = PolicySnapshot::make(theta, 0);

      std::vector<std::unique_ptr<AgentHandle>> owned;
      std::vector<AgentHandle*> handles(n_agents_);
      for (int j = 0; j < n_agents_; ++j) {
        if (j == agent) {
          owned.push_back(std::make_unique<LocalAgentHandle>(old_snap));
          handles[j] = owned.back().get();
        } else {
          handles[j] = handle_for(j,
                                  complement_override.empty()
                                      ? nullptr
                                      : complement_override[j],
                                  owned);
        }
      }

      const long step_ordinal =
          (static_cast<long>(round - 1) * hyper.iterations_m + m) *
              hyper.steps_b +
          b;
      std::vector<RolloutGroup> groups;
      groups.reserve(hyper.batch_groups);
      for (int g = 0; g < hyper.batch_groups; ++g) {
        const std::uint64_t input =
            static_cast<std::uint64_t>(step_ordinal) * hyper.batch_groups + g;
        groups.push_back(collect_group(
            *domain_, handles, input, hyper.rollouts_k,
            rollout_seed(config_.seed, round, agent, m, b, g)));
      }

      StepMetrics metrics;
      metrics.iteration = m;
      metrics.step = b;
      metrics.agent = agent;

      std::vector<RolloutGroup> batch;
      if (sched.reweight_enabled) {
        ReweightOutcome outcome = reweight_batch(
            groups, sched.reweight,
            reweight_seed(config_.seed, round, agent, m, b));
        metrics.n_filtered = outcome.n_filtered;
        metrics.n_refilled = outcome.n_refilled;
        batch = std::move(outcome.batch);
      } else {
        batch = std::move(groups);
      }
      log_.filtered_by_agent[agent] += metrics.n_filtered;
      log_.scored_steps_by_agent[agent] += 1;

      const JointPolicy policy_joint =
          placeholder_joint(n_agents_, agent, theta);
      GrpoStepResult result =
          grpo_step(policy_joint, batch, agent, ref_joint, hyper);
      metrics.objective = result.metrics.objective;
      metrics.mean_kl_ref = result.metrics.mean_kl_ref;
      metrics.clip_fraction = result.metrics.clip_fraction;
      metrics.skipped = result.metrics.skipped;
      if (!result.metrics.skipped)
        theta = std::move(result.policy.agents[agent]);
      log_.steps.emplace_back(round, metrics);
      note_residency();
    }
  }
  commit(agent, std::move(theta));
}

void InterleavedTrainer::run_exact_block(int round, int agent) {
  require(game_.has_value(), "exact blocks need a tabular game");
  const AgentSchedule& sched = config_.agents[agent];
  TabularPolicy iterate = pull_local(agent);

  auto joint_with = [&](const TabularPolicy& active) {
    JointPolicy joint;
    for (int i = 0; i < n_agents_; ++i)
      joint.agents.push_back(i == agent ? active : committed_policy(i));
    joint.agents[agent].agent_id = agent;
    return joint;
  };

  for (int j = 0; j < sched.exact_microsteps; ++j) {
    const JointPolicy baseline = joint_with(iterate);
    const MicroStepContext ctx =
        make_microstep_context(*game_, baseline, agent);
    const Matrix grad = ctx.surrogate_gradient_at_incumbent();

    TabularPolicy candidate = iterate;
    if (grad.cwiseAbs().maxCoeff() > 1e-15) {
      double eta = exact_step_size_[agent];
      bool accepted = false;
      for (int tries = 0; tries < 60; ++tries, eta *= 0.5) {
        candidate.logits = iterate.logits + eta * grad;
        // Accept only certified-nonnegative penalized improvements.
        if (ctx.penalized_objective(candidate) > 0.0) {
          accepted = true;
          exact_step_size_[agent] =
              std::min(tries == 0 ? eta * 2.0 : eta, 1e3);
          break;
        }
      }
      if (!accepted) candidate = iterate;
    }

    MicroStepReport report =
        microstep_bound(*game_, baseline, joint_with(candidate), agent);
    report.round = round;
    report.microstep = j;
    log_.microsteps.push_back(report);
    iterate = candidate;
  }
  commit(agent, std::move(iterate));
}

void InterleavedTrainer::run_round(int round) {
  for (int slot = 0; slot < n_agents_; ++slot) {
    const int agent = config_.agent_order[slot];
    if (config_.solver == SolverKind::Exact)
      run_exact_block(round, agent);
    else
      run_grpo_block(round, agent, {});
  }
}

void InterleavedTrainer::run_parallel_round(int round) {
  require(config_.solver == SolverKind::Grpo,
          "parallel rounds use the sampled solver");
  // Round-start snapshots: every agent trains against them and commits land
  // together afterwards.
  std::vector<std::shared_ptr<const PolicySnapshot>> snapshot(n_agents_);
  for (int i = 0; i < n_agents_; ++i)
    snapshot[i] = PolicySnapshot::make(committed_policy(i), 0);

  std::vector<TabularPolicy> results(n_agents_);
  for (int slot = 0; slot < n_agents_; ++slot) {
    const int agent = config_.agent_order[slot];
    run_grpo_block(round, agent, snapshot);
    results[agent] = committed_policy(agent);
    // Undo the block's commit until every agent has trained.
    commit(agent, snapshot[agent]->policy);
  }
  for (int i = 0; i < n_agents_; ++i) commit(i, std::move(results[i]));
}

void InterleavedTrainer::run_joint_round(int round) {
  require(config_.solver == SolverKind::Grpo,
          "joint rounds use the sampled solver");
  const AgentSchedule& sched = config_.agents[config_.agent_order[0]];
  const GrpoHyperparams& hyper = sched.grpo;
  // With one agent the joint update IS that agent's block, down to seeds.
  const int block_tag = n_agents_ == 1 ? 0 : -1;

  JointPolicy thetas = policies();
  for (int m = 0; m < hyper.iterations_m; ++m) {
    const JointPolicy ref_joint = thetas;
    for (int b = 0; b < hyper.steps_b; ++b) {
      std::vector<std::unique_ptr<AgentHandle>> owned;
      std::vector<AgentHandle*> handles(n_agents_);
      for (int j = 0; j < n_agents_; ++j) {
        owned.push_back(std::make_unique<LocalAgentHandle>(
            PolicySnapshot::make(thetas.agents[j], 0)));
        handles[j] = owned.back().get();
      }

      const long step_ordinal =
          (static_cast<long>(round - 1) * hyper.iterations_m + m) *
              hyper.steps_b +
          b;
      std::vector<RolloutGroup> groups;
      for (int g = 0; g < hyper.batch_groups; ++g) {
        const std::uint64_t input =
            static_cast<std::uint64_t>(step_ordinal) * hyper.batch_groups + g;
        groups.push_back(collect_group(
            *domain_, handles, input, hyper.rollouts_k,
            rollout_seed(config_.seed, round, block_tag, m, b, g)));
      }

      StepMetrics metrics;
      metrics.iteration = m;
      metrics.step = b;
      metrics.agent = block_tag;  // every agent updates
      std::vector<RolloutGroup> batch;
      if (sched.reweight_enabled) {
        ReweightOutcome outcome = reweight_batch(
            groups, sched.reweight,
            reweight_seed(config_.seed, round, block_tag, m, b));
        metrics.n_filtered = outcome.n_filtered;
        metrics.n_refilled = outcome.n_refilled;
        batch = std::move(outcome.batch);
      } else {
        batch = std::move(groups);
      }

      GrpoStepResult result =
          grpo_step(thetas, batch, kAllAgents, ref_joint, hyper);
      metrics.objective = result.metrics.objective;
      metrics.mean_kl_ref = result.metrics.mean_kl_ref;
      metrics.clip_fraction = result.metrics.clip_fraction;
      metrics.skipped = result.metrics.skipped;
      if (!result.metrics.skipped) thetas = std::move(result.policy);
      log_.steps.emplace_back(round, metrics);
    }
  }
  for (int i = 0; i < n_agents_; ++i)
    commit(i, std::move(thetas.agents[i]));
}

void InterleavedTrainer::warm_up() {
  switch (config_.warmup.kind) {
    case WarmupSpec::Kind::Skip:
      for (int i = 0; i < n_agents_; ++i) {
        TabularPolicy p;
        p.agent_id = i;
        p.logits = Matrix::Zero(domain_->observation_count(i),
                                domain_->action_count(i));
        commit(i, std::move(p));
      }
      return;
    case WarmupSpec::Kind::Random:
      for (int i = 0; i < n_agents_; ++i) {
        TabularPolicy p;
        p.agent_id = i;
        p.logits = Matrix::Zero(domain_->observation_count(i),
                                domain_->action_count(i));
        SplitMix64 rng(warmup_seed(config_.seed, i));
        for (Eigen::Index s = 0; s < p.logits.rows(); ++s)
          for (Eigen::Index a = 0; a < p.logits.cols(); ++a)
            p.logits(s, a) =
                config_.warmup.sigma * (2.0 * rng.uniform() - 1.0);
        commit(i, std::move(p));
      }
      return;
    case WarmupSpec::Kind::Staged:
      warm_up_staged();
      return;
  }
}

void InterleavedTrainer::warm_up_staged() {
  require(warmup_domain_ != nullptr,
          "staged warm-up needs a GridGUI warm-up suite");
  const int n_elements = warmup_domain_->n_elements();

  // Navigator: cross-entropy imitation of the scripted planner on the
  // labeled warm-up traces.
  std::vector<std::pair<int, int>> labels;
  for (const gridgui::GridGuiTask& task : warmup_domain_->tasks()) {
    gridgui::GridGuiEnv env(task);
    env.reset(0);
    for (const gridgui::GoldStep& step : task.gold_trace) {
      labels.emplace_back(env.navigator_state(),
                          gridgui::token_index(step.instruction, n_elements));
      env.step(step.instruction, step.action);
    }
  }
  TabularPolicy navigator;
  navigator.agent_id = 0;
  navigator.logits = Matrix::Zero(domain_->observation_count(0),
                                  domain_->action_count(0));
  for (int pass = 0; pass < config_.warmup.imitation_passes; ++pass) {
    for (const auto& [state, token] : labels) {
      const Eigen::RowVectorXd probs =
          softmax_rows(navigator.logits.row(state));
      navigator.logits.row(state) -= config_.warmup.imitation_rate * probs;
      navigator.logits(state, token) += config_.warmup.imitation_rate;
    }
  }
  commit(0, std::move(navigator));

  // Interactor: single-agent GRPO with the scripted planner frozen as the
  // instruction source.
  const GrpoHyperparams& hyper = config_.warmup.interactor_rl;
  auto scripted_nav = PolicySnapshot::make(
      gridgui::scripted_navigator_policy(n_elements), 0);
  TabularPolicy interactor;
  interactor.agent_id = 1;
  interactor.logits = Matrix::Zero(domain_->observation_count(1),
                                   domain_->action_count(1));
  const std::uint64_t rl_seed = warmup_seed(config_.seed, 1);
  for (int m = 0; m < hyper.iterations_m; ++m) {
    const JointPolicy ref_joint = placeholder_joint(2, 1, interactor);
    for (int b = 0; b < hyper.steps_b; ++b) {
      auto old_snap = PolicySnapshot::make(interactor, 0);
      LocalAgentHandle nav_handle(scripted_nav);
      LocalAgentHandle inter_handle(old_snap);
      std::vector<AgentHandle*> handles{&nav_handle, &inter_handle};

      const long step_ordinal = static_cast<long>(m) * hyper.steps_b + b;
      std::vector<RolloutGroup> groups;
      for (int g = 0; g < hyper.batch_groups; ++g) {
        const std::uint64_t input =
            static_cast<std::uint64_t>(step_ordinal) * hyper.batch_groups + g;
        groups.push_back(collect_group(
            *warmup_domain_, handles, input, hyper.rollouts_k,
            seed_combine(rl_seed, step_ordinal * hyper.batch_groups + g)));
      }
      const JointPolicy policy_joint = placeholder_joint(2, 1, interactor);
      GrpoStepResult result =
          grpo_step(policy_joint, groups, 1, ref_joint, hyper);
      if (!result.metrics.skipped)
        interactor = std::move(result.policy.agents[1]);
    }
  }
  commit(1, std::move(interactor));
}

double InterleavedTrainer::evaluate_exact() const {
  require(game_.has_value(), "exact evaluation needs a tabular game");
  return return_j(*game_, policies());
}

double InterleavedTrainer::evaluate_mc(int round) {
  std::vector<std::unique_ptr<AgentHandle>> owned;
  std::vector<AgentHandle*> handles(n_agents_);
  for (int j = 0; j < n_agents_; ++j)
    handles[j] = handle_for(j, nullptr, owned);
  const long pool = domain_->input_pool_size();
  const long n_inputs = pool > 0 ? pool : 8;
  double total = 0.0;
  long count = 0;
  for (long input = 0; input < n_inputs; ++input) {
    for (int e = 0; e < config_.eval_episodes; ++e) {
      const Rollout rollout = domain_->run_rollout(
          handles, static_cast<std::uint64_t>(input),
          eval_seed(config_.seed, round, input, e));
      total += rollout.reward;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

TrainingLog InterleavedTrainer::run_training() {
  const auto t0 = std::chrono::steady_clock::now();
  warm_up();
  setup_transport();
  // Residency accounting covers the interleaved stage; warm-up always runs
  // with local parameters.
  log_.max_resident_blocks = resident_trainable_blocks();

  auto record_round = [&](int round, double prev) {
    RoundLog entry;
    entry.round = round;
    entry.j_mc = evaluate_mc(round);
    if (game_.has_value()) {
      entry.has_exact = true;
      entry.j_exact = evaluate_exact();
    }
    const double headline = entry.has_exact ? entry.j_exact : entry.j_mc;
    entry.delta = round == 0 ? 0.0 : headline - prev;
    log_.rounds.push_back(entry);
    return headline;
  };

  double prev = record_round(0, 0.0);
  int consecutive_small = 0;
  for (int k = 1; k <= config_.rounds; ++k) {
    switch (config_.mode) {
      case UpdateMode::Sequential:
        run_round(k);
        break;
      case UpdateMode::Parallel:
        run_parallel_round(k);
        break;
      case UpdateMode::Joint:
        run_joint_round(k);
        break;
    }
    prev = record_round(k, prev);
    if (config_.early_stop.enabled) {
      if (std::abs(log_.rounds.back().delta) < config_.early_stop.tolerance)
        ++consecutive_small;
      else
        consecutive_small = 0;
      if (consecutive_small >= config_.early_stop.patience) {
        log_.early_stopped = true;
        break;
      }
    }
  }

  log_.final_policies = policies();
  log_.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return log_;
}

}  // namespace marlab
