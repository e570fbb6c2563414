#include "marlab/rollout.hpp"

#include <stdexcept>

namespace marlab {

namespace {

// Per-step seed tags: agents take slots 0..5, the environment slot 6.
constexpr int kSeedSlots = 8;
constexpr int kEnvSlot = 6;
constexpr std::uint64_t kInputSalt = 0x1A57F00DULL;

}  // namespace

std::shared_ptr<const PolicySnapshot> PolicySnapshot::make(
    TabularPolicy policy, std::uint64_t version) {
  auto snap = std::make_shared<PolicySnapshot>();
  snap->probs = policy.probs();
  snap->log_probs = policy.log_probs();
  snap->policy = std::move(policy);
  snap->version = version;
  return snap;
}

SampleResult sample_from_snapshot(const PolicySnapshot& snapshot, int state,
                                  std::uint64_t seed) {
  if (state < 0 || state >= snapshot.probs.rows())
    throw std::invalid_argument("observation index out of range");
  SplitMix64 rng(seed);
  const int action = sample_index(snapshot.probs.row(state).transpose(),
                                  rng.uniform());
  return {action, snapshot.log_probs(state, action)};
}

TabularGameDomain::TabularGameDomain(MarkovGame game, int horizon)
    : game_(std::move(game)), horizon_(horizon) {
  game_.validate();
  if (horizon_ < 1) throw std::invalid_argument("horizon must be >= 1");
}

Rollout TabularGameDomain::run_rollout(std::span<AgentHandle* const> agents,
                                       std::uint64_t input_id,
                                       std::uint64_t seed) const {
  if (static_cast<int>(agents.size()) != game_.n_agents)
    throw std::invalid_argument("need one handle per agent");

  // The input pins the initial state so all K rollouts of a group share it.
  const std::uint64_t init_seed =
      seed_combine(kInputSalt, input_id);
  int state = sample_index(game_.initial_dist,
                           SplitMix64(init_seed).uniform());

  Rollout rollout;
  double discount_pow = 1.0;
  std::vector<int> actions(game_.n_agents);
  for (int t = 0; t < horizon_; ++t) {
    for (int i = 0; i < game_.n_agents; ++i) {
      const SampleResult r =
          agents[i]->sample(state, seed_combine(seed, t * kSeedSlots + i));
      actions[i] = r.action;
      rollout.decisions.push_back({i, state, r.action, r.log_prob});
    }
    const int joint = game_.joint_action_index(actions);
    rollout.reward += discount_pow * game_.reward(state, joint);
    discount_pow *= game_.discount;

    const auto& succ = game_.transition[state][joint];
    if (succ.size() == 1) {
      state = succ[0].next_state;
    } else {
      const double u =
          SplitMix64(seed_combine(seed, t * kSeedSlots + kEnvSlot)).uniform();
      double cum = 0.0;
      int next = succ.back().next_state;
      for (const Transition& tr : succ) {
        cum += tr.prob;
        if (u < cum) {
          next = tr.next_state;
          break;
        }
      }
      state = next;
    }
  }
  return rollout;
}

GridGuiDomain::GridGuiDomain(std::vector<gridgui::GridGuiTask> tasks,
                             RewardWeights weights)
    : tasks_(std::move(tasks)), weights_(weights) {
  if (tasks_.empty()) throw std::invalid_argument("task suite is empty");
  n_elements_ = tasks_.front().n_elements();
  for (const auto& t : tasks_) {
    t.validate();
    if (t.n_elements() != n_elements_)
      throw std::invalid_argument(
          "all tasks in a suite must share the element count");
  }
}

int GridGuiDomain::observation_count(int agent) const {
  return agent == 0 ? gridgui::navigator_state_count(n_elements_)
                    : gridgui::interactor_state_count(n_elements_);
}

int GridGuiDomain::action_count(int agent) const {
  return agent == 0 ? gridgui::token_count(n_elements_)
                    : gridgui::kNumActions;
}

Rollout GridGuiDomain::run_rollout(std::span<AgentHandle* const> agents,
                                   std::uint64_t input_id,
                                   std::uint64_t seed) const {
  if (agents.size() != 2)
    throw std::invalid_argument("gridgui rollouts need two handles");
  const gridgui::GridGuiTask& task =
      tasks_[static_cast<size_t>(input_id % tasks_.size())];
  gridgui::GridGuiEnv env(task);
  env.reset(seed);

  Rollout rollout;
  double total = 0.0;
  int steps = 0;
  while (!env.done()) {
    const int t = steps;
    const int nav_state = env.navigator_state();
    const SampleResult nav =
        agents[0]->sample(nav_state, seed_combine(seed, t * kSeedSlots));
    rollout.decisions.push_back({0, nav_state, nav.action, nav.log_prob});
    const gridgui::InstructionToken token =
        gridgui::token_from_index(nav.action, n_elements_);

    const int inter_state = env.interactor_state(token);
    const SampleResult inter =
        agents[1]->sample(inter_state, seed_combine(seed, t * kSeedSlots + 1));
    rollout.decisions.push_back({1, inter_state, inter.action,
                                 inter.log_prob});

    const gridgui::StepRewards r =
        env.step(token, static_cast<gridgui::ActionKind>(inter.action));
    total += r.combined(weights_);
    ++steps;
  }
  rollout.reward = steps > 0 ? total / steps : 0.0;
  return rollout;
}

RolloutGroup collect_group(const RolloutDomain& domain,
                           std::span<AgentHandle* const> agents,
                           std::uint64_t input_id, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("a rollout group needs K >= 2");
  RolloutGroup group;
  group.input_id = input_id;
  group.rollouts.reserve(k);
  for (int r = 0; r < k; ++r)
    group.rollouts.push_back(
        domain.run_rollout(agents, input_id, seed_combine(seed, r)));
  return group;
}

}  // namespace marlab
