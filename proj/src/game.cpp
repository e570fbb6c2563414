#include "marlab/game.hpp"

#include <cfloat>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace marlab {

namespace {

constexpr double kRowTol = 1e-12;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

int MarkovGame::n_joint_actions() const {
  int n = 1;
  for (int a : actions_per_agent) n *= a;
  return n;
}

int MarkovGame::joint_action_index(std::span<const int> actions) const {
  require(static_cast<int>(actions.size()) == n_agents,
          "joint action must list one action per agent");
  int idx = 0;
  for (int i = 0; i < n_agents; ++i) {
    require(actions[i] >= 0 && actions[i] < actions_per_agent[i],
            "action index out of range for agent " + std::to_string(i));
    idx = idx * actions_per_agent[i] + actions[i];
  }
  return idx;
}

void MarkovGame::decompose_joint_action(int joint, std::span<int> out) const {
  for (int i = n_agents - 1; i >= 0; --i) {
    out[i] = joint % actions_per_agent[i];
    joint /= actions_per_agent[i];
  }
}

void MarkovGame::validate() const {
  require(n_agents >= 1, "game must have at least one agent");
  require(n_states >= 1, "game must have at least one state");
  require(static_cast<int>(actions_per_agent.size()) == n_agents,
          "actions_per_agent must have one entry per agent");
  for (int i = 0; i < n_agents; ++i)
    require(actions_per_agent[i] >= 1,
            "agent " + std::to_string(i) + " must have at least one action");
  require(discount >= 0.0 && discount < 1.0, "discount must lie in [0, 1)");

  const int na = n_joint_actions();
  require(static_cast<int>(transition.size()) == n_states,
          "transition must have one row group per state");
  for (int s = 0; s < n_states; ++s) {
    require(static_cast<int>(transition[s].size()) == na,
            "transition[" + std::to_string(s) +
                "] must have one row per joint action");
    for (int a = 0; a < na; ++a) {
      double sum = 0.0;
      for (const Transition& t : transition[s][a]) {
        require(t.next_state >= 0 && t.next_state < n_states,
                "transition row (state=" + std::to_string(s) +
                    ", joint_action=" + std::to_string(a) +
                    ") references an out-of-range successor");
        require(t.prob >= 0.0 && std::isfinite(t.prob),
                "transition row (state=" + std::to_string(s) +
                    ", joint_action=" + std::to_string(a) +
                    ") has a negative or non-finite probability");
        sum += t.prob;
      }
      require(std::abs(sum - 1.0) <= kRowTol,
              "transition row (state=" + std::to_string(s) +
                  ", joint_action=" + std::to_string(a) +
                  ") sums to " + std::to_string(sum) + ", expected 1");
    }
  }

  require(reward.rows() == n_states && reward.cols() == na,
          "reward must be n_states x n_joint_actions");
  require(reward.allFinite(), "rewards must be finite");

  require(initial_dist.size() == n_states,
          "initial_dist must have one entry per state");
  require((initial_dist.array() >= 0.0).all(),
          "initial_dist entries must be nonnegative");
  require(std::abs(initial_dist.sum() - 1.0) <= kRowTol,
          "initial_dist sums to " + std::to_string(initial_dist.sum()) +
              ", expected 1");
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index s = 0; s < logits.rows(); ++s) {
    const double m = logits.row(s).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(s).array() - m).exp();
    // Floor at the smallest normal double: keeps every probability strictly
    // positive under extreme logit spreads while moving row sums by far less
    // than the 1e-12 tolerance. Log-probabilities stay exact via
    // log_softmax_rows.
    out.row(s) = (e / e.sum()).cwiseMax(DBL_MIN);
  }
  return out;
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index s = 0; s < logits.rows(); ++s) {
    const double m = logits.row(s).maxCoeff();
    Eigen::RowVectorXd shifted = logits.row(s).array() - m;
    const double lse = std::log(shifted.array().exp().sum());
    out.row(s) = shifted.array() - lse;
  }
  return out;
}

double joint_action_prob(const JointPolicy& policy, int state,
                         std::span<const int> actions) {
  require(static_cast<int>(actions.size()) == policy.n_agents(),
          "joint action must list one action per agent");
  double p = 1.0;
  for (int i = 0; i < policy.n_agents(); ++i) {
    const TabularPolicy& pol = policy.agents[i];
    require(state >= 0 && state < pol.n_states(), "state index out of range");
    require(actions[i] >= 0 && actions[i] < pol.n_actions(),
            "action index out of range for agent " + std::to_string(i));
    const Matrix probs = pol.probs();
    p *= probs(state, actions[i]);
  }
  return p;
}

JointPolicy compose_rolling_baseline(std::span<const TabularPolicy> updated_prev,
                                     std::span<const TabularPolicy> frozen_next,
                                     const TabularPolicy& active) {
  const int n = static_cast<int>(updated_prev.size() + frozen_next.size()) + 1;
  std::vector<const TabularPolicy*> slots(n, nullptr);
  auto place = [&](const TabularPolicy& p) {
    if (p.agent_id < 0 || p.agent_id >= n)
      throw std::invalid_argument("agent id " + std::to_string(p.agent_id) +
                                  " outside composed range");
    if (slots[p.agent_id] != nullptr)
      throw std::invalid_argument("duplicate policy for agent " +
                                  std::to_string(p.agent_id));
    slots[p.agent_id] = &p;
  };
  for (const TabularPolicy& p : updated_prev) {
    place(p);
    if (p.agent_id >= active.agent_id)
      throw std::invalid_argument(
          "updated_prev may only hold agents before the active slot");
  }
  place(active);
  for (const TabularPolicy& p : frozen_next) {
    place(p);
    if (p.agent_id <= active.agent_id)
      throw std::invalid_argument(
          "frozen_next may only hold agents after the active slot");
  }
  JointPolicy joint;
  joint.agents.reserve(n);
  for (int i = 0; i < n; ++i) {
    if (slots[i] == nullptr)
      throw std::invalid_argument("missing policy for agent " +
                                  std::to_string(i));
    joint.agents.push_back(*slots[i]);
  }
  return joint;
}

double Trajectory::discounted_return(double gamma) const {
  double g = 1.0, total = 0.0;
  for (const TrajectoryStep& step : steps) {
    total += g * step.reward;
    g *= gamma;
  }
  return total;
}

Trajectory sample_episode(const MarkovGame& game, const JointPolicy& policy,
                          std::uint64_t seed, int horizon) {
  if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
  if (policy.n_agents() != game.n_agents)
    throw std::invalid_argument("policy must cover every agent");

  std::vector<Matrix> probs, logp;
  probs.reserve(game.n_agents);
  logp.reserve(game.n_agents);
  for (const TabularPolicy& p : policy.agents) {
    probs.push_back(p.probs());
    logp.push_back(p.log_probs());
  }

  SplitMix64 rng(seed);
  Trajectory traj;
  traj.seed = seed;
  traj.horizon = horizon;
  traj.steps.reserve(horizon);

  int s = sample_index(game.initial_dist, rng.uniform());
  for (int t = 0; t < horizon; ++t) {
    TrajectoryStep step;
    step.state = s;
    step.actions.resize(game.n_agents);
    step.log_probs.resize(game.n_agents);
    for (int i = 0; i < game.n_agents; ++i) {
      const int a = sample_index(probs[i].row(s).transpose(), rng.uniform());
      step.actions[i] = a;
      step.log_probs[i] = logp[i](s, a);
    }
    const int joint = game.joint_action_index(step.actions);
    step.reward = game.reward(s, joint);

    const auto& succ = game.transition[s][joint];
    if (succ.size() == 1) {
      s = succ[0].next_state;
    } else {
      double u = rng.uniform();
      double cum = 0.0;
      int next = succ.back().next_state;
      for (const Transition& tr : succ) {
        cum += tr.prob;
        if (u < cum) {
          next = tr.next_state;
          break;
        }
      }
      s = next;
    }
    traj.steps.push_back(std::move(step));
  }
  return traj;
}

MarkovGame make_chain2() {
  MarkovGame g;
  g.n_agents = 2;
  g.n_states = 2;
  g.actions_per_agent = {2, 2};
  g.discount = 0.9;
  const int na = g.n_joint_actions();
  g.transition.assign(2, std::vector<std::vector<Transition>>(na));
  for (int s = 0; s < 2; ++s)
    for (int a = 0; a < na; ++a) g.transition[s][a] = {{s, 1.0}};
  g.transition[0][g.joint_action_index(std::vector<int>{0, 0})] = {{1, 1.0}};
  g.reward = Matrix::Zero(2, na);
  g.reward(1, g.joint_action_index(std::vector<int>{1, 1})) = 1.0;
  g.initial_dist = Vector::Zero(2);
  g.initial_dist[0] = 1.0;
  g.validate();
  return g;
}

MarkovGame make_random_game(const RandomGameSpec& spec) {
  MarkovGame g;
  g.n_agents = spec.n_agents;
  g.n_states = spec.n_states;
  g.actions_per_agent.assign(spec.n_agents, spec.actions);
  g.discount = spec.discount;
  const int na = g.n_joint_actions();

  SplitMix64 rng(spec.seed);
  g.transition.assign(spec.n_states, std::vector<std::vector<Transition>>(na));
  for (int s = 0; s < spec.n_states; ++s) {
    for (int a = 0; a < na; ++a) {
      Vector row(spec.n_states);
      for (int t = 0; t < spec.n_states; ++t) row[t] = rng.uniform() + 1e-3;
      row /= row.sum();
      // Re-normalize in a way that makes the row sum exactly representable.
      double acc = 0.0;
      auto& out = g.transition[s][a];
      out.reserve(spec.n_states);
      for (int t = 0; t < spec.n_states - 1; ++t) {
        out.push_back({t, row[t]});
        acc += row[t];
      }
      out.push_back({spec.n_states - 1, 1.0 - acc});
    }
  }
  g.reward = Matrix(spec.n_states, na);
  for (int s = 0; s < spec.n_states; ++s)
    for (int a = 0; a < na; ++a) g.reward(s, a) = rng.uniform();
  Vector d(spec.n_states);
  for (int s = 0; s < spec.n_states; ++s) d[s] = rng.uniform() + 1e-3;
  d /= d.sum();
  double acc = 0.0;
  for (int s = 0; s < spec.n_states - 1; ++s) acc += d[s];
  d[spec.n_states - 1] = 1.0 - acc;
  g.initial_dist = d;
  g.validate();
  return g;
}

TabularPolicy make_uniform_policy(const MarkovGame& game, int agent) {
  TabularPolicy p;
  p.agent_id = agent;
  p.logits = Matrix::Zero(game.n_states, game.actions_per_agent[agent]);
  return p;
}

JointPolicy make_uniform_joint_policy(const MarkovGame& game) {
  JointPolicy joint;
  for (int i = 0; i < game.n_agents; ++i)
    joint.agents.push_back(make_uniform_policy(game, i));
  return joint;
}

TabularPolicy make_random_policy(const MarkovGame& game, int agent,
                                 double sigma, std::uint64_t seed) {
  TabularPolicy p = make_uniform_policy(game, agent);
  SplitMix64 rng(seed);
  for (Eigen::Index s = 0; s < p.logits.rows(); ++s)
    for (Eigen::Index a = 0; a < p.logits.cols(); ++a)
      p.logits(s, a) = sigma * (2.0 * rng.uniform() - 1.0);
  return p;
}

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& obj, const std::vector<std::string>& known,
                         const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const auto& k : known)
      if (it.key() == k) ok = true;
    if (!ok)
      throw std::invalid_argument("unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace

MarkovGame parse_game(const std::string& json_text) {
  json doc = json::parse(json_text);
  reject_unknown_keys(doc,
                      {"n_agents", "n_states", "actions_per_agent",
                       "transition", "reward", "initial_dist", "discount"},
                      "game definition");
  MarkovGame g;
  g.n_agents = doc.at("n_agents").get<int>();
  g.n_states = doc.at("n_states").get<int>();
  g.actions_per_agent = doc.at("actions_per_agent").get<std::vector<int>>();
  g.discount = doc.at("discount").get<double>();

  const int na = g.n_joint_actions();
  const auto& trans = doc.at("transition");
  if (static_cast<int>(trans.size()) != g.n_states)
    throw std::invalid_argument("transition must have n_states entries");
  g.transition.assign(g.n_states, std::vector<std::vector<Transition>>(na));
  for (int s = 0; s < g.n_states; ++s) {
    if (static_cast<int>(trans[s].size()) != na)
      throw std::invalid_argument("transition[" + std::to_string(s) +
                                  "] must have one row per joint action");
    for (int a = 0; a < na; ++a) {
      const auto& row = trans[s][a];
      if (static_cast<int>(row.size()) != g.n_states)
        throw std::invalid_argument(
            "transition row (state=" + std::to_string(s) +
            ", joint_action=" + std::to_string(a) + ") has wrong length");
      for (int t = 0; t < g.n_states; ++t) {
        const double p = row[t].get<double>();
        if (p != 0.0) g.transition[s][a].push_back({t, p});
      }
      if (g.transition[s][a].empty()) g.transition[s][a].push_back({0, 0.0});
    }
  }

  const auto& rew = doc.at("reward");
  if (static_cast<int>(rew.size()) != g.n_states)
    throw std::invalid_argument("reward must have n_states rows");
  g.reward = Matrix(g.n_states, na);
  for (int s = 0; s < g.n_states; ++s) {
    if (static_cast<int>(rew[s].size()) != na)
      throw std::invalid_argument("reward[" + std::to_string(s) +
                                  "] must have one entry per joint action");
    for (int a = 0; a < na; ++a) g.reward(s, a) = rew[s][a].get<double>();
  }

  const auto& init = doc.at("initial_dist");
  if (static_cast<int>(init.size()) != g.n_states)
    throw std::invalid_argument("initial_dist must have n_states entries");
  g.initial_dist = Vector(g.n_states);
  for (int s = 0; s < g.n_states; ++s)
    g.initial_dist[s] = init[s].get<double>();

  g.validate();
  return g;
}

MarkovGame load_game(const std::string& path) {
  std::ifstream in(path);
  if (!in)
    throw std::runtime_error("cannot open game file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_game(ss.str());
}

std::string game_to_json(const MarkovGame& game) {
  json doc;
  doc["n_agents"] = game.n_agents;
  doc["n_states"] = game.n_states;
  doc["actions_per_agent"] = game.actions_per_agent;
  doc["discount"] = game.discount;
  const int na = game.n_joint_actions();
  json trans = json::array();
  for (int s = 0; s < game.n_states; ++s) {
    json per_action = json::array();
    for (int a = 0; a < na; ++a) {
      std::vector<double> row(game.n_states, 0.0);
      for (const Transition& t : game.transition[s][a])
        row[t.next_state] += t.prob;
      per_action.push_back(row);
    }
    trans.push_back(per_action);
  }
  doc["transition"] = std::move(trans);
  json rew = json::array();
  for (int s = 0; s < game.n_states; ++s) {
    std::vector<double> row(na);
    for (int a = 0; a < na; ++a) row[a] = game.reward(s, a);
    rew.push_back(row);
  }
  doc["reward"] = std::move(rew);
  std::vector<double> init(game.n_states);
  for (int s = 0; s < game.n_states; ++s) init[s] = game.initial_dist[s];
  doc["initial_dist"] = init;
  return doc.dump(2);
}

void save_game(const MarkovGame& game, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write game file: " + path);
  out << game_to_json(game) << "\n";
}

}  // namespace marlab
