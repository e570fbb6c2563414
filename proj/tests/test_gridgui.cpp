#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "marlab/game.hpp"
#include "marlab/gridgui.hpp"
#include "marlab/grpo.hpp"
#include "marlab/oracle.hpp"

using namespace marlab;
using namespace marlab::gridgui;

namespace {

// Button at (2,1), field at (1,3) on a 4x4 grid; goal presses the button
// then fills the field.
GridGuiTask button_field_task() {
  GridGuiTask t;
  t.width = 4;
  t.height = 4;
  t.horizon = 12;
  t.elements = {{0, CellType::Button, 2, 1}, {1, CellType::Field, 1, 3}};
  t.goal = {0, 1};
  t.validate();
  return t;
}

}  // namespace

TEST_SUITE("tokens") {
  TEST_CASE("index round-trips the whole vocabulary") {
    for (int e : {0, 1, 2}) {
      for (int idx = 0; idx < token_count(e); ++idx) {
        InstructionToken t = token_from_index(idx, e);
        CHECK(token_index(t, e) == idx);
      }
    }
  }

  TEST_CASE("schema validity follows verb/argument compatibility") {
    CHECK(schema_valid(InstructionToken::with_dir(Verb::MoveTo, Dir::North)));
    CHECK(schema_valid(InstructionToken::with_element(Verb::MoveTo, 0)));
    CHECK(schema_valid(InstructionToken::with_element(Verb::Click, 1)));
    CHECK(schema_valid(InstructionToken::with_none(Verb::Done)));
    CHECK_FALSE(schema_valid(InstructionToken::with_none(Verb::MoveTo)));
    CHECK_FALSE(schema_valid(InstructionToken::with_none(Verb::Click)));
    CHECK_FALSE(schema_valid(InstructionToken::with_dir(Verb::Click, Dir::East)));
    CHECK_FALSE(schema_valid(InstructionToken::with_element(Verb::Done, 0)));
  }
}

TEST_SUITE("env_reset") {
  TEST_CASE("same task and seed give identical observations") {
    GridGuiEnv env(button_field_task());
    const std::string a = observation_to_json(env.reset(5));
    const std::string b = observation_to_json(env.reset(5));
    CHECK(a == b);
  }

  TEST_CASE("degenerate 1x1 task starts terminal-eligible") {
    GridGuiTask t;
    t.width = 1;
    t.height = 1;
    t.horizon = 2;
    t.goal = {};
    t.validate();
    GridGuiEnv env(t);
    env.reset(0);
    CHECK(env.gold_step().instruction ==
          InstructionToken::with_none(Verb::Done));
    CHECK(env.gold_step().action == ActionKind::Finish);
  }

  TEST_CASE("navigator observation lists both element ids") {
    GridGuiEnv env(button_field_task());
    NavigatorObservation obs = env.reset(1);
    std::set<int> ids;
    for (const Element& e : obs.element_map) ids.insert(e.id);
    CHECK(ids == std::set<int>{0, 1});
    CHECK(obs.goal == std::vector<int>{0, 1});
  }
}

TEST_SUITE("env_step") {
  TEST_CASE("click on the target cell scores action and parameters") {
    GridGuiTask t = button_field_task();
    t.start_x = 2;
    t.start_y = 1;  // start on the button
    GridGuiEnv env(t);
    env.reset(0);
    StepRewards r = env.step(InstructionToken::with_element(Verb::Click, 0),
                             ActionKind::Click);
    CHECK(r.r_form == 1.0);
    CHECK(r.r_act == 1.0);
    CHECK(r.r_info == 1.0);
    CHECK(env.progress() == 1);
  }

  TEST_CASE("kind mismatch zeroes the action reward") {
    GridGuiTask t = button_field_task();
    t.start_x = 2;
    t.start_y = 1;
    GridGuiEnv env(t);
    env.reset(0);
    StepRewards r = env.step(InstructionToken::with_element(Verb::Click, 0),
                             ActionKind::MoveNorth);
    CHECK(r.r_act == 0.0);
    CHECK(r.r_info == 0.0);
    CHECK(env.progress() == 0);
  }

  TEST_CASE("movement scores iff it reduces distance to the target") {
    GridGuiTask t = button_field_task();
    t.goal = {1};  // the field at (1,3); start at (0,0)
    t.validate();

    for (int a = 0; a < 4; ++a) {
      GridGuiEnv env(t);
      env.reset(0);
      const ActionKind act = static_cast<ActionKind>(a);
      StepRewards r =
          env.step(InstructionToken::with_element(Verb::MoveTo, 1), act);
      CHECK(r.r_act == 1.0);  // gold action is a move
      const bool reduces =
          act == ActionKind::MoveEast || act == ActionKind::MoveSouth;
      CHECK(r.r_info == (reduces ? 1.0 : 0.0));
    }
  }

  TEST_CASE("acting after done is a contract error") {
    GridGuiTask t;
    t.width = 1;
    t.height = 1;
    t.horizon = 3;
    t.goal = {};
    GridGuiEnv env(t);
    env.reset(0);
    env.step(InstructionToken::with_none(Verb::Done), ActionKind::Finish);
    CHECK(env.done());
    CHECK_THROWS_AS(env.step(InstructionToken::with_none(Verb::Done),
                             ActionKind::Finish),
                    std::logic_error);
  }

  TEST_CASE("episode ends at the horizon") {
    GridGuiTask t = button_field_task();
    GridGuiEnv env(t);
    env.reset(0);
    for (int i = 0; i < t.horizon; ++i) {
      CHECK_FALSE(env.done());
      env.step(InstructionToken::with_none(Verb::Done), ActionKind::Noop);
    }
    CHECK(env.done());
  }
}

TEST_SUITE("reward_components") {
  TEST_CASE("fully matching step earns 1.0 under default weights") {
    GridGuiTask t = button_field_task();
    GridGuiEnv env(t);
    env.reset(0);
    GoldStep gold = env.gold_step();
    StepRewards r = env.step(gold.instruction, gold.action);
    CHECK(r.combined(RewardWeights{}) == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("schema-invalid instruction zeroes the format reward") {
    GridGuiTask t = button_field_task();
    GridGuiEnv env(t);
    env.reset(0);
    GoldStep gold = env.gold_step();
    StepRewards r = env.step(InstructionToken::with_element(Verb::Done, 0),
                             gold.action);
    CHECK(r.r_form == 0.0);
    CHECK(r.r_act == 1.0);
  }

  TEST_CASE("right kind with wrong parameters combines to 0.28") {
    GridGuiTask t = button_field_task();
    GridGuiEnv env(t);
    env.reset(0);
    // Gold is a distance-reducing move (target at (2,1), cursor (0,0));
    // moving west is the right kind with the wrong direction.
    REQUIRE(is_move(env.gold_step().action));
    StepRewards r = env.step(env.gold_step().instruction, ActionKind::MoveWest);
    CHECK(r.r_act == 1.0);
    CHECK(r.r_info == 0.0);
    CHECK(r.combined(RewardWeights{}) == doctest::Approx(0.28).epsilon(1e-12));
  }
}

TEST_SUITE("gold_trace") {
  TEST_CASE("executed verbatim it earns 1.0 per step and completes") {
    for (const GridGuiTask& t : make_fixture_suite(20, 4, 4, 12, 7)) {
      GridGuiEnv env(t);
      env.reset(0);
      int steps = 0;
      for (const GoldStep& step : t.gold_trace) {
        StepRewards r = env.step(step.instruction, step.action);
        CHECK(r.combined(RewardWeights{}) ==
              doctest::Approx(1.0).epsilon(1e-12));
        ++steps;
      }
      CHECK(env.done());
      CHECK(env.goal_complete());
      CHECK(steps <= t.horizon);
    }
  }

  TEST_CASE("fixture suite is deterministic in the seed") {
    auto a = make_fixture_suite(5, 4, 4, 12, 99);
    auto b = make_fixture_suite(5, 4, 4, 12, 99);
    for (int i = 0; i < 5; ++i)
      CHECK(task_to_json(a[i]) == task_to_json(b[i]));
  }
}

TEST_SUITE("information_asymmetry") {
  TEST_CASE("serialized interactor observation has no goal field") {
    GridGuiEnv env(button_field_task());
    env.reset(0);
    const std::string nav = observation_to_json(env.navigator_observation());
    const std::string inter = observation_to_json(env.interactor_observation(
        InstructionToken::with_dir(Verb::MoveTo, Dir::East)));
    CHECK(nav.find("\"goal\"") != std::string::npos);
    CHECK(inter.find("\"goal\"") == std::string::npos);
    CHECK(inter.find("\"instruction\"") != std::string::npos);
  }
}

TEST_SUITE("encodings") {
  TEST_CASE("navigator encoding stays in range and hits the done state") {
    GridGuiTask t = button_field_task();
    const int count = navigator_state_count(t.n_elements());
    for (int progress = 0; progress <= 2; ++progress)
      for (int x = 0; x < 4; ++x)
        for (int y = 0; y < 4; ++y) {
          const int s = encode_navigator(t, progress, x, y);
          CHECK(s >= 0);
          CHECK(s < count);
          if (progress == 2) CHECK(s == 0);
        }
  }

  TEST_CASE("interactor encoding distinguishes on-cell from off-cell") {
    GridGuiTask t = button_field_task();
    const InstructionToken click =
        InstructionToken::with_element(Verb::Click, 0);
    const int on = encode_interactor(t, click, 2, 1);
    const int off = encode_interactor(t, click, 0, 0);
    CHECK(on != off);
    CHECK(on % 3 == 1);
    CHECK(off % 3 == 0);
    const InstructionToken done = InstructionToken::with_none(Verb::Done);
    CHECK(encode_interactor(t, done, 0, 0) % 3 == 2);
  }

  TEST_CASE("scripted pair reproduces the gold trace on every fixture") {
    for (const GridGuiTask& t : make_fixture_suite(10, 4, 4, 12, 31)) {
      TabularPolicy nav = scripted_navigator_policy(t.n_elements());
      TabularPolicy inter = scripted_interactor_policy(t.n_elements());
      GridGuiEnv env(t);
      env.reset(0);
      while (!env.done()) {
        int tok_idx;
        nav.logits.row(env.navigator_state()).maxCoeff(&tok_idx);
        const InstructionToken tok = token_from_index(tok_idx, t.n_elements());
        int act_idx;
        inter.logits.row(env.interactor_state(tok)).maxCoeff(&act_idx);
        StepRewards r = env.step(tok, static_cast<ActionKind>(act_idx));
        CHECK(r.combined(RewardWeights{}) ==
              doctest::Approx(1.0).epsilon(1e-12));
      }
      CHECK(env.goal_complete());
    }
  }
}

TEST_SUITE("export") {
  TEST_CASE("scripted policy return matches Monte-Carlo on a 3x3 export") {
    GridGuiTask t;
    t.width = 3;
    t.height = 3;
    t.horizon = 10;
    t.elements = {{0, CellType::Button, 2, 2}};
    t.goal = {0};
    t.validate();

    MarkovGame game = export_markov_game(t, RewardWeights{}, 0.9);
    JointPolicy scripted = scripted_export_policy(t);
    const double j_exact = return_j(game, scripted);

    const int n_episodes = 20000;
    const int horizon = 150;
    double sum = 0.0, sum_sq = 0.0;
    for (int e = 0; e < n_episodes; ++e) {
      Trajectory traj = sample_episode(game, scripted, 31400 + e, horizon);
      const double ret = traj.discounted_return(game.discount);
      sum += ret;
      sum_sq += ret * ret;
    }
    const double mean = sum / n_episodes;
    const double var = sum_sq / n_episodes - mean * mean;
    const double se = std::sqrt(var / n_episodes);
    const double truncation =
        std::pow(game.discount, horizon) / (1.0 - game.discount);
    CHECK(std::abs(mean - j_exact) <= 3.0 * se + truncation + 1e-9);
  }

  TEST_CASE("exported game satisfies the structural invariants") {
    GridGuiTask t;
    t.width = 2;
    t.height = 2;
    t.horizon = 8;
    t.elements = {{0, CellType::Button, 1, 0}, {1, CellType::Field, 0, 1}};
    t.goal = {0, 1};
    t.validate();
    MarkovGame game = export_markov_game(t, RewardWeights{}, 0.9);
    // validate() ran inside; spot-check reward bounds and size cap.
    CHECK(game.reward.minCoeff() >= 0.0);
    CHECK(game.reward.maxCoeff() <= 1.0);
    CHECK(static_cast<long>(game.n_states) * game.n_joint_actions() <= 100000);
  }
}

TEST_SUITE("task_files") {
  TEST_CASE("round-trips through JSON") {
    GridGuiTask t = button_field_task();
    GridGuiTask back = parse_task(task_to_json(t));
    CHECK(back.width == t.width);
    CHECK(back.goal == t.goal);
    CHECK(back.gold_trace == plan_gold_trace(t));
  }

  TEST_CASE("a tampered gold trace fails the load") {
    GridGuiTask t = button_field_task();
    std::string text = task_to_json(t);
    auto pos = text.find("\"move_east\"");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 11, "\"move_west\"");
    CHECK_THROWS_AS((void)parse_task(text), std::invalid_argument);
  }

  TEST_CASE("unknown keys are rejected") {
    GridGuiTask t = button_field_task();
    std::string text = task_to_json(t);
    text.insert(1, "\"mystery\": 3,");
    CHECK_THROWS_AS((void)parse_task(text), std::invalid_argument);
  }

  TEST_CASE("goal element missing from the grid fails validation") {
    GridGuiTask t = button_field_task();
    t.goal = {0, 5};
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  }
}
