#include "marlab/gridgui.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace marlab::gridgui {

namespace {

using nlohmann::json;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

constexpr int kDx[4] = {0, 1, 0, -1};  // N, E, S, W
constexpr int kDy[4] = {-1, 0, 1, 0};

int manhattan(int x0, int y0, int x1, int y1) {
  return std::abs(x0 - x1) + std::abs(y0 - y1);
}

}  // namespace

int token_count(int n_elements) { return kNumVerbs * (5 + n_elements); }

int token_index(const InstructionToken& token, int n_elements) {
  const int args = 5 + n_elements;
  const int slot = token.arg + 1;  // none -> 0, dirs -> 1..4, elements -> 5..
  require(slot >= 0 && slot < args, "token argument out of range");
  return static_cast<int>(token.verb) * args + slot;
}

InstructionToken token_from_index(int index, int n_elements) {
  const int args = 5 + n_elements;
  require(index >= 0 && index < token_count(n_elements),
          "token index out of range");
  InstructionToken t;
  t.verb = static_cast<Verb>(index / args);
  t.arg = index % args - 1;
  return t;
}

bool schema_valid(const InstructionToken& token) {
  switch (token.verb) {
    case Verb::MoveTo:
      return token.has_arg();  // direction or element
    case Verb::Click:
    case Verb::Type:
      return token.arg_is_element();
    case Verb::Done:
      return !token.has_arg();
  }
  return false;
}

bool is_move(ActionKind kind) {
  return kind == ActionKind::MoveNorth || kind == ActionKind::MoveEast ||
         kind == ActionKind::MoveSouth || kind == ActionKind::MoveWest;
}

bool same_kind(ActionKind a, ActionKind b) {
  if (is_move(a) && is_move(b)) return true;
  return a == b;
}

const Element& GridGuiTask::element(int id) const {
  for (const Element& e : elements)
    if (e.id == id) return e;
  throw std::invalid_argument("unknown element id " + std::to_string(id));
}

void GridGuiTask::validate() const {
  require(width >= 1 && height >= 1, "grid must be at least 1x1");
  require(horizon >= 1, "horizon must be at least 1");
  require(start_x >= 0 && start_x < width && start_y >= 0 && start_y < height,
          "start cell out of bounds");
  std::vector<bool> seen(elements.size(), false);
  for (const Element& e : elements) {
    require(e.id >= 0 && e.id < static_cast<int>(elements.size()),
            "element ids must be 0..E-1");
    require(!seen[e.id], "duplicate element id " + std::to_string(e.id));
    seen[e.id] = true;
    require(e.x >= 0 && e.x < width && e.y >= 0 && e.y < height,
            "element " + std::to_string(e.id) + " out of bounds");
    require(e.type != CellType::Blank, "elements must be buttons or fields");
    for (const Element& other : elements)
      require(other.id == e.id || other.x != e.x || other.y != e.y,
              "elements must occupy distinct cells");
  }
  for (int id : goal) (void)element(id);  // throws on unknown ids
  const std::vector<GoldStep> trace = plan_gold_trace(*this);
  require(static_cast<int>(trace.size()) <= horizon,
          "gold trace does not complete within the horizon");
}

GoldStep scripted_gold(const GridGuiTask& task, int progress, int cursor_x,
                       int cursor_y) {
  if (progress >= static_cast<int>(task.goal.size()))
    return {InstructionToken::with_none(Verb::Done), ActionKind::Finish};
  const Element& target = task.element(task.goal[progress]);
  if (cursor_x == target.x && cursor_y == target.y) {
    if (target.type == CellType::Button)
      return {InstructionToken::with_element(Verb::Click, target.id),
              ActionKind::Click};
    return {InstructionToken::with_element(Verb::Type, target.id),
            ActionKind::TypeChar};
  }
  const int dx = target.x - cursor_x;
  const int dy = target.y - cursor_y;
  Dir dir;
  if (dy < 0)
    dir = Dir::North;
  else if (dx > 0)
    dir = Dir::East;
  else if (dy > 0)
    dir = Dir::South;
  else
    dir = Dir::West;
  return {InstructionToken::with_dir(Verb::MoveTo, dir),
          static_cast<ActionKind>(static_cast<int>(dir))};
}

std::vector<GoldStep> plan_gold_trace(const GridGuiTask& task) {
  std::vector<GoldStep> trace;
  int cx = task.start_x, cy = task.start_y, progress = 0;
  const int cap = task.width * task.height * 4 *
                      (static_cast<int>(task.goal.size()) + 1) +
                  2;
  while (static_cast<int>(trace.size()) < cap) {
    const GoldStep step = scripted_gold(task, progress, cx, cy);
    trace.push_back(step);
    if (step.action == ActionKind::Finish) break;
    if (is_move(step.action)) {
      cx += kDx[static_cast<int>(step.action)];
      cy += kDy[static_cast<int>(step.action)];
    } else {
      ++progress;  // click or type on the target cell
    }
  }
  return trace;
}

double StepRewards::combined(const RewardWeights& weights) const {
  return composite_reward(r_form, r_act, r_info, weights);
}

StepRewards reward_components(const GridGuiTask& task, int progress,
                              int cursor_x, int cursor_y, const GoldStep& gold,
                              const InstructionToken& emitted_instruction,
                              ActionKind emitted_action) {
  StepRewards r;
  r.r_form = schema_valid(emitted_instruction) ? 1.0 : 0.0;
  r.r_act = same_kind(emitted_action, gold.action) ? 1.0 : 0.0;

  if (is_move(gold.action)) {
    if (is_move(emitted_action) &&
        progress < static_cast<int>(task.goal.size())) {
      const Element& target = task.element(task.goal[progress]);
      const int nx = cursor_x + kDx[static_cast<int>(emitted_action)];
      const int ny = cursor_y + kDy[static_cast<int>(emitted_action)];
      const bool in_bounds =
          nx >= 0 && nx < task.width && ny >= 0 && ny < task.height;
      if (in_bounds && manhattan(nx, ny, target.x, target.y) <
                           manhattan(cursor_x, cursor_y, target.x, target.y))
        r.r_info = 1.0;
    }
  } else if (gold.action == ActionKind::Click ||
             gold.action == ActionKind::TypeChar) {
    const Element& target = task.element(task.goal[progress]);
    const bool on_cell = cursor_x == target.x && cursor_y == target.y;
    const bool cell_action = emitted_action == ActionKind::Click ||
                             emitted_action == ActionKind::TypeChar;
    if (on_cell && cell_action) r.r_info = 1.0;
  } else if (gold.action == ActionKind::Finish) {
    if (emitted_action == ActionKind::Finish) r.r_info = 1.0;
  } else if (gold.action == ActionKind::Noop) {
    if (emitted_action == ActionKind::Noop) r.r_info = 1.0;
  }
  return r;
}

GridGuiEnv::GridGuiEnv(GridGuiTask task) : task_(std::move(task)) {
  task_.validate();
  cursor_x_ = task_.start_x;
  cursor_y_ = task_.start_y;
}

NavigatorObservation GridGuiEnv::reset(std::uint64_t /*seed*/) {
  cursor_x_ = task_.start_x;
  cursor_y_ = task_.start_y;
  progress_ = 0;
  steps_ = 0;
  done_ = false;
  history_.clear();
  return navigator_observation();
}

NavigatorObservation GridGuiEnv::navigator_observation() const {
  NavigatorObservation obs;
  obs.goal = task_.goal;
  obs.cursor_x = cursor_x_;
  obs.cursor_y = cursor_y_;
  obs.element_map = task_.elements;
  obs.action_history = history_;
  return obs;
}

InteractorObservation GridGuiEnv::interactor_observation(
    const InstructionToken& instruction) const {
  InteractorObservation obs;
  obs.instruction = instruction;
  obs.cursor_x = cursor_x_;
  obs.cursor_y = cursor_y_;
  int idx = 0;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx, ++idx) {
      const int x = cursor_x_ + dx;
      const int y = cursor_y_ + dy;
      CellView view;
      view.in_bounds =
          x >= 0 && x < task_.width && y >= 0 && y < task_.height;
      if (view.in_bounds) {
        for (const Element& e : task_.elements) {
          if (e.x == x && e.y == y) {
            view.type = e.type;
            view.element_id = e.id;
          }
        }
      }
      obs.local_view[idx] = view;
    }
  }
  return obs;
}

GoldStep GridGuiEnv::gold_step() const {
  return scripted_gold(task_, progress_, cursor_x_, cursor_y_);
}

bool GridGuiEnv::goal_complete() const {
  return progress_ >= static_cast<int>(task_.goal.size());
}

StepRewards GridGuiEnv::step(const InstructionToken& navigator_instruction,
                             ActionKind interactor_action) {
  if (done_) throw std::logic_error("step called on a finished episode");

  const GoldStep gold = gold_step();
  const StepRewards rewards =
      reward_components(task_, progress_, cursor_x_, cursor_y_, gold,
                        navigator_instruction, interactor_action);

  if (is_move(interactor_action)) {
    const int nx = cursor_x_ + kDx[static_cast<int>(interactor_action)];
    const int ny = cursor_y_ + kDy[static_cast<int>(interactor_action)];
    if (nx >= 0 && nx < task_.width && ny >= 0 && ny < task_.height) {
      cursor_x_ = nx;
      cursor_y_ = ny;
    }
  } else if (interactor_action == ActionKind::Click ||
             interactor_action == ActionKind::TypeChar) {
    if (!goal_complete()) {
      const Element& target = task_.element(task_.goal[progress_]);
      const bool on_cell = cursor_x_ == target.x && cursor_y_ == target.y;
      const bool type_match =
          (interactor_action == ActionKind::Click &&
           target.type == CellType::Button) ||
          (interactor_action == ActionKind::TypeChar &&
           target.type == CellType::Field);
      if (on_cell && type_match) ++progress_;
    }
  } else if (interactor_action == ActionKind::Finish) {
    done_ = true;
  }

  history_.push_back(interactor_action);
  ++steps_;
  if (steps_ >= task_.horizon) done_ = true;
  return rewards;
}

int GridGuiEnv::navigator_state() const {
  return encode_navigator(task_, progress_, cursor_x_, cursor_y_);
}

int GridGuiEnv::interactor_state(const InstructionToken& instruction) const {
  return encode_interactor(task_, instruction, cursor_x_, cursor_y_);
}

int navigator_state_count(int n_elements) { return 1 + 18 * n_elements; }

int encode_navigator(const GridGuiTask& task, int progress, int cursor_x,
                     int cursor_y) {
  if (progress >= static_cast<int>(task.goal.size())) return 0;
  const Element& target = task.element(task.goal[progress]);
  const int sdx = (target.x > cursor_x) - (target.x < cursor_x);
  const int sdy = (target.y > cursor_y) - (target.y < cursor_y);
  const int dir_bucket = (sdx + 1) * 3 + (sdy + 1);
  const int target_bucket =
      target.id * 2 + (target.type == CellType::Field ? 1 : 0);
  return 1 + dir_bucket + 9 * target_bucket;
}

int interactor_state_count(int n_elements) {
  return 3 * token_count(n_elements);
}

int encode_interactor(const GridGuiTask& task,
                      const InstructionToken& instruction, int cursor_x,
                      int cursor_y) {
  int on_arg = 2;  // not applicable
  if (instruction.arg_is_element()) {
    on_arg = 0;
    for (const Element& e : task.elements)
      if (e.id == instruction.element_id() && e.x == cursor_x &&
          e.y == cursor_y)
        on_arg = 1;
  }
  return token_index(instruction, task.n_elements()) * 3 + on_arg;
}

TabularPolicy scripted_navigator_policy(int n_elements, double logit) {
  TabularPolicy p;
  p.agent_id = 0;
  p.logits =
      Matrix::Zero(navigator_state_count(n_elements), token_count(n_elements));
  // State 0: goal complete -> DONE.
  p.logits(0, token_index(InstructionToken::with_none(Verb::Done),
                          n_elements)) = logit;
  for (int target = 0; target < 2 * n_elements; ++target) {
    const int id = target / 2;
    const bool is_field = target % 2 == 1;
    for (int dir_bucket = 0; dir_bucket < 9; ++dir_bucket) {
      const int sdx = dir_bucket / 3 - 1;
      const int sdy = dir_bucket % 3 - 1;
      const int state = 1 + dir_bucket + 9 * target;
      InstructionToken token;
      if (sdx == 0 && sdy == 0) {
        token = InstructionToken::with_element(
            is_field ? Verb::Type : Verb::Click, id);
      } else {
        Dir dir;
        if (sdy < 0)
          dir = Dir::North;
        else if (sdx > 0)
          dir = Dir::East;
        else if (sdy > 0)
          dir = Dir::South;
        else
          dir = Dir::West;
        token = InstructionToken::with_dir(Verb::MoveTo, dir);
      }
      p.logits(state, token_index(token, n_elements)) = logit;
    }
  }
  return p;
}

TabularPolicy scripted_interactor_policy(int n_elements, double logit) {
  TabularPolicy p;
  p.agent_id = 1;
  p.logits = Matrix::Zero(interactor_state_count(n_elements), kNumActions);
  for (int t = 0; t < token_count(n_elements); ++t) {
    const InstructionToken token = token_from_index(t, n_elements);
    for (int on_arg = 0; on_arg < 3; ++on_arg) {
      const int state = t * 3 + on_arg;
      ActionKind act = ActionKind::Noop;
      if (token.verb == Verb::MoveTo && token.arg_is_dir())
        act = static_cast<ActionKind>(static_cast<int>(token.dir()));
      else if (token.verb == Verb::Click && token.arg_is_element())
        act = ActionKind::Click;
      else if (token.verb == Verb::Type && token.arg_is_element())
        act = ActionKind::TypeChar;
      else if (token.verb == Verb::Done && !token.has_arg())
        act = ActionKind::Finish;
      p.logits(state, static_cast<int>(act)) = logit;
    }
  }
  return p;
}

std::vector<GridGuiTask> make_fixture_suite(int n_tasks, int width, int height,
                                            int horizon, std::uint64_t seed) {
  std::vector<GridGuiTask> tasks;
  SplitMix64 rng(seed);
  while (static_cast<int>(tasks.size()) < n_tasks) {
    GridGuiTask t;
    t.width = width;
    t.height = height;
    t.horizon = horizon;
    t.start_x = 0;
    t.start_y = 0;
    const int cells = width * height;
    const int c0 = 1 + static_cast<int>(rng.uniform() * (cells - 1));
    int c1 = 1 + static_cast<int>(rng.uniform() * (cells - 1));
    if (c1 == c0) c1 = 1 + (c1 % (cells - 1));
    const bool button_first = rng.uniform() < 0.5;
    t.elements = {
        {0, button_first ? CellType::Button : CellType::Field, c0 % width,
         c0 / width},
        {1, button_first ? CellType::Field : CellType::Button, c1 % width,
         c1 / width}};
    t.goal = rng.uniform() < 0.5 ? std::vector<int>{0, 1}
                                 : std::vector<int>{1, 0};
    const std::vector<GoldStep> trace = plan_gold_trace(t);
    if (static_cast<int>(trace.size()) > horizon) continue;  // reroll layout
    t.gold_trace = trace;
    t.validate();
    tasks.push_back(std::move(t));
  }
  return tasks;
}

namespace {

// Exported-game state layout: ((cell * (G+1) + progress) * (V+1) + pend),
// plus one absorbing terminal state at the end. pend == V means "no
// instruction yet".
struct ExportLayout {
  int cells;
  int progress_levels;
  int vocab;

  int n_states() const { return cells * progress_levels * (vocab + 1) + 1; }
  int terminal() const { return n_states() - 1; }
  int index(int cell, int progress, int pend) const {
    return (cell * progress_levels + progress) * (vocab + 1) + pend;
  }
};

/// The correct response to a pending instruction at a grid position.
ActionKind export_response(const GridGuiTask& task, int pend_index,
                           int vocab, int cx, int cy) {
  if (pend_index == vocab) return ActionKind::Noop;  // nothing pending yet
  const InstructionToken token =
      token_from_index(pend_index, task.n_elements());
  if (!schema_valid(token)) return ActionKind::Noop;
  switch (token.verb) {
    case Verb::MoveTo: {
      if (token.arg_is_dir())
        return static_cast<ActionKind>(static_cast<int>(token.dir()));
      const Element& e = task.element(token.element_id());
      if (e.x == cx && e.y == cy) return ActionKind::Noop;
      const int dx = e.x - cx, dy = e.y - cy;
      if (dy < 0) return ActionKind::MoveNorth;
      if (dx > 0) return ActionKind::MoveEast;
      if (dy > 0) return ActionKind::MoveSouth;
      return ActionKind::MoveWest;
    }
    case Verb::Click:
      return ActionKind::Click;
    case Verb::Type:
      return ActionKind::TypeChar;
    case Verb::Done:
      return ActionKind::Finish;
  }
  return ActionKind::Noop;
}

/// Parameter score of an action against the response expected for pend.
double export_info_score(const GridGuiTask& task, int pend_index, int vocab,
                         int cx, int cy, ActionKind response,
                         ActionKind action) {
  if (is_move(response)) {
    const InstructionToken token =
        token_from_index(pend_index, task.n_elements());
    if (!is_move(action)) return 0.0;
    if (token.arg_is_dir())
      return action == response ? 1.0 : 0.0;
    const Element& e = task.element(token.element_id());
    const int nx = cx + kDx[static_cast<int>(action)];
    const int ny = cy + kDy[static_cast<int>(action)];
    if (nx < 0 || nx >= task.width || ny < 0 || ny >= task.height) return 0.0;
    return manhattan(nx, ny, e.x, e.y) < manhattan(cx, cy, e.x, e.y) ? 1.0
                                                                     : 0.0;
  }
  if (response == ActionKind::Click || response == ActionKind::TypeChar) {
    const InstructionToken token =
        token_from_index(pend_index, task.n_elements());
    const Element& e = task.element(token.element_id());
    const bool on_cell = e.x == cx && e.y == cy;
    const bool cell_action =
        action == ActionKind::Click || action == ActionKind::TypeChar;
    return on_cell && cell_action ? 1.0 : 0.0;
  }
  return action == response ? 1.0 : 0.0;
}

}  // namespace

MarkovGame export_markov_game(const GridGuiTask& task,
                              const RewardWeights& weights, double discount) {
  task.validate();
  const int vocab = token_count(task.n_elements());
  const ExportLayout layout{task.width * task.height,
                            static_cast<int>(task.goal.size()) + 1, vocab};

  MarkovGame g;
  g.n_agents = 2;
  g.n_states = layout.n_states();
  g.actions_per_agent = {vocab, kNumActions};
  g.discount = discount;
  const int na = g.n_joint_actions();
  g.transition.assign(g.n_states, std::vector<std::vector<Transition>>(na));
  g.reward = Matrix::Zero(g.n_states, na);
  g.initial_dist = Vector::Zero(g.n_states);
  g.initial_dist[layout.index(task.start_y * task.width + task.start_x, 0,
                              vocab)] = 1.0;

  const int goal_len = static_cast<int>(task.goal.size());
  for (int cell = 0; cell < layout.cells; ++cell) {
    const int cx = cell % task.width;
    const int cy = cell / task.width;
    for (int progress = 0; progress <= goal_len; ++progress) {
      for (int pend = 0; pend <= vocab; ++pend) {
        const int s = layout.index(cell, progress, pend);
        const ActionKind response =
            export_response(task, pend, vocab, cx, cy);
        for (int tok = 0; tok < vocab; ++tok) {
          const InstructionToken token =
              token_from_index(tok, task.n_elements());
          const double r_form = schema_valid(token) ? 1.0 : 0.0;
          for (int act_i = 0; act_i < kNumActions; ++act_i) {
            const ActionKind act = static_cast<ActionKind>(act_i);
            const int joint = tok * kNumActions + act_i;
            const double r_act = same_kind(act, response) ? 1.0 : 0.0;
            const double r_info =
                export_info_score(task, pend, vocab, cx, cy, response, act);
            g.reward(s, joint) =
                composite_reward(r_form, r_act, r_info, weights);

            // Dynamics mirror the native environment.
            int ncx = cx, ncy = cy, nprog = progress;
            bool finish = false;
            if (is_move(act)) {
              const int tx = cx + kDx[act_i];
              const int ty = cy + kDy[act_i];
              if (tx >= 0 && tx < task.width && ty >= 0 && ty < task.height) {
                ncx = tx;
                ncy = ty;
              }
            } else if (act == ActionKind::Click ||
                       act == ActionKind::TypeChar) {
              if (progress < goal_len) {
                const Element& target = task.element(task.goal[progress]);
                const bool on_cell = cx == target.x && cy == target.y;
                const bool type_match =
                    (act == ActionKind::Click &&
                     target.type == CellType::Button) ||
                    (act == ActionKind::TypeChar &&
                     target.type == CellType::Field);
                if (on_cell && type_match) ++nprog;
              }
            } else if (act == ActionKind::Finish) {
              finish = true;
            }
            const int next =
                finish ? layout.terminal()
                       : layout.index(ncy * task.width + ncx, nprog, tok);
            g.transition[s][joint] = {{next, 1.0}};
          }
        }
      }
    }
  }
  // Absorbing terminal: zero reward, self-loop.
  for (int a = 0; a < na; ++a)
    g.transition[layout.terminal()][a] = {{layout.terminal(), 1.0}};
  g.validate();
  return g;
}

JointPolicy scripted_export_policy(const GridGuiTask& task, double logit) {
  const int vocab = token_count(task.n_elements());
  const ExportLayout layout{task.width * task.height,
                            static_cast<int>(task.goal.size()) + 1, vocab};

  TabularPolicy navigator;
  navigator.agent_id = 0;
  navigator.logits = Matrix::Zero(layout.n_states(), vocab);
  TabularPolicy interactor;
  interactor.agent_id = 1;
  interactor.logits = Matrix::Zero(layout.n_states(), kNumActions);

  for (int cell = 0; cell < layout.cells; ++cell) {
    const int cx = cell % task.width;
    const int cy = cell / task.width;
    for (int progress = 0; progress <= static_cast<int>(task.goal.size());
         ++progress) {
      const GoldStep gold = scripted_gold(task, progress, cx, cy);
      const int gold_tok = token_index(gold.instruction, task.n_elements());
      for (int pend = 0; pend <= vocab; ++pend) {
        const int s = layout.index(cell, progress, pend);
        navigator.logits(s, gold_tok) = logit;
        const ActionKind response = export_response(task, pend, vocab, cx, cy);
        interactor.logits(s, static_cast<int>(response)) = logit;
      }
    }
  }
  // Terminal rows stay uniform; the terminal state is absorbing with zero
  // reward so the choice there is irrelevant.
  return JointPolicy{{navigator, interactor}};
}

namespace {

const char* kVerbNames[] = {"move_to", "click", "type", "done"};
const char* kDirNames[] = {"north", "east", "south", "west"};
const char* kActionNames[] = {"move_north", "move_east", "move_south",
                              "move_west", "click",     "type_char",
                              "noop",      "finish"};
const char* kCellNames[] = {"blank", "button", "field"};

json token_to_json(const InstructionToken& t) {
  json j;
  j["verb"] = kVerbNames[static_cast<int>(t.verb)];
  if (!t.has_arg())
    j["arg"] = nullptr;
  else if (t.arg_is_dir())
    j["arg"] = kDirNames[t.arg];
  else
    j["arg"] = t.element_id();
  return j;
}

InstructionToken token_from_json(const json& j) {
  InstructionToken t;
  const std::string verb = j.at("verb").get<std::string>();
  bool found = false;
  for (int v = 0; v < kNumVerbs; ++v)
    if (verb == kVerbNames[v]) {
      t.verb = static_cast<Verb>(v);
      found = true;
    }
  if (!found) throw std::invalid_argument("unknown verb: " + verb);
  const json& arg = j.at("arg");
  if (arg.is_null()) {
    t.arg = -1;
  } else if (arg.is_string()) {
    const std::string d = arg.get<std::string>();
    bool dir_found = false;
    for (int k = 0; k < 4; ++k)
      if (d == kDirNames[k]) {
        t.arg = k;
        dir_found = true;
      }
    if (!dir_found) throw std::invalid_argument("unknown direction: " + d);
  } else {
    t = InstructionToken::with_element(t.verb, arg.get<int>());
  }
  return t;
}

ActionKind action_from_name(const std::string& name) {
  for (int a = 0; a < kNumActions; ++a)
    if (name == kActionNames[a]) return static_cast<ActionKind>(a);
  throw std::invalid_argument("unknown action: " + name);
}

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

std::string observation_to_json(const NavigatorObservation& obs) {
  json j;
  j["goal"] = obs.goal;
  j["cursor"] = {obs.cursor_x, obs.cursor_y};
  json elements = json::array();
  for (const Element& e : obs.element_map)
    elements.push_back({{"id", e.id},
                        {"type", kCellNames[static_cast<int>(e.type)]},
                        {"x", e.x},
                        {"y", e.y}});
  j["elements"] = std::move(elements);
  json history = json::array();
  for (ActionKind a : obs.action_history)
    history.push_back(kActionNames[static_cast<int>(a)]);
  j["action_history"] = std::move(history);
  return j.dump();
}

std::string observation_to_json(const InteractorObservation& obs) {
  json j;
  j["instruction"] = token_to_json(obs.instruction);
  j["cursor"] = {obs.cursor_x, obs.cursor_y};
  json view = json::array();
  for (const CellView& cell : obs.local_view) {
    if (!cell.in_bounds) {
      view.push_back(nullptr);
    } else {
      view.push_back({{"type", kCellNames[static_cast<int>(cell.type)]},
                      {"element_id", cell.element_id}});
    }
  }
  j["local_view"] = std::move(view);
  return j.dump();
}

GridGuiTask parse_task(const std::string& json_text) {
  json doc = json::parse(json_text);
  reject_unknown_keys(doc,
                      {"width", "height", "horizon", "start", "elements",
                       "goal", "gold_trace"},
                      "task definition");
  GridGuiTask t;
  t.width = doc.at("width").get<int>();
  t.height = doc.at("height").get<int>();
  t.horizon = doc.at("horizon").get<int>();
  if (doc.contains("start")) {
    t.start_x = doc["start"][0].get<int>();
    t.start_y = doc["start"][1].get<int>();
  }
  for (const json& e : doc.at("elements")) {
    reject_unknown_keys(e, {"id", "type", "x", "y"}, "task element");
    Element elem;
    elem.id = e.at("id").get<int>();
    const std::string type = e.at("type").get<std::string>();
    if (type == "button")
      elem.type = CellType::Button;
    else if (type == "field")
      elem.type = CellType::Field;
    else
      throw std::invalid_argument("unknown element type: " + type);
    elem.x = e.at("x").get<int>();
    elem.y = e.at("y").get<int>();
    t.elements.push_back(elem);
  }
  t.goal = doc.at("goal").get<std::vector<int>>();
  t.validate();
  t.gold_trace = plan_gold_trace(t);
  if (doc.contains("gold_trace")) {
    const json& trace = doc["gold_trace"];
    bool agrees = trace.size() == t.gold_trace.size();
    for (size_t i = 0; agrees && i < t.gold_trace.size(); ++i) {
      const GoldStep provided{
          token_from_json(trace[i].at("instruction")),
          action_from_name(trace[i].at("action").get<std::string>())};
      agrees = provided == t.gold_trace[i];
    }
    if (!agrees)
      throw std::invalid_argument(
          "provided gold trace disagrees with the scripted planner");
  }
  return t;
}

std::string task_to_json(const GridGuiTask& task, bool include_trace) {
  json doc;
  doc["width"] = task.width;
  doc["height"] = task.height;
  doc["horizon"] = task.horizon;
  doc["start"] = {task.start_x, task.start_y};
  json elements = json::array();
  for (const Element& e : task.elements)
    elements.push_back({{"id", e.id},
                        {"type", kCellNames[static_cast<int>(e.type)]},
                        {"x", e.x},
                        {"y", e.y}});
  doc["elements"] = std::move(elements);
  doc["goal"] = task.goal;
  if (include_trace) {
    json trace = json::array();
    for (const GoldStep& step : plan_gold_trace(task))
      trace.push_back(
          {{"instruction", token_to_json(step.instruction)},
           {"action", kActionNames[static_cast<int>(step.action)]}});
    doc["gold_trace"] = std::move(trace);
  }
  return doc.dump(2);
}

GridGuiTask load_task(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open task file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_task(ss.str());
}

void save_task(const GridGuiTask& task, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write task file: " + path);
  out << task_to_json(task) << "\n";
}

}  // namespace marlab::gridgui
