#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "marlab/game.hpp"
#include "marlab/grpo.hpp"

namespace marlab::gridgui {

enum class CellType { Blank = 0, Button = 1, Field = 2 };

struct Element {
  int id;
  CellType type;
  int x;
  int y;
};

/// Instruction verbs. MOVE_TO accepts a direction or an element argument,
/// CLICK and TYPE require an element, DONE takes no argument; every other
/// combination exists in the vocabulary but is schema-invalid, which is what
/// the format reward scores.
enum class Verb { MoveTo = 0, Click = 1, Type = 2, Done = 3 };
inline constexpr int kNumVerbs = 4;

enum class Dir { North = 0, East = 1, South = 2, West = 3 };

/// arg encoding: -1 none, 0..3 a direction, 4+k element id k.
struct InstructionToken {
  Verb verb = Verb::Done;
  int arg = -1;

  static InstructionToken with_none(Verb v) { return {v, -1}; }
  static InstructionToken with_dir(Verb v, Dir d) {
    return {v, static_cast<int>(d)};
  }
  static InstructionToken with_element(Verb v, int element_id) {
    return {v, 4 + element_id};
  }

  bool has_arg() const { return arg >= 0; }
  bool arg_is_dir() const { return arg >= 0 && arg < 4; }
  bool arg_is_element() const { return arg >= 4; }
  Dir dir() const { return static_cast<Dir>(arg); }
  int element_id() const { return arg - 4; }

  bool operator==(const InstructionToken&) const = default;
};

/// Tokens per vocabulary with E elements: 4 verbs x (none + 4 dirs + E).
int token_count(int n_elements);
int token_index(const InstructionToken& token, int n_elements);
InstructionToken token_from_index(int index, int n_elements);
bool schema_valid(const InstructionToken& token);

enum class ActionKind {
  MoveNorth = 0,
  MoveEast = 1,
  MoveSouth = 2,
  MoveWest = 3,
  Click = 4,
  TypeChar = 5,
  Noop = 6,
  Finish = 7,
};
inline constexpr int kNumActions = 8;

bool is_move(ActionKind kind);
/// Same action class iff both are moves, or both the same non-move kind.
bool same_kind(ActionKind a, ActionKind b);

struct GoldStep {
  InstructionToken instruction;
  ActionKind action;

  bool operator==(const GoldStep&) const = default;
};

struct GridGuiTask {
  int width = 4;
  int height = 4;
  std::vector<Element> elements;  // ids 0..E-1, distinct cells
  std::vector<int> goal;          // element ids interacted with in order
  int horizon = 12;
  int start_x = 0;
  int start_y = 0;
  std::vector<GoldStep> gold_trace;  // planner output from the start state

  int n_elements() const { return static_cast<int>(elements.size()); }
  const Element& element(int id) const;
  void validate() const;
};

/// The scripted planner: gold instruction/action for the current progress
/// and cursor. Movement picks the first Manhattan-distance-reducing
/// direction in N, E, S, W order (a breadth-first shortest-path step on the
/// open grid); on the target it clicks buttons and types into fields; once
/// the goal is complete it signals DONE / finish.
GoldStep scripted_gold(const GridGuiTask& task, int progress, int cursor_x,
                       int cursor_y);

/// Rolls the planner forward from the start state until the finish action.
std::vector<GoldStep> plan_gold_trace(const GridGuiTask& task);

struct CellView {
  bool in_bounds = false;
  CellType type = CellType::Blank;
  int element_id = -1;
};

struct NavigatorObservation {
  std::vector<int> goal;
  int cursor_x = 0;
  int cursor_y = 0;
  std::vector<Element> element_map;
  std::vector<ActionKind> action_history;  // full history, no past frames
};

/// The Interactor never sees the goal; it gets the instruction, a 3x3
/// neighborhood, and the cursor position.
struct InteractorObservation {
  InstructionToken instruction;
  std::array<CellView, 9> local_view;  // row-major, centered on the cursor
  int cursor_x = 0;
  int cursor_y = 0;
};

std::string observation_to_json(const NavigatorObservation& obs);
std::string observation_to_json(const InteractorObservation& obs);

struct StepRewards {
  double r_form = 0.0;
  double r_act = 0.0;
  double r_info = 0.0;

  double combined(const RewardWeights& weights) const;
};

/// Scores an emitted (instruction, action) pair against the gold pair for
/// the current state. R_form checks instruction schema validity, R_act the
/// action kind, R_info the parameters: cell hit for click/type, a
/// Manhattan-distance-reducing move for movement.
StepRewards reward_components(const GridGuiTask& task, int progress,
                              int cursor_x, int cursor_y, const GoldStep& gold,
                              const InstructionToken& emitted_instruction,
                              ActionKind emitted_action);

class GridGuiEnv {
 public:
  explicit GridGuiEnv(GridGuiTask task);

  /// Cursor to the start cell, empty history; deterministic given the seed.
  NavigatorObservation reset(std::uint64_t seed);

  NavigatorObservation navigator_observation() const;
  InteractorObservation interactor_observation(
      const InstructionToken& instruction) const;

  /// Applies the Interactor's action, scores both emissions against the
  /// scripted gold for the pre-step state, advances progress on a correct
  /// interaction, and raises done on finish or at the horizon. Acting after
  /// done is a contract error.
  StepRewards step(const InstructionToken& navigator_instruction,
                   ActionKind interactor_action);

  GoldStep gold_step() const;
  bool done() const { return done_; }
  bool goal_complete() const;
  int progress() const { return progress_; }
  int cursor_x() const { return cursor_x_; }
  int cursor_y() const { return cursor_y_; }
  int steps_taken() const { return steps_; }
  const GridGuiTask& task() const { return task_; }

  /// Tabular observation indices (the explicit observation maps).
  int navigator_state() const;
  int interactor_state(const InstructionToken& instruction) const;

 private:
  GridGuiTask task_;
  int cursor_x_ = 0;
  int cursor_y_ = 0;
  int progress_ = 0;
  int steps_ = 0;
  bool done_ = false;
  std::vector<ActionKind> history_;
};

/// Navigator observation map: 1 completed state plus (sign dx, sign dy) x
/// current-target (id, type) buckets. Everything in it is derivable from
/// the goal, element map, cursor, and action history.
int navigator_state_count(int n_elements);
int encode_navigator(const GridGuiTask& task, int progress, int cursor_x,
                     int cursor_y);

/// Interactor observation map: token id x whether the cursor's own cell
/// carries the token's element argument (yes / no / not applicable). Both
/// factors are available from the instruction and the 3x3 view.
int interactor_state_count(int n_elements);
int encode_interactor(const GridGuiTask& task,
                      const InstructionToken& instruction, int cursor_x,
                      int cursor_y);

/// Near-deterministic tabular policies implementing the scripted planner on
/// the encoded observation spaces; used for warm-up supervision and as the
/// frozen instruction generator.
TabularPolicy scripted_navigator_policy(int n_elements, double logit = 12.0);
TabularPolicy scripted_interactor_policy(int n_elements, double logit = 12.0);

/// Seeded 4x4-style fixture tasks: two elements (one button, one field),
/// a two-target goal, gold trace guaranteed to fit the horizon.
std::vector<GridGuiTask> make_fixture_suite(int n_tasks, int width, int height,
                                            int horizon, std::uint64_t seed);

/// Exports the environment as a finite cooperative Markov game over
/// (cursor, progress, pending instruction) states. The Navigator's token
/// becomes the pending instruction the Interactor answers one step later;
/// rewards score the action against the correct response to the pending
/// instruction. Intended for grids up to 3x3.
MarkovGame export_markov_game(const GridGuiTask& task,
                              const RewardWeights& weights, double discount);

/// Scripted joint policy for the exported game (navigator emits the gold
/// instruction for the grid state, interactor answers the pending one).
JointPolicy scripted_export_policy(const GridGuiTask& task,
                                   double logit = 10.0);

// --- task files ---------------------------------------------------------

/// Loads a task document (grid cells, goal sequence, horizon, optional gold
/// trace). The gold trace is regenerated by the planner; a provided trace
/// that disagrees fails the load.
GridGuiTask load_task(const std::string& path);
GridGuiTask parse_task(const std::string& json_text);
std::string task_to_json(const GridGuiTask& task, bool include_trace = true);
void save_task(const GridGuiTask& task, const std::string& path);

}  // namespace marlab::gridgui
