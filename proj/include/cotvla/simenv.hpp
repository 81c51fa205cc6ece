#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cotvla/data_model.hpp"

// Deterministic 2-D tabletop world: task families, scripted expert,
// rendering to ImageGrid, and closed-loop rollouts.
namespace cotvla::sim {

enum class TaskFamily { MoveNear, PutOn, OpenDrawer, CloseDrawer, Pick };

std::string_view family_name(TaskFamily family);
/// Throws Error("sim") for unknown names.
TaskFamily parse_family(std::string_view name);
/// Comma-separated list, e.g. "move_near,pick".
std::vector<TaskFamily> parse_families(std::string_view csv);

// Color indices used by the renderer.
namespace color {
inline constexpr std::uint8_t kTable = 0;
inline constexpr std::uint8_t kGripperOpen = 1;
inline constexpr std::uint8_t kGripperClosed = 2;
inline constexpr std::uint8_t kDrawer = 3;
inline constexpr std::uint8_t kCan = 4;
inline constexpr std::uint8_t kOrange = 5;
inline constexpr std::uint8_t kSponge = 6;
inline constexpr std::uint8_t kPlate = 7;
inline constexpr int kCount = 8;
}  // namespace color

struct Cell {
  int x = 0;
  int y = 0;
  auto operator<=>(const Cell&) const = default;
};

int manhattan(Cell a, Cell b);
int chebyshev(Cell a, Cell b);

struct SceneObject {
  std::string name;
  std::uint8_t color = 0;
  Cell cell;
  bool held = false;
  // Receptacles (the plate) can share their cell with one object resting on them.
  bool receptacle = false;

  bool operator==(const SceneObject&) const = default;
};

struct Gripper {
  Cell cell;
  bool open = true;
  bool operator==(const Gripper&) const = default;
};

/// Drawer occupying columns [x0, x0+2] from row 0 downwards. Its front row is
/// 4 * open_fraction and the handle sits one row below the front, centered.
struct Drawer {
  bool present = false;
  int x0 = 0;
  double open_fraction = 0.0;
  bool grasped = false;

  int front_row() const;
  Cell handle() const;
  bool covers(Cell c) const;
  bool operator==(const Drawer&) const = default;
};

inline constexpr double kDrawerIncrement = 0.25;
inline constexpr int kNearRadius = 2;
inline constexpr int kDefaultMaxSteps = 40;

struct WorldState {
  int size = 16;
  std::vector<SceneObject> objects;
  Gripper gripper;
  Drawer drawer;
  std::uint64_t seed = 0;

  const SceneObject* find(std::string_view name) const;
  SceneObject* find(std::string_view name);
  const SceneObject* held_object() const;
  /// Stable 64-bit digest of the full state.
  std::uint64_t digest() const;

  bool operator==(const WorldState&) const = default;
};

struct TaskSpec {
  TaskFamily family = TaskFamily::MoveNear;
  std::string source;  // object name; empty for drawer tasks
  std::string target;  // move_near / put_on only
  int near_radius = kNearRadius;

  bool operator==(const TaskSpec&) const = default;
};

/// Language instruction for a task, e.g. "move the can near the orange".
std::string instruction_for(const TaskSpec& task);
/// Inverse of instruction_for. Throws Error("sim") for unrecognized text.
TaskSpec parse_instruction(std::string_view instruction);

/// Throws Error("sim") when the task names objects absent from the world.
void check_task(const WorldState& world, const TaskSpec& task);
bool is_success(const WorldState& world, const TaskSpec& task);

/// Deterministic placement from (family, seed); the expert is guaranteed to
/// solve the result within `max_steps`.
std::pair<WorldState, TaskSpec> reset(TaskFamily family, std::uint64_t seed, int size = 16,
                                      int max_steps = kDefaultMaxSteps);

/// Applies one action. Translation x/y is quantized to unit cell moves at
/// |a| >= 0.5; gripper > 0.5 opens and < -0.5 closes (grasping what is under
/// the gripper). Moves into walls or blocked cells leave the gripper in place.
WorldState step(const WorldState& state, const ContinuousAction& action);

int quantize_axis(double v);

/// The expert's next high-level primitive, e.g. "move gripper to the can".
struct ExpertDecision {
  ContinuousAction action;
  std::vector<std::string> remaining_plan;  // first element is the current primitive
};

ExpertDecision expert_decision(const WorldState& state, const TaskSpec& task);
/// Greedy shortest-path policy with grasp/release phases; hold once solved.
ContinuousAction scripted_expert(const WorldState& state, const TaskSpec& task);

/// Renders every view; view 0 is top-down, view 1 is mirrored left-right.
std::vector<ImageGrid> render(const WorldState& state, int views = 1);
Observation observe(const WorldState& state, const TaskSpec& task, int views = 1);

/// Reconstructs the world from a rendered top-down view plus the instruction.
/// Objects hidden under the gripper are recovered from the instruction.
std::pair<WorldState, TaskSpec> perceive(const ImageGrid& view, std::string_view instruction);

/// Four-section rationale templated from the true state and the expert's
/// remaining plan.
ReasoningTrace ground_truth_trace(const WorldState& state, const TaskSpec& task);

struct DemoOptions {
  int size = 16;
  int views = 1;
  int max_steps = kDefaultMaxSteps;
};

/// Expert rollouts converted to episodes ("e<i>"); failed rollouts are
/// dropped and trailing near-zero hold actions are trimmed.
std::vector<Episode> generate_demonstrations(int n, std::span<const TaskFamily> families,
                                             std::uint64_t seed, const DemoOptions& options = {});

/// Removes trailing steps whose action has max-norm below `epsilon`.
void trim_trailing_holds(Episode& episode, double epsilon = 1e-3);

using Policy = std::function<ContinuousAction(const Observation&)>;

struct RolloutResult {
  bool success = false;
  int steps_taken = 0;
  bool grasped = false;
  bool policy_error = false;
  std::vector<std::pair<std::uint64_t, ContinuousAction>> trajectory;
};

struct RolloutSummary {
  TaskFamily family = TaskFamily::MoveNear;
  int n = 0;
  double success_rate = 0.0;
  double grasp_rate = 0.0;
  int policy_errors = 0;
  std::uint64_t seed = 0;
  std::vector<RolloutResult> episodes;

  nlohmann::json to_json() const;
};

RolloutResult rollout_episode(const Policy& policy, TaskFamily family, std::uint64_t episode_seed,
                              int max_steps = kDefaultMaxSteps, int size = 16, int views = 1);
/// Episode i uses seed episode_seed(seed, i).
RolloutSummary rollout(const Policy& policy, TaskFamily family, int n_episodes, std::uint64_t seed,
                       int max_steps = kDefaultMaxSteps, int size = 16, int views = 1);

std::uint64_t episode_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace cotvla::sim
