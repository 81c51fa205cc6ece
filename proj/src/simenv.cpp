#include "cotvla/simenv.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <deque>
#include <limits>
#include <random>
#include <sstream>

#include "cotvla/error.hpp"

namespace cotvla::sim {

namespace {

constexpr std::array<TaskFamily, 5> kFamilies = {TaskFamily::MoveNear, TaskFamily::PutOn, TaskFamily::OpenDrawer,
                                                 TaskFamily::CloseDrawer, TaskFamily::Pick};

struct CatalogEntry {
  const char* name;
  std::uint8_t color;
  bool receptacle;
};

constexpr std::array<CatalogEntry, 4> kCatalog = {{{"can", color::kCan, false},
                                                   {"orange", color::kOrange, false},
                                                   {"sponge", color::kSponge, false},
                                                   {"plate", color::kPlate, true}}};
constexpr std::array<const char*, 3> kGraspable = {"can", "orange", "sponge"};

const CatalogEntry& catalog(std::string_view name) {
  for (const auto& e : kCatalog) {
    if (name == e.name) return e;
  }
  throw Error("sim", "unknown object '" + std::string(name) + "'");
}

const CatalogEntry* catalog_by_color(std::uint8_t c) {
  for (const auto& e : kCatalog) {
    if (e.color == c) return &e;
  }
  return nullptr;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo + 1);
  return lo + static_cast<int>(rng() % span);
}

SceneObject make_object(std::string_view name, Cell cell) {
  const CatalogEntry& e = catalog(name);
  return SceneObject{e.name, e.color, cell, false, e.receptacle};
}

void sort_objects(WorldState& w) {
  std::sort(w.objects.begin(), w.objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return a.color < b.color; });
}

bool is_drawer_task(TaskFamily f) { return f == TaskFamily::OpenDrawer || f == TaskFamily::CloseDrawer; }

std::string article(std::string_view noun) {
  const char c = noun.empty() ? 'x' : noun.front();
  const bool vowel = c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u';
  return std::string(vowel ? "an " : "a ") + std::string(noun);
}

std::string join_list(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += (i + 1 == items.size()) ? " and " : ", ";
    out += items[i];
  }
  return out;
}

// "left of and below", "under", ...
std::string relation(Cell a, Cell b) {
  std::vector<std::string> parts;
  if (a.x < b.x) parts.emplace_back("left of");
  if (a.x > b.x) parts.emplace_back("right of");
  if (a.y < b.y) parts.emplace_back("above");
  if (a.y > b.y) parts.emplace_back("below");
  if (parts.empty()) return "under";
  return parts.size() == 1 ? parts[0] : parts[0] + " and " + parts[1];
}

bool occupied_by_solid(const WorldState& w, Cell c, const SceneObject* ignore) {
  for (const SceneObject& o : w.objects) {
    if (&o == ignore || o.held || o.receptacle) continue;
    if (o.cell == c) return true;
  }
  return false;
}

constexpr int kUnreachable = std::numeric_limits<int>::max();

// Breadth-first distance field towards `goal`; blocked cells are impassable
// except the goal itself.
std::vector<int> distance_field(const WorldState& w, Cell goal, bool avoid_solids, const SceneObject* carried) {
  const int n = w.size;
  std::vector<int> dist(static_cast<std::size_t>(n * n), kUnreachable);
  auto idx = [n](Cell c) { return static_cast<std::size_t>(c.y * n + c.x); };
  std::deque<Cell> queue{goal};
  dist[idx(goal)] = 0;
  constexpr std::array<Cell, 4> kDirs = {{{1, 0}, {-1, 0}, {0, 1}, {0, -1}}};
  while (!queue.empty()) {
    const Cell c = queue.front();
    queue.pop_front();
    for (const Cell d : kDirs) {
      const Cell nb{c.x + d.x, c.y + d.y};
      if (nb.x < 0 || nb.y < 0 || nb.x >= n || nb.y >= n) continue;
      if (dist[idx(nb)] != kUnreachable) continue;
      if (avoid_solids && occupied_by_solid(w, nb, carried)) continue;
      dist[idx(nb)] = dist[idx(c)] + 1;
      queue.push_back(nb);
    }
  }
  return dist;
}

// One unit move along a shortest path; x moves are preferred so unobstructed
// paths align the column first.
std::optional<Cell> next_move(const WorldState& w, Cell from, Cell goal, bool avoid_solids,
                              const SceneObject* carried) {
  if (from == goal) return Cell{0, 0};
  const std::vector<int> dist = distance_field(w, goal, avoid_solids, carried);
  const int n = w.size;
  auto at = [&](Cell c) { return dist[static_cast<std::size_t>(c.y * n + c.x)]; };
  if (at(from) == kUnreachable) return std::nullopt;
  const int sx = goal.x > from.x ? 1 : -1;
  const int sy = goal.y > from.y ? 1 : -1;
  const std::array<Cell, 4> order = {{{sx, 0}, {0, sy}, {-sx, 0}, {0, -sy}}};
  for (const Cell d : order) {
    const Cell nb{from.x + d.x, from.y + d.y};
    if (nb.x < 0 || nb.y < 0 || nb.x >= n || nb.y >= n) continue;
    if (at(nb) == at(from) - 1) return d;
  }
  return std::nullopt;
}

ContinuousAction move_action(Cell d) {
  return ContinuousAction({static_cast<double>(d.x), static_cast<double>(d.y), 0, 0, 0, 0, 0});
}

ContinuousAction gripper_action(double g) { return ContinuousAction({0, 0, 0, 0, 0, 0, g}); }

// Closest free cell within the near radius of the target (excluding the
// target's own cell), measured by carrying distance from the gripper.
std::optional<Cell> near_goal(const WorldState& w, const SceneObject& carried, const SceneObject& target,
                              int radius) {
  const std::vector<int> from_gripper = distance_field(w, w.gripper.cell, true, &carried);
  std::optional<Cell> best;
  int best_d = kUnreachable;
  for (int y = 0; y < w.size; ++y) {
    for (int x = 0; x < w.size; ++x) {
      const Cell c{x, y};
      if (c == target.cell || manhattan(c, target.cell) > radius) continue;
      if (occupied_by_solid(w, c, &carried)) continue;
      const int d = from_gripper[static_cast<std::size_t>(y * w.size + x)];
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
  }
  return best;
}

std::string carry_phrase(const TaskSpec& task) {
  if (task.family == TaskFamily::PutOn) return "carry the " + task.source + " to the " + task.target;
  return "carry the " + task.source + " near the " + task.target;
}

}  // namespace

std::string_view family_name(TaskFamily family) {
  switch (family) {
    case TaskFamily::MoveNear: return "move_near";
    case TaskFamily::PutOn: return "put_on";
    case TaskFamily::OpenDrawer: return "open_drawer";
    case TaskFamily::CloseDrawer: return "close_drawer";
    case TaskFamily::Pick: return "pick";
  }
  return "unknown";
}

TaskFamily parse_family(std::string_view name) {
  for (TaskFamily f : kFamilies) {
    if (family_name(f) == name) return f;
  }
  throw Error("sim", "unknown task family '" + std::string(name) + "'");
}

std::vector<TaskFamily> parse_families(std::string_view csv) {
  std::vector<TaskFamily> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const std::size_t comma = csv.find(',', start);
    std::string_view item = csv.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty()) out.push_back(parse_family(item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (out.empty()) throw Error("sim", "empty task family list");
  return out;
}

int manhattan(Cell a, Cell b) { return std::abs(a.x - b.x) + std::abs(a.y - b.y); }
int chebyshev(Cell a, Cell b) { return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)); }

int Drawer::front_row() const { return static_cast<int>(std::lround(open_fraction * 4.0)); }
Cell Drawer::handle() const { return Cell{x0 + 1, front_row() + 1}; }
bool Drawer::covers(Cell c) const {
  if (!present) return false;
  if (c == handle()) return true;
  return c.x >= x0 && c.x <= x0 + 2 && c.y >= 0 && c.y <= front_row();
}

const SceneObject* WorldState::find(std::string_view name) const {
  for (const SceneObject& o : objects) {
    if (o.name == name) return &o;
  }
  return nullptr;
}

SceneObject* WorldState::find(std::string_view name) {
  for (SceneObject& o : objects) {
    if (o.name == name) return &o;
  }
  return nullptr;
}

const SceneObject* WorldState::held_object() const {
  for (const SceneObject& o : objects) {
    if (o.held) return &o;
  }
  return nullptr;
}

std::uint64_t WorldState::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  };
  mix(static_cast<std::uint64_t>(size));
  for (const SceneObject& o : objects) {
    for (char c : o.name) mix(static_cast<unsigned char>(c));
    mix(o.color);
    mix(static_cast<std::uint64_t>(o.cell.x));
    mix(static_cast<std::uint64_t>(o.cell.y));
    mix(o.held ? 1 : 0);
  }
  mix(static_cast<std::uint64_t>(gripper.cell.x));
  mix(static_cast<std::uint64_t>(gripper.cell.y));
  mix(gripper.open ? 1 : 0);
  mix(drawer.present ? 1 : 0);
  mix(static_cast<std::uint64_t>(drawer.x0));
  mix(static_cast<std::uint64_t>(drawer.front_row()));
  mix(drawer.grasped ? 1 : 0);
  return h;
}

std::string instruction_for(const TaskSpec& task) {
  switch (task.family) {
    case TaskFamily::MoveNear: return "move the " + task.source + " near the " + task.target;
    case TaskFamily::PutOn: return "put the " + task.source + " on the " + task.target;
    case TaskFamily::Pick: return "pick up the " + task.source;
    case TaskFamily::OpenDrawer: return "open the drawer";
    case TaskFamily::CloseDrawer: return "close the drawer";
  }
  return {};
}

TaskSpec parse_instruction(std::string_view instruction) {
  std::vector<std::string> w;
  {
    std::string lowered(instruction);
    for (char& c : lowered) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    std::istringstream is(lowered);
    std::string word;
    while (is >> word) w.push_back(word);
  }
  auto fail = [&]() -> TaskSpec {
    throw Error("sim", "unrecognized instruction '" + std::string(instruction) + "'");
  };
  TaskSpec t;
  if (w.size() == 6 && w[0] == "move" && w[1] == "the" && w[3] == "near" && w[4] == "the") {
    t.family = TaskFamily::MoveNear;
    t.source = w[2];
    t.target = w[5];
  } else if (w.size() == 6 && w[0] == "put" && w[1] == "the" && w[3] == "on" && w[4] == "the") {
    t.family = TaskFamily::PutOn;
    t.source = w[2];
    t.target = w[5];
  } else if (w.size() == 4 && w[0] == "pick" && w[1] == "up" && w[2] == "the") {
    t.family = TaskFamily::Pick;
    t.source = w[3];
  } else if (w.size() == 3 && w[1] == "the" && w[2] == "drawer" && (w[0] == "open" || w[0] == "close")) {
    t.family = w[0] == "open" ? TaskFamily::OpenDrawer : TaskFamily::CloseDrawer;
  } else {
    return fail();
  }
  return t;
}

void check_task(const WorldState& world, const TaskSpec& task) {
  if (is_drawer_task(task.family)) {
    if (!world.drawer.present) throw Error("sim", "drawer task in a world without a drawer");
    return;
  }
  if (world.find(task.source) == nullptr) throw Error("sim", "task object '" + task.source + "' is absent");
  if ((task.family == TaskFamily::MoveNear || task.family == TaskFamily::PutOn) &&
      world.find(task.target) == nullptr) {
    throw Error("sim", "task object '" + task.target + "' is absent");
  }
  if (task.family == TaskFamily::PutOn && !world.find(task.target)->receptacle) {
    throw Error("sim", "put_on target '" + task.target + "' is not a receptacle");
  }
}

bool is_success(const WorldState& world, const TaskSpec& task) {
  switch (task.family) {
    case TaskFamily::OpenDrawer: return world.drawer.open_fraction >= 1.0 - 1e-9;
    case TaskFamily::CloseDrawer: return world.drawer.open_fraction <= 1e-9;
    case TaskFamily::Pick: {
      const SceneObject* src = world.find(task.source);
      return src != nullptr && src->held;
    }
    case TaskFamily::MoveNear: {
      const SceneObject* src = world.find(task.source);
      const SceneObject* tgt = world.find(task.target);
      return src && tgt && !src->held && manhattan(src->cell, tgt->cell) <= task.near_radius;
    }
    case TaskFamily::PutOn: {
      const SceneObject* src = world.find(task.source);
      const SceneObject* tgt = world.find(task.target);
      return src && tgt && !src->held && src->cell == tgt->cell;
    }
  }
  return false;
}

int quantize_axis(double v) {
  if (v >= 0.5) return 1;
  if (v <= -0.5) return -1;
  return 0;
}

WorldState step(const WorldState& state, const ContinuousAction& action) {
  WorldState w = state;
  const double g = action.gripper();
  if (g > 0.5) {
    for (SceneObject& o : w.objects) o.held = false;
    w.drawer.grasped = false;
    w.gripper.open = true;
  } else if (g < -0.5) {
    w.gripper.open = false;
    if (w.held_object() == nullptr && !w.drawer.grasped) {
      bool grasped = false;
      for (SceneObject& o : w.objects) {
        if (!o.receptacle && o.cell == w.gripper.cell) {
          o.held = true;
          grasped = true;
          break;
        }
      }
      if (!grasped && w.drawer.present && w.gripper.cell == w.drawer.handle()) w.drawer.grasped = true;
    }
  }

  const int dx = quantize_axis(action.dx());
  const int dy = quantize_axis(action.dy());
  if (dx == 0 && dy == 0) return w;

  if (w.drawer.grasped) {
    if (dx != 0) return w;
    if (dy > 0 && w.drawer.open_fraction < 1.0 - 1e-9) {
      w.drawer.open_fraction += kDrawerIncrement;
      w.gripper.cell.y += 1;
    } else if (dy < 0 && w.drawer.open_fraction > 1e-9) {
      w.drawer.open_fraction -= kDrawerIncrement;
      w.gripper.cell.y -= 1;
    }
    return w;
  }

  const Cell dest{std::clamp(w.gripper.cell.x + dx, 0, w.size - 1), std::clamp(w.gripper.cell.y + dy, 0, w.size - 1)};
  SceneObject* held = nullptr;
  for (SceneObject& o : w.objects) {
    if (o.held) held = &o;
  }
  if (held != nullptr && occupied_by_solid(w, dest, held)) return w;
  w.gripper.cell = dest;
  if (held != nullptr) held->cell = dest;
  return w;
}

ExpertDecision expert_decision(const WorldState& state, const TaskSpec& task) {
  check_task(state, task);
  if (is_success(state, task)) return {ContinuousAction::hold(), {"Task complete"}};

  const SceneObject* held = state.held_object();
  const Cell at = state.gripper.cell;
  auto unsolvable = [&]() -> ExpertDecision { throw Error("sim", "unsolvable state for the scripted expert"); };

  if (is_drawer_task(task.family)) {
    const std::string pull = task.family == TaskFamily::OpenDrawer ? "pull handle" : "push handle";
    if (held != nullptr) {
      return {gripper_action(1.0), {"release the " + held->name, "approach handle", "grasp handle", pull}};
    }
    if (state.drawer.grasped) {
      return {move_action(Cell{0, task.family == TaskFamily::OpenDrawer ? 1 : -1}), {pull}};
    }
    const Cell handle = state.drawer.handle();
    if (at == handle) return {gripper_action(-1.0), {"grasp handle", pull}};
    const auto d = next_move(state, at, handle, false, nullptr);
    if (!d) return unsolvable();
    return {move_action(*d), {"approach handle", "grasp handle", pull}};
  }

  const SceneObject* src = state.find(task.source);
  const std::string grasp = "grasp the " + task.source;
  const std::string release = "release the " + task.source;
  std::vector<std::string> tail;
  if (task.family != TaskFamily::Pick) tail = {carry_phrase(task), release};

  if (state.drawer.grasped) {
    std::vector<std::string> plan = {"release handle", "move gripper to the " + task.source, grasp};
    plan.insert(plan.end(), tail.begin(), tail.end());
    return {gripper_action(1.0), plan};
  }
  if (held != nullptr && held != src) {
    std::vector<std::string> plan = {"release the " + held->name, "move gripper to the " + task.source, grasp};
    plan.insert(plan.end(), tail.begin(), tail.end());
    return {gripper_action(1.0), plan};
  }
  if (held == nullptr) {
    std::vector<std::string> plan;
    if (at == src->cell) {
      plan = {grasp};
      plan.insert(plan.end(), tail.begin(), tail.end());
      return {gripper_action(-1.0), plan};
    }
    const auto d = next_move(state, at, src->cell, false, nullptr);
    if (!d) return unsolvable();
    plan = {"move gripper to the " + task.source, grasp};
    plan.insert(plan.end(), tail.begin(), tail.end());
    return {move_action(*d), plan};
  }

  // Carrying the source object.
  const SceneObject* tgt = state.find(task.target);
  std::optional<Cell> goal;
  if (task.family == TaskFamily::PutOn) {
    goal = tgt->cell;
  } else {
    goal = near_goal(state, *src, *tgt, task.near_radius);
  }
  if (!goal) return unsolvable();
  if (at == *goal) return {gripper_action(1.0), {release}};
  const auto d = next_move(state, at, *goal, true, src);
  if (!d) return unsolvable();
  return {move_action(*d), tail};
}

ContinuousAction scripted_expert(const WorldState& state, const TaskSpec& task) {
  return expert_decision(state, task).action;
}

std::pair<WorldState, TaskSpec> reset(TaskFamily family, std::uint64_t seed, int size, int max_steps) {
  if (size < 8) throw Error("sim", "grid size must be at least 8");
  std::mt19937_64 rng(splitmix64(seed * 8 + static_cast<std::uint64_t>(family)));

  for (int attempt = 0; attempt < 1000; ++attempt) {
    WorldState w;
    w.size = size;
    w.seed = seed;
    TaskSpec task;
    task.family = family;
    auto random_cell = [&](int min_y) { return Cell{uniform_int(rng, 0, size - 1), uniform_int(rng, min_y, size - 1)}; };
    auto taken = [&](Cell c) {
      if (c == w.gripper.cell) return true;
      for (const SceneObject& o : w.objects) {
        if (o.cell == c) return true;
      }
      return false;
    };

    std::array<const char*, 3> names = kGraspable;
    std::shuffle(names.begin(), names.end(), rng);

    if (is_drawer_task(family)) {
      w.drawer.present = true;
      w.drawer.x0 = uniform_int(rng, 1, size - 4);
      w.drawer.open_fraction = family == TaskFamily::OpenDrawer ? 0.0 : 1.0;
      const int min_y = 7;
      do {
        w.gripper.cell = random_cell(min_y);
      } while (manhattan(w.gripper.cell, w.drawer.handle()) < 2 || manhattan(w.gripper.cell, w.drawer.handle()) > 9);
      for (int i = 0; i < 2; ++i) {
        Cell c;
        do {
          c = random_cell(min_y);
        } while (taken(c));
        w.objects.push_back(make_object(names[static_cast<std::size_t>(i)], c));
      }
    } else {
      w.gripper.cell = random_cell(0);
      task.source = names[0];
      Cell src;
      do {
        src = random_cell(0);
      } while (taken(src) || manhattan(src, w.gripper.cell) > 7);
      w.objects.push_back(make_object(task.source, src));
      std::vector<std::string> distractors;
      if (family == TaskFamily::Pick) {
        distractors = {names[1], names[2]};
      } else {
        task.target = family == TaskFamily::PutOn ? "plate" : names[1];
        const int lo = family == TaskFamily::PutOn ? 2 : kNearRadius + 1;
        Cell tgt;
        do {
          tgt = random_cell(0);
        } while (taken(tgt) || manhattan(tgt, src) < lo || manhattan(tgt, src) > 8);
        w.objects.push_back(make_object(task.target, tgt));
        distractors = {family == TaskFamily::PutOn ? names[1] : names[2]};
      }
      for (const std::string& name : distractors) {
        Cell c;
        do {
          c = random_cell(0);
        } while (taken(c));
        w.objects.push_back(make_object(name, c));
      }
    }
    sort_objects(w);

    // Solvability audit: the expert must finish within the step budget.
    WorldState probe = w;
    bool solved = false;
    try {
      for (int t = 0; t <= max_steps; ++t) {
        if (is_success(probe, task)) {
          solved = t > 0;
          break;
        }
        if (t == max_steps) break;
        probe = step(probe, scripted_expert(probe, task));
      }
    } catch (const Error&) {
      solved = false;
    }
    if (solved) return {w, task};
  }
  throw Error("sim", "could not sample a solvable world");
}

std::vector<ImageGrid> render(const WorldState& state, int views) {
  if (views < 1) throw Error("sim", "views must be >= 1");
  ImageGrid top = ImageGrid::blank(state.size);
  if (state.drawer.present) {
    const int front = state.drawer.front_row();
    for (int x = state.drawer.x0; x <= state.drawer.x0 + 2; ++x) {
      for (int y = 0; y <= front && y < state.size; ++y) top.set(x, y, color::kDrawer);
    }
    const Cell h = state.drawer.handle();
    if (h.y < state.size) top.set(h.x, h.y, color::kDrawer);
  }
  for (int pass = 0; pass < 2; ++pass) {
    for (const SceneObject& o : state.objects) {
      if (o.held || o.receptacle != (pass == 0)) continue;
      top.set(o.cell.x, o.cell.y, o.color);
    }
  }
  top.set(state.gripper.cell.x, state.gripper.cell.y,
          state.gripper.open ? color::kGripperOpen : color::kGripperClosed);

  std::vector<ImageGrid> out{top};
  for (int v = 1; v < views; ++v) {
    ImageGrid mirrored = ImageGrid::blank(state.size);
    for (int y = 0; y < state.size; ++y) {
      for (int x = 0; x < state.size; ++x) mirrored.set(state.size - 1 - x, y, top.at(x, y));
    }
    out.push_back(std::move(mirrored));
  }
  return out;
}

Observation observe(const WorldState& state, const TaskSpec& task, int views) {
  return Observation{render(state, views), instruction_for(task)};
}

std::pair<WorldState, TaskSpec> perceive(const ImageGrid& view, std::string_view instruction) {
  TaskSpec task = parse_instruction(instruction);
  WorldState w;
  w.size = view.size;
  bool found_gripper = false;
  int drawer_min_x = view.size;
  for (int y = 0; y < view.size; ++y) {
    for (int x = 0; x < view.size; ++x) {
      const std::uint8_t c = view.at(x, y);
      if (c == color::kGripperOpen || c == color::kGripperClosed) {
        w.gripper.cell = {x, y};
        w.gripper.open = c == color::kGripperOpen;
        found_gripper = true;
      } else if (c == color::kDrawer) {
        drawer_min_x = std::min(drawer_min_x, x);
      } else if (const CatalogEntry* e = catalog_by_color(c)) {
        w.objects.push_back(make_object(e->name, Cell{x, y}));
      }
    }
  }
  if (!found_gripper) throw Error("sim", "no gripper visible in the view");

  if (drawer_min_x < view.size) {
    w.drawer.present = true;
    w.drawer.x0 = drawer_min_x;
    int front = 0;
    for (int y = 0; y < view.size; ++y) {
      for (int x : {drawer_min_x, drawer_min_x + 2}) {
        if (x < view.size && view.at(x, y) == color::kDrawer) front = std::max(front, y);
      }
    }
    w.drawer.open_fraction = std::clamp(front, 0, 4) * kDrawerIncrement;
    w.drawer.grasped = !w.gripper.open && w.gripper.cell == w.drawer.handle();
  }

  // Task objects that are not visible must be under the gripper.
  std::vector<std::string> needed;
  if (!task.source.empty()) needed.push_back(task.source);
  if (!task.target.empty()) needed.push_back(task.target);
  for (const std::string& name : needed) {
    if (w.find(name) != nullptr) continue;
    SceneObject o = make_object(name, w.gripper.cell);
    o.held = !o.receptacle && !w.gripper.open && !w.drawer.grasped && w.held_object() == nullptr;
    w.objects.push_back(std::move(o));
  }
  sort_objects(w);
  return {w, task};
}

ReasoningTrace ground_truth_trace(const WorldState& state, const TaskSpec& task) {
  const ExpertDecision decision = expert_decision(state, task);
  const SceneObject* held = state.held_object();
  ReasoningTrace trace;

  std::vector<std::string> seen;
  for (const SceneObject& o : state.objects) seen.push_back(article(o.name));
  if (state.drawer.present) seen.emplace_back("a drawer");
  std::string obs = "I see " + (seen.empty() ? std::string("an empty table") : join_list(seen)) + " on the table.";
  if (held != nullptr) {
    obs += " The gripper is closed and holds the " + held->name + ".";
  } else {
    obs += state.gripper.open ? " The gripper is open." : " The gripper is closed.";
  }
  trace.observation = obs;

  const bool solved = is_success(state, task);
  std::string situation = "The task is to " + instruction_for(task) + ".";
  if (solved) {
    situation += " The task is already complete.";
  } else if (held != nullptr) {
    situation += " The gripper is holding the " + held->name + ".";
  } else if (state.drawer.grasped) {
    situation += " The gripper is holding the drawer handle.";
  } else {
    situation += " The gripper is empty.";
  }
  trace.situation_analysis = situation;

  std::string spatial;
  if (is_drawer_task(task.family)) {
    const double f = state.drawer.open_fraction;
    spatial = f <= 1e-9 ? "The drawer is closed." : (f >= 1.0 - 1e-9 ? "The drawer is open." : "The drawer is partly open.");
    spatial += " The handle is " + relation(state.drawer.handle(), state.gripper.cell) + " the gripper.";
  } else {
    const SceneObject* src = state.find(task.source);
    spatial = "The " + src->name + " is " + relation(src->cell, state.gripper.cell) + " the gripper.";
    if (!task.target.empty()) {
      const SceneObject* tgt = state.find(task.target);
      spatial += " The " + tgt->name + " is " + relation(tgt->cell, src->cell) + " the " + src->name + ".";
    }
  }
  trace.spatial_reasoning = spatial;

  if (solved) {
    trace.task_planning = "The task is complete.";
  } else {
    switch (task.family) {
      case TaskFamily::MoveNear:
        trace.task_planning = "Pick up the " + task.source + " and place it near the " + task.target + ".";
        break;
      case TaskFamily::PutOn:
        trace.task_planning = "Pick up the " + task.source + " and put it on the " + task.target + ".";
        break;
      case TaskFamily::Pick: trace.task_planning = "Pick up the " + task.source + "."; break;
      case TaskFamily::OpenDrawer: trace.task_planning = "Grasp the drawer handle and pull it open."; break;
      case TaskFamily::CloseDrawer: trace.task_planning = "Grasp the drawer handle and push it closed."; break;
    }
  }
  trace.logical_steps = decision.remaining_plan;
  trace.sub_action = decision.remaining_plan.front();
  return trace;
}

void trim_trailing_holds(Episode& episode, double epsilon) {
  while (episode.steps.size() > 1 && episode.steps.back().action.max_abs() < epsilon) episode.steps.pop_back();
}

std::uint64_t episode_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(seed ^ splitmix64(index + 0x51ED27ULL));
}

std::vector<Episode> generate_demonstrations(int n, std::span<const TaskFamily> families, std::uint64_t seed,
                                             const DemoOptions& options) {
  if (n < 1) throw Error("sim", "number of demonstrations must be >= 1");
  if (families.empty()) throw Error("sim", "no task families given");
  std::vector<Episode> episodes;
  for (int i = 0; i < n; ++i) {
    const TaskFamily family = families[static_cast<std::size_t>(i) % families.size()];
    const std::uint64_t s = episode_seed(seed, static_cast<std::uint64_t>(i));
    auto [world, task] = reset(family, s, options.size, options.max_steps);
    Episode ep;
    ep.episode_id = "e" + std::to_string(i);
    ep.task_name = std::string(family_name(family));
    ep.metadata = {{"seed", std::to_string(s)}, {"source", "scripted_expert"}, {"family", ep.task_name}};
    bool success = false;
    for (int t = 0; t < options.max_steps; ++t) {
      if (is_success(world, task)) break;
      const ContinuousAction a = scripted_expert(world, task);
      ep.steps.push_back(Step{observe(world, task, options.views), a, std::nullopt});
      world = step(world, a);
    }
    success = is_success(world, task);
    if (!success || ep.steps.empty()) continue;
    trim_trailing_holds(ep);
    episodes.push_back(std::move(ep));
  }
  return episodes;
}

nlohmann::json RolloutSummary::to_json() const {
  return nlohmann::json{{"family", family_name(family)}, {"n", n},
                        {"success_rate", success_rate}, {"grasp_rate", grasp_rate},
                        {"policy_errors", policy_errors}, {"seed", seed}};
}

RolloutResult rollout_episode(const Policy& policy, TaskFamily family, std::uint64_t seed, int max_steps, int size,
                              int views) {
  auto [world, task] = reset(family, seed, size, max_steps);
  RolloutResult r;
  auto grasped_now = [&](const WorldState& w) {
    if (is_drawer_task(task.family)) return w.drawer.grasped;
    const SceneObject* src = w.find(task.source);
    return src != nullptr && src->held;
  };
  while (r.steps_taken < max_steps && !is_success(world, task)) {
    ContinuousAction a;
    try {
      a = policy(observe(world, task, views));
    } catch (...) {
      r.policy_error = true;
      break;
    }
    world = step(world, a);
    r.trajectory.emplace_back(world.digest(), a);
    ++r.steps_taken;
    r.grasped = r.grasped || grasped_now(world);
  }
  r.success = !r.policy_error && is_success(world, task);
  return r;
}

RolloutSummary rollout(const Policy& policy, TaskFamily family, int n_episodes, std::uint64_t seed, int max_steps,
                       int size, int views) {
  if (n_episodes < 1) throw Error("sim", "n_episodes must be >= 1");
  RolloutSummary s;
  s.family = family;
  s.n = n_episodes;
  s.seed = seed;
  int successes = 0;
  int grasps = 0;
  for (int i = 0; i < n_episodes; ++i) {
    RolloutResult r = rollout_episode(policy, family, episode_seed(seed, static_cast<std::uint64_t>(i)), max_steps,
                                      size, views);
    successes += r.success ? 1 : 0;
    grasps += r.grasped ? 1 : 0;
    s.policy_errors += r.policy_error ? 1 : 0;
    s.episodes.push_back(std::move(r));
  }
  s.success_rate = static_cast<double>(successes) / n_episodes;
  s.grasp_rate = static_cast<double>(grasps) / n_episodes;
  return s;
}

}  // namespace cotvla::sim
