#include "envs.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace commformer::envs {

namespace {

constexpr int kQuadrants = 4;

bool has_goal(const EnvSpec& spec, int agent) { return agent != spec.scout; }

}  // namespace

int EnvSpec::frame_dim() const {
  const int patch = (2 * vision + 1) * (2 * vision + 1);
  int dim = 2 + patch + 1 + 1;
  if (kind == EnvKind::kRelay) dim += kQuadrants;
  return dim;
}

std::vector<int> EnvSpec::action_counts() const {
  std::vector<int> counts;
  for (AgentClass c : classes) counts.push_back(c == AgentClass::kCapture ? kMoveActions + 1 : kMoveActions);
  return counts;
}

std::vector<int> EnvSpec::class_ids() const {
  std::vector<int> ids;
  for (AgentClass c : classes) ids.push_back(static_cast<int>(c));
  return ids;
}

std::vector<int> EnvSpec::goal_agents() const {
  std::vector<int> out;
  for (int i = 0; i < n_agents; ++i) {
    if (has_goal(*this, i)) out.push_back(i);
  }
  return out;
}

void EnvSpec::validate() const {
  if (n_agents < 1) throw std::invalid_argument("env: n_agents must be >= 1");
  if (grid < 1) throw std::invalid_argument("env: grid must be >= 1");
  if (vision < 0) throw std::invalid_argument("env: vision must be >= 0");
  if (max_steps < 1) throw std::invalid_argument("env: max_steps must be >= 1");
  if (stacked_frames < 1) throw std::invalid_argument("env: stacked_frames must be >= 1");
  if (static_cast<int>(classes.size()) != n_agents) throw std::invalid_argument("env: one class per agent required");
  if (kind == EnvKind::kRelay && (scout < 0 || scout >= n_agents || n_agents < 2)) {
    throw std::invalid_argument("env: relay needs n_agents >= 2 and a valid scout");
  }
  if (grid * grid < n_agents + 1) {
    throw std::invalid_argument("env: grid too small for distinct placement of agents and prey");
  }
}

EnvSpec pp_spec(int n_agents, int grid, int vision, int max_steps) {
  EnvSpec s;
  s.name = "pp";
  s.kind = EnvKind::kPredatorPrey;
  s.n_agents = n_agents;
  s.grid = grid;
  s.vision = vision;
  s.max_steps = max_steps;
  s.classes.assign(static_cast<std::size_t>(std::max(n_agents, 0)), AgentClass::kPredator);
  s.validate();
  return s;
}

EnvSpec pcp_spec(int n_predators, int n_captures, int grid, int vision, int max_steps) {
  EnvSpec s;
  s.name = "pcp";
  s.kind = EnvKind::kPredatorCapturePrey;
  s.n_agents = n_predators + n_captures;
  s.grid = grid;
  s.vision = vision;
  s.max_steps = max_steps;
  s.classes.assign(static_cast<std::size_t>(std::max(n_predators, 0)), AgentClass::kPredator);
  s.classes.insert(s.classes.end(), static_cast<std::size_t>(std::max(n_captures, 0)), AgentClass::kCapture);
  s.validate();
  return s;
}

EnvSpec relay_spec(int n_agents, int grid, int max_steps) {
  if (n_agents < 2) throw std::invalid_argument("relay_spec: n_agents must be >= 2");
  EnvSpec s;
  s.name = "relay";
  s.kind = EnvKind::kRelay;
  s.n_agents = n_agents;
  s.grid = grid;
  s.vision = 0;
  s.max_steps = max_steps;
  s.classes.assign(static_cast<std::size_t>(n_agents), AgentClass::kPredator);
  s.scout = 0;
  s.validate();
  return s;
}

EnvSpec make_spec(const std::string& name, int n_agents, int n_captures, int grid, int vision, int max_steps) {
  if (name == "pp") return pp_spec(n_agents, grid, vision, max_steps);
  if (name == "pcp") return pcp_spec(n_agents - n_captures, n_captures, grid, vision, max_steps);
  if (name == "relay") return relay_spec(n_agents, grid, max_steps);
  throw std::invalid_argument("unknown environment '" + name + "'");
}

Cell apply_move(Cell c, int action, int grid) {
  switch (action) {
    case kUp: c.row = std::max(0, c.row - 1); break;
    case kDown: c.row = std::min(grid - 1, c.row + 1); break;
    case kLeft: c.col = std::max(0, c.col - 1); break;
    case kRight: c.col = std::min(grid - 1, c.col + 1); break;
    default: break;
  }
  return c;
}

int quadrant(Cell c, int grid) {
  const int half = (grid + 1) / 2;
  return 2 * (c.row >= half ? 1 : 0) + (c.col >= half ? 1 : 0);
}

GridEnv::GridEnv(EnvSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  reset(0);
}

void GridEnv::reset(std::uint64_t seed) {
  rng_.seed(seed);
  reset();
}

void GridEnv::reset() {
  place();
  begin_episode();
}

void GridEnv::reset_to(std::vector<Cell> agents, Cell prey) {
  if (static_cast<int>(agents.size()) != spec_.n_agents) throw std::invalid_argument("reset_to: wrong agent count");
  state_.agents = std::move(agents);
  state_.prey = prey;
  begin_episode();
}

void GridEnv::place() {
  const int cells = spec_.grid * spec_.grid;
  // Partial Fisher-Yates over cell indices: first N for agents, next for prey.
  std::vector<int> idx(static_cast<std::size_t>(cells));
  for (int i = 0; i < cells; ++i) idx[static_cast<std::size_t>(i)] = i;
  const int needed = spec_.n_agents + 1;
  for (int i = 0; i < needed; ++i) {
    std::uniform_int_distribution<int> pick(i, cells - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng_))]);
  }
  state_.agents.resize(static_cast<std::size_t>(spec_.n_agents));
  for (int i = 0; i < spec_.n_agents; ++i) {
    const int c = idx[static_cast<std::size_t>(i)];
    state_.agents[static_cast<std::size_t>(i)] = Cell{c / spec_.grid, c % spec_.grid};
  }
  const int p = idx[static_cast<std::size_t>(spec_.n_agents)];
  state_.prey = Cell{p / spec_.grid, p % spec_.grid};
}

void GridEnv::begin_episode() {
  state_.step = 0;
  state_.done = false;
  state_.success = false;
  state_.goal_flags.assign(static_cast<std::size_t>(spec_.n_agents), 0);
  if (spec_.scout >= 0) state_.goal_flags[static_cast<std::size_t>(spec_.scout)] = 1;
  frames_.clear();
  for (int f = 0; f < spec_.stacked_frames; ++f) push_frame();
}

void GridEnv::push_frame() {
  std::vector<double> frame;
  frame.reserve(static_cast<std::size_t>(spec_.n_agents * spec_.frame_dim()));
  for (int i = 0; i < spec_.n_agents; ++i) {
    const auto o = observe(i);
    frame.insert(frame.end(), o.begin(), o.end());
  }
  frames_.push_back(std::move(frame));
  while (static_cast<int>(frames_.size()) > spec_.stacked_frames) frames_.pop_front();
}

std::vector<double> GridEnv::observe(int agent) const {
  if (agent < 0 || agent >= spec_.n_agents) throw std::invalid_argument("observe: agent index out of range");
  std::vector<double> o(static_cast<std::size_t>(spec_.frame_dim()), 0.0);
  const auto a = static_cast<std::size_t>(agent);
  if (spec_.classes[a] == AgentClass::kCapture) return o;

  const Cell pos = state_.agents[a];
  const double denom = spec_.grid > 1 ? static_cast<double>(spec_.grid - 1) : 1.0;
  std::size_t k = 0;
  o[k++] = pos.row / denom;
  o[k++] = pos.col / denom;
  const int v = spec_.vision;
  for (int dr = -v; dr <= v; ++dr) {
    for (int dc = -v; dc <= v; ++dc) {
      o[k++] = (state_.prey.row == pos.row + dr && state_.prey.col == pos.col + dc) ? 1.0 : 0.0;
    }
  }
  o[k++] = state_.goal_flags[a] ? 1.0 : 0.0;
  o[k++] = static_cast<double>(state_.step) / spec_.max_steps;
  if (spec_.kind == EnvKind::kRelay && agent == spec_.scout) {
    o[k + static_cast<std::size_t>(quadrant(state_.prey, spec_.grid))] = 1.0;
  }
  return o;
}

std::vector<double> GridEnv::observations() const {
  std::vector<double> out;
  const int fd = spec_.frame_dim();
  out.reserve(static_cast<std::size_t>(spec_.n_agents * spec_.obs_dim()));
  for (int i = 0; i < spec_.n_agents; ++i) {
    for (const auto& frame : frames_) {
      const auto begin = frame.begin() + static_cast<std::ptrdiff_t>(i * fd);
      out.insert(out.end(), begin, begin + fd);
    }
  }
  return out;
}

StepResult GridEnv::step(std::span<const int> joint_action) {
  if (static_cast<int>(joint_action.size()) != spec_.n_agents) {
    throw std::invalid_argument("step: joint action size must equal n_agents");
  }
  const auto counts = spec_.action_counts();
  for (int i = 0; i < spec_.n_agents; ++i) {
    const int a = joint_action[static_cast<std::size_t>(i)];
    if (a < 0 || a >= counts[static_cast<std::size_t>(i)]) {
      throw std::invalid_argument("step: invalid action " + std::to_string(a) + " for agent " + std::to_string(i));
    }
  }
  if (state_.done) return StepResult{0.0, true, state_.success};

  for (int i = 0; i < spec_.n_agents; ++i) {
    const auto u = static_cast<std::size_t>(i);
    const int a = joint_action[u];
    if (spec_.classes[u] == AgentClass::kCapture && a == kCapturePrey) {
      if (state_.agents[u] == state_.prey) state_.goal_flags[u] = 1;
      continue;
    }
    state_.agents[u] = apply_move(state_.agents[u], a, spec_.grid);
    if (spec_.classes[u] == AgentClass::kPredator && state_.agents[u] == state_.prey) state_.goal_flags[u] = 1;
  }
  int unset = 0;
  for (auto f : state_.goal_flags) unset += f ? 0 : 1;
  ++state_.step;
  state_.success = unset == 0;
  state_.done = state_.success || state_.step >= spec_.max_steps;
  push_frame();
  return StepResult{-spec_.step_penalty * unset, state_.done, state_.success};
}

std::vector<int> scripted_actions(const EnvState& s, const EnvSpec& spec) {
  std::vector<int> actions(static_cast<std::size_t>(spec.n_agents), kStay);
  for (int i = 0; i < spec.n_agents; ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (s.goal_flags[u]) continue;
    const Cell c = s.agents[u];
    if (c.row < s.prey.row) {
      actions[u] = kDown;
    } else if (c.row > s.prey.row) {
      actions[u] = kUp;
    } else if (c.col < s.prey.col) {
      actions[u] = kRight;
    } else if (c.col > s.prey.col) {
      actions[u] = kLeft;
    } else if (spec.classes[u] == AgentClass::kCapture) {
      actions[u] = kCapturePrey;
    }
  }
  return actions;
}

namespace {

// Finite-horizon value iteration for one goal agent against a fixed prey.
// State: agent cell or "goal reached" (index cells). Reward after each step:
// -penalty while the goal is unset. Returns value-to-go from each start cell
// and the number of steps the greedy-optimal policy needs (horizon+1 if never).
struct SingleAgentSolution {
  std::vector<double> value;  // [cells]
  std::vector<int> steps;     // [cells]
};

SingleAgentSolution solve_single(const EnvSpec& spec, AgentClass cls, Cell prey) {
  const int g = spec.grid;
  const int cells = g * g;
  const int n_actions = cls == AgentClass::kCapture ? kMoveActions + 1 : kMoveActions;
  const int horizon = spec.max_steps;
  const int done = cells;
  const int prey_idx = prey.row * g + prey.col;

  auto transition = [&](int s, int a) {
    if (s == done) return done;
    const Cell c{s / g, s % g};
    if (cls == AgentClass::kCapture) {
      if (a == kCapturePrey) return s == prey_idx ? done : s;
      const Cell m = apply_move(c, a, g);
      return m.row * g + m.col;
    }
    const Cell m = apply_move(c, a, g);
    const int ns = m.row * g + m.col;
    return ns == prey_idx ? done : ns;
  };

  // value[t][s]: optimal return with t steps remaining.
  std::vector<std::vector<double>> value(static_cast<std::size_t>(horizon + 1),
                                         std::vector<double>(static_cast<std::size_t>(cells + 1), 0.0));
  std::vector<std::vector<int>> best(static_cast<std::size_t>(horizon + 1),
                                     std::vector<int>(static_cast<std::size_t>(cells + 1), kStay));
  for (int t = 1; t <= horizon; ++t) {
    for (int s = 0; s <= cells; ++s) {
      if (s == done) continue;
      double q_best = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < n_actions; ++a) {
        const int ns = transition(s, a);
        const double r = ns == done ? 0.0 : -spec.step_penalty;
        const double q = r + value[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(ns)];
        if (q > q_best) {
          q_best = q;
          best[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)] = a;
        }
      }
      value[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)] = q_best;
    }
  }
  SingleAgentSolution sol;
  sol.value.resize(static_cast<std::size_t>(cells));
  sol.steps.resize(static_cast<std::size_t>(cells));
  for (int s0 = 0; s0 < cells; ++s0) {
    sol.value[static_cast<std::size_t>(s0)] = value[static_cast<std::size_t>(horizon)][static_cast<std::size_t>(s0)];
    int s = s0;
    int steps = 0;
    for (int t = horizon; t >= 1 && s != done; --t) {
      s = transition(s, best[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)]);
      ++steps;
    }
    sol.steps[static_cast<std::size_t>(s0)] = s == done ? steps : horizon + 1;
  }
  return sol;
}

}  // namespace

JointOptimum joint_mdp_optimum(const EnvSpec& spec) {
  spec.validate();
  const int g = spec.grid;
  const int cells = g * g;
  const int n = spec.n_agents;
  const auto goals = spec.goal_agents();

  // Dynamics are independent across agents and the reward is a sum of
  // per-agent terms, so the joint optimum factorizes per goal agent.
  std::vector<std::vector<SingleAgentSolution>> solutions(2);
  for (int cls = 0; cls < 2; ++cls) {
    for (int p = 0; p < cells; ++p) {
      solutions[static_cast<std::size_t>(cls)].push_back(
          solve_single(spec, static_cast<AgentClass>(cls), Cell{p / g, p % g}));
    }
  }

  // Enumerate every ordered placement of N agents and the prey on distinct cells.
  double total_return = 0.0;
  double total_steps = 0.0;
  long long count = 0;
  std::vector<int> pos(static_cast<std::size_t>(n + 1), 0);
  std::vector<char> used(static_cast<std::size_t>(cells), 0);
  auto recurse = [&](auto&& self, int depth) -> void {
    if (depth == n + 1) {
      const int prey = pos[static_cast<std::size_t>(n)];
      double ret = 0.0;
      int steps = 0;
      for (int i : goals) {
        const auto cls = static_cast<std::size_t>(spec.classes[static_cast<std::size_t>(i)]);
        const auto& sol = solutions[cls][static_cast<std::size_t>(prey)];
        ret += sol.value[static_cast<std::size_t>(pos[static_cast<std::size_t>(i)])];
        steps = std::max(steps, sol.steps[static_cast<std::size_t>(pos[static_cast<std::size_t>(i)])]);
      }
      total_return += ret;
      total_steps += std::min(steps, spec.max_steps);
      ++count;
      return;
    }
    for (int c = 0; c < cells; ++c) {
      if (used[static_cast<std::size_t>(c)]) continue;
      used[static_cast<std::size_t>(c)] = 1;
      pos[static_cast<std::size_t>(depth)] = c;
      self(self, depth + 1);
      used[static_cast<std::size_t>(c)] = 0;
    }
  };
  recurse(recurse, 0);
  return JointOptimum{total_return / static_cast<double>(count), total_steps / static_cast<double>(count)};
}

}  // namespace commformer::envs
