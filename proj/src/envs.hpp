#pragma once

// Seeded grid worlds exposing a joint observation / joint action / joint
// reward interface: Predator-Prey, Predator-Capture-Prey and Relay.

#include <cstdint>
#include <deque>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace commformer::envs {

enum class EnvKind { kPredatorPrey, kPredatorCapturePrey, kRelay };

enum class AgentClass : int { kPredator = 0, kCapture = 1 };

enum Action : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kStay = 4, kCapturePrey = 5 };

inline constexpr int kMoveActions = 5;

struct EnvSpec {
  std::string name;
  EnvKind kind = EnvKind::kPredatorPrey;
  int n_agents = 3;
  int grid = 5;
  int vision = 1;
  int max_steps = 20;
  std::vector<AgentClass> classes;
  int scout = -1;  // Relay only
  double step_penalty = 0.05;
  int stacked_frames = 1;

  int frame_dim() const;
  int obs_dim() const { return frame_dim() * stacked_frames; }
  std::vector<int> action_counts() const;
  std::vector<int> class_ids() const;
  // Agents whose goal flag starts unset and must be set for success.
  std::vector<int> goal_agents() const;
  void validate() const;
};

EnvSpec pp_spec(int n_agents = 3, int grid = 5, int vision = 1, int max_steps = 20);
EnvSpec pcp_spec(int n_predators = 2, int n_captures = 1, int grid = 5, int vision = 1, int max_steps = 20);
EnvSpec relay_spec(int n_agents = 3, int grid = 5, int max_steps = 20);

// Builds a spec by name ("pp", "pcp", "relay").
EnvSpec make_spec(const std::string& name, int n_agents, int n_captures, int grid, int vision, int max_steps);

struct Cell {
  int row = 0;
  int col = 0;
  bool operator==(const Cell&) const = default;
};

struct EnvState {
  std::vector<Cell> agents;
  Cell prey;
  std::vector<std::uint8_t> goal_flags;  // reached (PP, Relay, PCP predators) or captured (PCP capture class)
  int step = 0;
  bool done = false;
  bool success = false;
};

struct StepResult {
  double reward = 0.0;
  bool done = false;
  bool success = false;
};

Cell apply_move(Cell c, int action, int grid);

// Prey quadrant index in [0, 4): 2 * (row in lower half) + (col in right half).
int quadrant(Cell c, int grid);

class GridEnv {
 public:
  explicit GridEnv(EnvSpec spec);

  const EnvSpec& spec() const { return spec_; }
  const EnvState& state() const { return state_; }

  // Reseeds the generator, then places agents and prey on distinct cells.
  void reset(std::uint64_t seed);
  // Places a new episode using the current generator state.
  void reset();
  // Starts an episode from an explicit placement (tests and oracles).
  void reset_to(std::vector<Cell> agents, Cell prey);

  StepResult step(std::span<const int> joint_action);

  // Current single-frame observation of agent i.
  std::vector<double> observe(int agent) const;
  // Stacked observations for all agents, row-major [N, obs_dim].
  std::vector<double> observations() const;

 private:
  void place();
  void begin_episode();
  void push_frame();

  EnvSpec spec_;
  EnvState state_;
  std::mt19937_64 rng_;
  std::deque<std::vector<double>> frames_;  // newest last, each [N * frame_dim]
};

// Step count of the greedy shortest-path policy with full knowledge of the
// prey: every goal agent walks straight to the prey (capture agents then
// capture).
std::vector<int> scripted_actions(const EnvState& s, const EnvSpec& spec);

// Exact optimum of the fully observed joint MDP by finite-horizon value
// iteration, averaged over the uniform distinct-cell start distribution.
struct JointOptimum {
  double expected_return = 0.0;
  double expected_steps = 0.0;
};
JointOptimum joint_mdp_optimum(const EnvSpec& spec);

}  // namespace commformer::envs
