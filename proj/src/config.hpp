#pragma once

// Flat key=value run configuration with dotted section names.
//
//   # comment
//   env.name = relay
//   train.gamma = 0.99
//
// Unknown keys and malformed values are errors that name the line.

#include "envs.hpp"
#include "model.hpp"
#include "training.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace commformer {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  // env.*
  std::string env_name = "pp";
  int n_agents = 3;
  int n_captures = 1;
  int grid = 5;
  int vision = 1;
  int max_steps = 100;
  int eval_episode_length = 20;
  int stacked_frames = 1;
  double step_penalty = 0.05;

  // model.*
  int hidden_dim = 64;
  int n_heads = 1;
  int n_blocks = 1;
  double gain = 0.01;
  bool agent_embedding = true;

  train::TrainConfig train;
  int training_threads = 1;
  long long batch_size = 0;  // 0: rollout_threads * episode_length
  train::GraphConfig graph;

  // run.*
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  int log_interval = 1;
  int snapshot_interval = 1;
  int checkpoint_interval = 0;  // 0: final checkpoint only
  int eval_episodes = 500;
  std::uint64_t eval_seed = 12345;

  // Sets one key from its textual value.
  void set(const std::string& key, const std::string& value);
  void validate() const;

  envs::EnvSpec env_spec() const;       // training episodes
  envs::EnvSpec eval_env_spec() const;  // evaluation episodes
  ModelDims model_dims() const;
  train::TrainerSetup trainer_setup() const;

  // Every key with its resolved value, one per line, in a fixed order.
  std::string to_string() const;
};

std::vector<std::string> config_keys();

RunConfig parse_config(const std::string& text, const std::string& origin = "config");
RunConfig load_config(const std::string& path);

// Splits "a, b ,c" into trimmed items.
std::vector<std::string> split_list(const std::string& s);
std::string trim(const std::string& s);

}  // namespace commformer
