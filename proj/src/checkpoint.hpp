#pragma once

// Binary checkpoints.
//
//   8 bytes   magic "CMFRCKPT"
//   8 bytes   header length L (little-endian)
//   L bytes   JSON header: format version, resolved config text, progress
//             counters, Adam step counts and a tensor table
//   ...       raw little-endian float32 tensor data
//
// Tensors are matched by name on load, so reordering parameters inside a
// set does not break old files.

#include "config.hpp"
#include "training.hpp"

#include <string>

namespace commformer {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct Checkpoint {
  RunConfig config;
  train::Learner learner;
  long long iteration = 0;
  long long env_steps = 0;

  int budget() const { return config.graph.budget(config.n_agents); }
  graph::CommGraph execution_graph() const;
};

void save_checkpoint(const std::string& path, const RunConfig& config, const train::Learner& learner,
                     long long iteration, long long env_steps);
Checkpoint load_checkpoint(const std::string& path);

// In-memory forms used by the file functions.
std::string encode_checkpoint(const RunConfig& config, const train::Learner& learner, long long iteration,
                              long long env_steps);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint");

}  // namespace commformer
