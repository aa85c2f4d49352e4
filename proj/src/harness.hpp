#pragma once

// Training driver, evaluation, ablation sweeps and plot-data export.

#include "checkpoint.hpp"
#include "config.hpp"
#include "training.hpp"

#include "json.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace commformer {

// Worker count after COMMFORMER_THREADS (cap) and COMMFORMER_DETERMINISTIC=1 (forces 1).
int resolve_threads(int requested);
bool deterministic_mode();

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  int episodes = 500;
  std::uint64_t seed = 12345;
  bool sample = false;        // sample actions instead of argmax
  int batch = 50;             // episodes stepped together
  std::ostream* trace = nullptr;  // per-step JSONL when set
};

struct EvalReport {
  int episodes = 0;
  double success_rate = 0.0;
  double mean_steps = 0.0;
  double std_steps = 0.0;
  double se_steps = 0.0;
  double mean_return = 0.0;
  double std_return = 0.0;
  double se_return = 0.0;

  nlohmann::json to_json() const;
  bool operator==(const EvalReport&) const = default;
};

// Episodes are seeded individually from (seed, episode index), so the report
// does not depend on how episodes are batched.
EvalReport evaluate(const Model<float>& model, const graph::CommGraph& graph, const envs::EnvSpec& spec,
                    const EvalOptions& opt);

// Uses the checkpoint's execution graph and evaluation episode length.
EvalReport evaluate_checkpoint(const Checkpoint& ck, const EvalOptions& opt);

// Throws CheckpointMismatch when `cfg` describes a different environment or model shape.
void check_compatible(const Checkpoint& ck, const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Training runs

struct TrainOptions {
  int threads = 1;
  std::ostream* progress = nullptr;
};

struct TrainSummary {
  std::string out_dir;
  std::string checkpoint;
  long long iterations = 0;
  long long env_steps = 0;
  std::optional<train::IterationMetrics> last;
};

// Writes into cfg.out_dir:
//   config.resolved     every key with its value
//   metrics.jsonl       one record per logged iteration
//   adjacency.jsonl     {"step", "alpha", "edges"} at start and every snapshot interval
//   checkpoint.bin      final state (plus checkpoint_<iter>.bin at the checkpoint interval)
TrainSummary run_training(const RunConfig& cfg, const TrainOptions& opt);

// ---------------------------------------------------------------------------
// Ablation sweeps
//
// Sweep file: one `key = v1, v2, ...` line per swept config key plus an
// optional `seeds = s1, s2, ...` line. Cells are the cartesian product of the
// swept values; every cell trains once per seed with run seed
// seed ^ label_hash(cell label).

struct SweepSpec {
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  std::vector<std::uint64_t> seeds;
};

SweepSpec parse_sweep(const std::string& text, const std::string& origin = "sweep");
SweepSpec load_sweep(const std::string& path);

// 64-bit FNV-1a.
std::uint64_t label_hash(const std::string& label);

struct AblationRun {
  std::string cell;  // directory name
  std::string label;
  std::uint64_t seed = 0;
  std::uint64_t run_seed = 0;
  std::string out_dir;
  EvalReport report;
};

struct AblationCell {
  std::string cell;
  std::string label;
  int n = 0;
  double return_mean = 0.0;
  double return_std = 0.0;  // across seeds
  double return_se = 0.0;
  double success_mean = 0.0;
  double success_std = 0.0;
  double steps_mean = 0.0;
  double steps_std = 0.0;
};

struct AblationResult {
  std::string out_dir;
  std::vector<AblationRun> runs;
  std::vector<AblationCell> cells;
};

// Cell configurations in sweep order (validated, not yet run).
std::vector<std::pair<std::string, RunConfig>> expand_sweep(const RunConfig& base, const SweepSpec& sweep,
                                                            const std::string& out_dir);

// Writes results.csv, summary.csv and summary.txt under out_dir (base out_dir when empty).
AblationResult run_ablation(const RunConfig& base, const SweepSpec& sweep, const TrainOptions& opt,
                            const std::string& out_dir = "");

// Mean and sample standard deviation (0 for a single value).
std::pair<double, double> mean_std(const std::vector<double>& x);

// ---------------------------------------------------------------------------
// Export

struct ExportSummary {
  std::string out_dir;
  int runs = 0;
  int curves = 0;
  int frames = 0;
};

// Collects every metrics.jsonl below run_dir. Writes export/<metric>.csv with
// columns env_steps,mean,std,n and export/frames/... with one alpha and one
// edges matrix per adjacency snapshot.
ExportSummary export_run(const std::string& run_dir);

std::string format_double(double v);

}  // namespace commformer
