#pragma once

// PPO training of the encoder-decoder with a learned communication graph.
//
// Each iteration draws one Gumbel sample, collects a rollout on the sampled
// hard graph, computes GAE advantages, then for every PPO epoch and minibatch
// runs an inner step (encoder + decoder on the train half) followed by an
// outer step (alpha on the validation half).

#include "comm_graph.hpp"
#include "envs.hpp"
#include "model.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace commformer::train {

// Raised when a loss or gradient stops being finite; carries a diagnostic.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TargetMode { kHard, kEma };
enum class GraphMode { kLearned, kFixedRandom, kFullyConnected, kDiagonalOnly };
enum class ValSource { kSplit, kDual };

std::string to_string(TargetMode m);
std::string to_string(GraphMode m);
std::string to_string(ValSource v);
TargetMode parse_target_mode(const std::string& s);
GraphMode parse_graph_mode(const std::string& s);
ValSource parse_val_source(const std::string& s);

struct TrainConfig {
  double gamma = 0.99;
  double gae_lambda = 0.95;
  bool use_gae = true;
  double clip = 0.2;
  int ppo_epochs = 10;
  int num_minibatch = 1;
  double entropy_coef = 0.01;
  double max_grad_norm = 10.0;
  double critic_lr = 5e-4;
  double actor_lr = 5e-4;
  double optim_eps = 1e-5;
  int rollout_threads = 8;  // parallel environments
  int episode_length = 100;  // rollout length per environment per iteration
  long long total_env_steps = 200000;
  TargetMode target_mode = TargetMode::kHard;
  int target_interval = 200;
  double ema_rho = 0.005;
  bool use_huber = false;
  double huber_delta = 10.0;
  bool normalize_advantages = true;
  ValSource val_source = ValSource::kSplit;

  void validate() const;
  int iterations() const;
  long long steps_per_iteration() const;
};

struct GraphConfig {
  GraphMode mode = GraphMode::kLearned;
  double sparsity = 1.0;
  std::optional<std::uint64_t> seed;  // required by fixed_random
  double temperature = 1.0;
  double lr = 5e-4;

  void validate() const;
  int budget(int n_agents) const;
};

// ---------------------------------------------------------------------------
// Advantage estimation

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// Single trajectory. `joint_values` has rewards.size() + 1 entries; the last
// one is the bootstrap value.
GaeResult compute_gae(const std::vector<double>& rewards, const std::vector<double>& joint_values,
                      const std::vector<std::uint8_t>& dones, double gamma, double lambda);

// Joint value: mean over agents of per-agent values [T * N] -> [T].
std::vector<double> joint_values(const std::vector<double>& per_agent, int n_agents);

void normalize(std::vector<double>& x);

// ---------------------------------------------------------------------------
// Losses

template <class S>
struct LossBatch {
  Mat<S> obs;       // [M * N, obs_dim]
  Mat<S> next_obs;  // [M * N, obs_dim]
  std::vector<int> actions;        // [M * N]
  std::vector<S> old_log_probs;    // [M * N]
  std::vector<S> advantages;       // [M] joint advantage per sample
  std::vector<S> rewards;          // [M]
  std::vector<std::uint8_t> dones;  // [M]

  int samples() const { return static_cast<int>(advantages.size()); }
};

struct LossSettings {
  double gamma = 0.99;
  double clip = 0.2;
  double entropy_coef = 0.01;
  double huber_delta = 0.0;  // <= 0: squared error
};

template <class S>
struct LossVars {
  Var encoder;   // L_Encoder
  Var decoder;   // L_Decoder (including the entropy bonus)
  Var entropy;   // mean entropy
  Var total;
  std::vector<S> surrogate;  // per-row min(r A, clip(r) A), for inspection
  std::vector<S> ratio;
};

// Records both losses on one tape. `enc`, `dec` are bound parameter vars
// (trainable or frozen); the target network is always bound frozen and reads
// `target_edges` when given, else a constant copy of `edges`.
template <class S>
LossVars<S> record_losses(Tape<S>& t, const Model<S>& model, const std::vector<Var>& enc, const std::vector<Var>& dec,
                          const LossBatch<S>& batch, Var edges, const LossSettings& cfg,
                          const Mat<S>* target_edges = nullptr);

// Scalar losses with everything frozen.
template <class S>
S encoder_loss(const Model<S>& model, const LossBatch<S>& batch, const Mat<S>& edges, const LossSettings& cfg);
template <class S>
S decoder_loss(const Model<S>& model, const LossBatch<S>& batch, const Mat<S>& edges, const LossSettings& cfg);

// ---------------------------------------------------------------------------
// Optimization

template <class S>
struct Adam {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-5;
  long long steps = 0;
  std::vector<Mat<S>> m;
  std::vector<Mat<S>> v;

  // p.value -= lr * mhat / (sqrt(vhat) + eps), with the gradient multiplied by `grad_scale`.
  void step(std::vector<Param<S>*> params, S grad_scale = S(1));
};

// Clip coefficient for a global gradient norm.
double clip_coefficient(double norm, double max_norm);

struct StepStats {
  double l_enc = 0.0;
  double l_dec = 0.0;
  double entropy = 0.0;
  double grad_norm = 0.0;  // before clipping
};

// Everything the bi-level updates act on.
struct Learner {
  Model<float> model;
  Param<float> alpha;
  Adam<float> enc_opt;
  Adam<float> dec_opt;
  Adam<float> alpha_opt;
  long long optimizer_steps = 0;
};

// One Adam step on L_Encoder + L_Decoder w.r.t. encoder and decoder; alpha frozen.
StepStats inner_step(Learner& learner, const LossBatch<float>& batch, const graph::CommGraph& graph,
                     const TrainConfig& cfg);

// One Adam step on L_val w.r.t. alpha through the straight-through surrogate
// soft = k * softmax((alpha + noise) / tau); encoder and decoder frozen.
StepStats outer_step(Learner& learner, const LossBatch<float>& batch, const graph::CommGraph& graph,
                     const Mat<float>& noise, const TrainConfig& cfg, const GraphConfig& gcfg);

// Target maintenance after an inner step.
void target_update(Model<float>& model, long long optimizer_steps, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Rollouts

struct Rollout {
  int n_envs = 0;
  int length = 0;
  int n_agents = 0;
  int obs_dim = 0;
  std::vector<float> obs;       // [(t * B + b) * N + i, obs_dim]
  std::vector<float> next_obs;  // same layout
  std::vector<int> actions;     // [(t * B + b) * N + i]
  std::vector<float> log_probs;
  std::vector<float> values;
  std::vector<float> rewards;        // [t * B + b]
  std::vector<std::uint8_t> dones;   // [t * B + b]
  std::vector<float> bootstrap;      // [b * N + i], values of the final next_obs
  std::vector<float> advantages;     // [t * B + b]
  std::vector<float> returns;        // [t * B + b]

  int samples() const { return n_envs * length; }
  LossBatch<float> gather(const std::vector<int>& sample_idx) const;
};

struct EpisodeStats {
  int episodes = 0;
  double return_sum = 0.0;
  double length_sum = 0.0;
  int successes = 0;
};

// A set of environments stepped in lockstep with per-environment sampling streams.
class EnvPool {
 public:
  EnvPool() = default;
  EnvPool(const envs::EnvSpec& spec, int n_envs, std::uint64_t seed);

  int size() const { return static_cast<int>(envs_.size()); }
  const envs::EnvSpec& spec() const { return envs_.front().spec(); }

  // Collects `length` steps with sampled actions on `edges`; finished
  // episodes reset automatically. `threads` workers split the environments.
  Rollout collect(const Model<float>& model, const Mat<float>& edges, int length, int threads, EpisodeStats& stats);

  std::string rng_state() const;
  void set_rng_state(const std::string& s);

 private:
  std::vector<envs::GridEnv> envs_;
  std::vector<std::mt19937_64> action_rngs_;
  std::vector<double> episode_return_;
  std::vector<int> episode_length_;
};

void compute_advantages(Rollout& r, const TrainConfig& cfg);

// Shuffled index chunks for one PPO epoch, each split into disjoint
// train / validation halves (validation gets the larger half when odd).
struct MinibatchSplit {
  std::vector<int> train;
  std::vector<int> val;
};
std::vector<MinibatchSplit> split_minibatches(int samples, int num_minibatch, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Main loop

struct IterationMetrics {
  long long iter = 0;
  long long env_steps = 0;
  std::optional<double> mean_return;
  std::optional<double> mean_ep_len;
  std::optional<double> success_rate;
  double l_enc = 0.0;
  double l_dec = 0.0;
  double entropy = 0.0;
  double grad_norm = 0.0;
  double alpha_drift = 0.0;
  int edges_changed = 0;

  nlohmann::json to_json() const;
};

struct TrainerSetup {
  envs::EnvSpec env;
  ModelDims dims;  // n_agents, obs_dim, classes and action counts are filled from env
  TrainConfig train;
  GraphConfig graph;
  std::uint64_t seed = 0;
};

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0);

// Graph used at execution time for a mode and alpha.
graph::CommGraph execution_graph(GraphMode mode, const Mat<float>& alpha, int k);

class Trainer {
 public:
  explicit Trainer(TrainerSetup setup, int threads = 1);

  IterationMetrics step();

  bool finished() const { return iteration_ >= setup_.train.iterations(); }
  long long iteration() const { return iteration_; }
  long long env_steps() const { return env_steps_; }
  const TrainerSetup& setup() const { return setup_; }
  Learner& learner() { return learner_; }
  const Learner& learner() const { return learner_; }
  int budget() const { return k_; }
  graph::CommGraph current_graph() const;

  // Serialized generator streams (noise, shuffling, environments).
  std::string rng_state() const;
  void set_rng_state(const std::string& s);
  void set_progress(long long iteration, long long env_steps);

 private:
  graph::CommGraph draw_graph(Mat<float>& noise);

  TrainerSetup setup_;
  int threads_ = 1;
  int k_ = 1;
  Learner learner_;
  EnvPool pool_;
  EnvPool val_pool_;
  std::mt19937_64 noise_rng_;
  std::mt19937_64 shuffle_rng_;
  long long iteration_ = 0;
  long long env_steps_ = 0;
};

// ---------------------------------------------------------------------------
// Gradient checking (64-bit)

struct GroupError {
  std::string name;
  double rel_error = 0.0;
  double tolerance = 0.0;
  bool ok() const { return rel_error < tolerance; }
};

struct GradientReport {
  std::vector<GroupError> groups;
  double max_rel_error() const;
  bool ok() const;
};

enum class LossSelector { kEncoder, kDecoder, kTotal };

struct GradientFixture {
  Model<double> model;
  LossBatch<double> batch;
  Mat<double> alpha;
  Mat<double> noise;
  int k = 1;
  double temperature = 1.0;
  LossSettings settings;
};

// Small randomized fixture with ratios kept away from the clip kinks.
GradientFixture make_gradient_fixture(int n_agents, int d_model, int samples, std::uint64_t seed);

// Central differences with step h for every parameter group and for alpha
// through the soft path. Relative error per group is ||g - fd|| / max(||g||, ||fd||).
GradientReport gradient_check(GradientFixture& fx, LossSelector which, double h = 1e-5, double tol = 1e-4,
                              double alpha_tol = 1e-3);

}  // namespace commformer::train
