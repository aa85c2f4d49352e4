#include "training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

namespace commformer::train {

std::string to_string(TargetMode m) { return m == TargetMode::kHard ? "hard" : "ema"; }

std::string to_string(GraphMode m) {
  switch (m) {
    case GraphMode::kLearned: return "learned";
    case GraphMode::kFixedRandom: return "fixed_random";
    case GraphMode::kFullyConnected: return "fully_connected";
    case GraphMode::kDiagonalOnly: return "diagonal_only";
  }
  return "learned";
}

std::string to_string(ValSource v) { return v == ValSource::kSplit ? "split" : "dual"; }

TargetMode parse_target_mode(const std::string& s) {
  if (s == "hard") return TargetMode::kHard;
  if (s == "ema") return TargetMode::kEma;
  throw std::invalid_argument("target mode must be 'hard' or 'ema', got '" + s + "'");
}

GraphMode parse_graph_mode(const std::string& s) {
  if (s == "learned") return GraphMode::kLearned;
  if (s == "fixed_random") return GraphMode::kFixedRandom;
  if (s == "fully_connected") return GraphMode::kFullyConnected;
  if (s == "diagonal_only") return GraphMode::kDiagonalOnly;
  throw std::invalid_argument("graph mode must be learned|fixed_random|fully_connected|diagonal_only, got '" + s +
                              "'");
}

ValSource parse_val_source(const std::string& s) {
  if (s == "split") return ValSource::kSplit;
  if (s == "dual") return ValSource::kDual;
  throw std::invalid_argument("validation source must be 'split' or 'dual', got '" + s + "'");
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
  };
  need(gamma >= 0.0 && gamma < 1.0, "train.gamma must lie in [0, 1)");
  need(gae_lambda >= 0.0 && gae_lambda <= 1.0, "train.gae_lambda must lie in [0, 1]");
  need(clip > 0.0 && clip < 1.0, "train.ppo_clip must lie in (0, 1)");
  need(ppo_epochs >= 1, "train.ppo_epochs must be >= 1");
  need(num_minibatch >= 1, "train.num_minibatch must be >= 1");
  need(entropy_coef >= 0.0, "train.entropy_coef must be >= 0");
  need(max_grad_norm > 0.0, "train.max_grad_norm must be > 0");
  need(critic_lr >= 0.0 && actor_lr >= 0.0, "learning rates must be >= 0");
  need(optim_eps > 0.0, "train.optim_eps must be > 0");
  need(rollout_threads >= 1, "train.rollout_threads must be >= 1");
  need(episode_length >= 1, "train.episode_length must be >= 1");
  need(total_env_steps >= 0, "train.total_env_steps must be >= 0");
  need(target_interval >= 1, "train.target_interval must be >= 1");
  need(ema_rho >= 0.0 && ema_rho <= 1.0, "train.ema_rho must lie in [0, 1]");
  need(huber_delta > 0.0, "train.huber_delta must be > 0");
  const long long per_minibatch = static_cast<long long>(rollout_threads) * episode_length / num_minibatch;
  need(per_minibatch >= 2, "train: each minibatch needs at least 2 samples");
}

long long TrainConfig::steps_per_iteration() const {
  const long long one = static_cast<long long>(rollout_threads) * episode_length;
  return val_source == ValSource::kDual ? 2 * one : one;
}

int TrainConfig::iterations() const { return static_cast<int>(total_env_steps / steps_per_iteration()); }

void GraphConfig::validate() const {
  if (!(sparsity > 0.0 && sparsity <= 1.0)) throw std::invalid_argument("graph.sparsity must lie in (0, 1]");
  if (!(temperature > 0.0)) throw std::invalid_argument("graph.temperature must be > 0");
  if (lr < 0.0) throw std::invalid_argument("graph.lr must be >= 0");
  if (mode == GraphMode::kFixedRandom && !seed) {
    throw std::invalid_argument("graph.mode=fixed_random requires graph.seed");
  }
}

int GraphConfig::budget(int n_agents) const {
  switch (mode) {
    case GraphMode::kFullyConnected: return n_agents;
    case GraphMode::kDiagonalOnly: return 0;
    default: return graph::budget_for_sparsity(sparsity, n_agents);
  }
}

// ---------------------------------------------------------------------------

GaeResult compute_gae(const std::vector<double>& rewards, const std::vector<double>& joint_values,
                      const std::vector<std::uint8_t>& dones, double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (joint_values.size() != n + 1 || dones.size() != n) {
    throw std::invalid_argument("compute_gae: need T rewards, T dones and T + 1 values");
  }
  GaeResult out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double live = dones[t] ? 0.0 : 1.0;
    const double delta = rewards[t] + gamma * joint_values[t + 1] * live - joint_values[t];
    next = delta + gamma * lambda * live * next;
    out.advantages[t] = next;
    out.returns[t] = next + joint_values[t];
  }
  return out;
}

std::vector<double> joint_values(const std::vector<double>& per_agent, int n_agents) {
  if (n_agents < 1 || per_agent.size() % static_cast<std::size_t>(n_agents) != 0) {
    throw std::invalid_argument("joint_values: size is not a multiple of n_agents");
  }
  std::vector<double> out(per_agent.size() / static_cast<std::size_t>(n_agents), 0.0);
  for (std::size_t i = 0; i < per_agent.size(); ++i) out[i / static_cast<std::size_t>(n_agents)] += per_agent[i];
  for (double& v : out) v /= n_agents;
  return out;
}

void normalize(std::vector<double>& x) {
  if (x.empty()) return;
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  const double sd = std::sqrt(var) + 1e-8;
  for (double& v : x) v = (v - mean) / sd;
}

// ---------------------------------------------------------------------------

template <class S>
LossVars<S> record_losses(Tape<S>& t, const Model<S>& model, const std::vector<Var>& enc, const std::vector<Var>& dec,
                          const LossBatch<S>& batch, Var edges, const LossSettings& cfg,
                          const Mat<S>* target_edges) {
  const int n = model.dims().n_agents;
  const int m = batch.samples();
  const auto rows = static_cast<std::size_t>(m) * static_cast<std::size_t>(n);
  if (batch.obs.rows() != static_cast<Eigen::Index>(rows) || batch.next_obs.rows() != batch.obs.rows() ||
      batch.actions.size() != rows || batch.old_log_probs.size() != rows ||
      batch.rewards.size() != static_cast<std::size_t>(m) || batch.dones.size() != static_cast<std::size_t>(m)) {
    throw std::invalid_argument("record_losses: inconsistent batch");
  }

  auto out = model.encode(t, enc, batch.obs, edges);

  // Target branch: frozen weights and a constant copy of the edges.
  Mat<S> target_values;
  {
    const auto pt = model.target().bind_frozen(t);
    Var frozen_edges = target_edges ? t.constant_ref(*target_edges) : t.constant(t.value(edges));
    target_values = t.value(model.encode(t, pt, batch.next_obs, frozen_edges).values);
  }
  std::vector<S> y(rows);
  std::vector<S> adv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t s = r / static_cast<std::size_t>(n);
    const S live = batch.dones[s] ? S(0) : S(1);
    y[r] = batch.rewards[s] + static_cast<S>(cfg.gamma) * live * target_values(static_cast<Eigen::Index>(r), 0);
    adv[r] = batch.advantages[s];
  }

  LossVars<S> lv;
  lv.encoder = ops::regression_loss(t, out.values, std::move(y), static_cast<S>(cfg.huber_delta));

  Var logits = model.decode(t, dec, out.rep, model.slot_tokens(batch.actions), edges);
  auto cat = ops::categorical(t, logits, model.dims().action_counts, batch.actions);
  Var sur = ops::ppo_surrogate(t, cat.log_prob, batch.old_log_probs, adv, static_cast<S>(cfg.clip));
  const Mat<S>& sv = t.value(sur);
  const Mat<S>& lp = t.value(cat.log_prob);
  for (std::size_t r = 0; r < rows; ++r) {
    lv.surrogate.push_back(sv(static_cast<Eigen::Index>(r), 0));
    lv.ratio.push_back(std::exp(lp(static_cast<Eigen::Index>(r), 0) - batch.old_log_probs[r]));
  }
  lv.entropy = ops::mean_all(t, cat.entropy);
  lv.decoder = ops::add(t, ops::scale(t, ops::mean_all(t, sur), S(-1)),
                        ops::scale(t, lv.entropy, static_cast<S>(-cfg.entropy_coef)));
  lv.total = ops::add(t, lv.encoder, lv.decoder);
  return lv;
}

template <class S>
S encoder_loss(const Model<S>& model, const LossBatch<S>& batch, const Mat<S>& edges, const LossSettings& cfg) {
  Tape<S> t;
  auto lv = record_losses(t, model, model.encoder().bind_frozen(t), model.decoder().bind_frozen(t), batch,
                          t.constant_ref(edges), cfg);
  return t.value(lv.encoder)(0, 0);
}

template <class S>
S decoder_loss(const Model<S>& model, const LossBatch<S>& batch, const Mat<S>& edges, const LossSettings& cfg) {
  Tape<S> t;
  auto lv = record_losses(t, model, model.encoder().bind_frozen(t), model.decoder().bind_frozen(t), batch,
                          t.constant_ref(edges), cfg);
  return t.value(lv.decoder)(0, 0);
}

template LossVars<float> record_losses(Tape<float>&, const Model<float>&, const std::vector<Var>&,
                                       const std::vector<Var>&, const LossBatch<float>&, Var, const LossSettings&,
                                       const Mat<float>*);
template LossVars<double> record_losses(Tape<double>&, const Model<double>&, const std::vector<Var>&,
                                        const std::vector<Var>&, const LossBatch<double>&, Var, const LossSettings&,
                                        const Mat<double>*);
template float encoder_loss(const Model<float>&, const LossBatch<float>&, const Mat<float>&, const LossSettings&);
template double encoder_loss(const Model<double>&, const LossBatch<double>&, const Mat<double>&,
                             const LossSettings&);
template float decoder_loss(const Model<float>&, const LossBatch<float>&, const Mat<float>&, const LossSettings&);
template double decoder_loss(const Model<double>&, const LossBatch<double>&, const Mat<double>&,
                             const LossSettings&);

// ---------------------------------------------------------------------------

template <class S>
void Adam<S>::step(std::vector<Param<S>*> params, S grad_scale) {
  if (m.size() != params.size()) {
    m.clear();
    v.clear();
    for (auto* p : params) {
      m.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
      v.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }
  ++steps;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
  const S b1 = static_cast<S>(beta1), b2 = static_cast<S>(beta2);
  const S step_size = static_cast<S>(lr / bc1);
  const S inv_bc2 = static_cast<S>(1.0 / bc2);
  const S e = static_cast<S>(eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param<S>& p = *params[i];
    if (p.grad.size() != p.value.size()) continue;
    const Mat<S> g = p.grad * grad_scale;
    m[i] = b1 * m[i] + (S(1) - b1) * g;
    v[i] = b2 * v[i] + (S(1) - b2) * g.cwiseProduct(g);
    p.value.array() -= step_size * m[i].array() / ((v[i].array() * inv_bc2).sqrt() + e);
  }
}

template struct Adam<float>;
template struct Adam<double>;

double clip_coefficient(double norm, double max_norm) { return norm > max_norm ? max_norm / norm : 1.0; }

namespace {

LossSettings settings_from(const TrainConfig& cfg) {
  LossSettings s;
  s.gamma = cfg.gamma;
  s.clip = cfg.clip;
  s.entropy_coef = cfg.entropy_coef;
  s.huber_delta = cfg.use_huber ? cfg.huber_delta : 0.0;
  return s;
}

std::vector<Param<float>*> pointers(ParamSet<float>& set) {
  std::vector<Param<float>*> out;
  for (auto& p : set.all()) out.push_back(&p);
  return out;
}

void check_finite(double value, const char* what, const StepStats& st) {
  if (!std::isfinite(value)) {
    std::ostringstream os;
    os << "non-finite " << what << " (L_enc=" << st.l_enc << ", L_dec=" << st.l_dec << ", entropy=" << st.entropy
       << ", grad_norm=" << st.grad_norm << ")";
    throw NonFiniteError(os.str());
  }
}

template <class S>
StepStats read_stats(const Tape<S>& t, const LossVars<S>& lv) {
  StepStats st;
  st.l_enc = static_cast<double>(t.value(lv.encoder)(0, 0));
  st.l_dec = static_cast<double>(t.value(lv.decoder)(0, 0));
  st.entropy = static_cast<double>(t.value(lv.entropy)(0, 0));
  return st;
}

}  // namespace

StepStats inner_step(Learner& learner, const LossBatch<float>& batch, const graph::CommGraph& graph,
                     const TrainConfig& cfg) {
  auto& model = learner.model;
  model.encoder().zero_grad();
  model.decoder().zero_grad();
  Tape<float> t;
  const auto pe = model.encoder().bind(t, true);
  const auto pd = model.decoder().bind(t, true);
  const Mat<float> edges = graph::edge_values<float>(graph);
  auto lv = record_losses(t, model, pe, pd, batch, t.constant_ref(edges), settings_from(cfg));
  StepStats st = read_stats(t, lv);
  check_finite(t.value(lv.total)(0, 0), "training loss", st);
  t.backward(lv.total);
  st.grad_norm = std::hypot(grad_norm(model.encoder()), grad_norm(model.decoder()));
  check_finite(st.grad_norm, "gradient norm", st);
  const auto coef = static_cast<float>(clip_coefficient(st.grad_norm, cfg.max_grad_norm));
  learner.enc_opt.step(pointers(model.encoder()), coef);
  learner.dec_opt.step(pointers(model.decoder()), coef);
  ++learner.optimizer_steps;
  target_update(model, learner.optimizer_steps, cfg);
  return st;
}

StepStats outer_step(Learner& learner, const LossBatch<float>& batch, const graph::CommGraph& graph,
                     const Mat<float>& noise, const TrainConfig& cfg, const GraphConfig& gcfg) {
  const auto& model = learner.model;
  Tape<float> t;
  const auto pe = model.encoder().bind_frozen(t);
  const auto pd = model.decoder().bind_frozen(t);
  const Mat<float> edges = graph::edge_values<float>(graph);
  Mat<float> d_edges = Mat<float>::Zero(edges.rows(), edges.cols());
  auto lv = record_losses(t, model, pe, pd, batch, t.external(edges, &d_edges), settings_from(cfg));
  StepStats st = read_stats(t, lv);
  check_finite(t.value(lv.total)(0, 0), "validation loss", st);
  t.backward(lv.total);
  const auto relaxed =
      graph::relax_graph<float>(learner.alpha.value, graph.k, noise, static_cast<float>(gcfg.temperature));
  learner.alpha.grad = graph::straight_through_grad(relaxed, d_edges);
  st.grad_norm = learner.alpha.grad.cast<double>().norm();
  check_finite(st.grad_norm, "alpha gradient norm", st);
  learner.alpha_opt.step({&learner.alpha}, static_cast<float>(clip_coefficient(st.grad_norm, cfg.max_grad_norm)));
  return st;
}

void target_update(Model<float>& model, long long optimizer_steps, const TrainConfig& cfg) {
  if (cfg.target_mode == TargetMode::kHard) {
    if (optimizer_steps % cfg.target_interval == 0) model.sync_target();
  } else {
    model.ema_target(static_cast<float>(cfg.ema_rho));
  }
}

// ---------------------------------------------------------------------------

LossBatch<float> Rollout::gather(const std::vector<int>& sample_idx) const {
  LossBatch<float> b;
  const auto m = static_cast<Eigen::Index>(sample_idx.size());
  b.obs.resize(m * n_agents, obs_dim);
  b.next_obs.resize(m * n_agents, obs_dim);
  for (Eigen::Index k = 0; k < m; ++k) {
    const int s = sample_idx[static_cast<std::size_t>(k)];
    if (s < 0 || s >= samples()) throw std::out_of_range("Rollout::gather: sample index out of range");
    for (int i = 0; i < n_agents; ++i) {
      const std::size_t src = (static_cast<std::size_t>(s) * n_agents + i) * obs_dim;
      const Eigen::Index row = k * n_agents + i;
      for (int c = 0; c < obs_dim; ++c) {
        b.obs(row, c) = obs[src + static_cast<std::size_t>(c)];
        b.next_obs(row, c) = next_obs[src + static_cast<std::size_t>(c)];
      }
      b.actions.push_back(actions[static_cast<std::size_t>(s) * n_agents + i]);
      b.old_log_probs.push_back(log_probs[static_cast<std::size_t>(s) * n_agents + i]);
    }
    b.advantages.push_back(advantages[static_cast<std::size_t>(s)]);
    b.rewards.push_back(rewards[static_cast<std::size_t>(s)]);
    b.dones.push_back(dones[static_cast<std::size_t>(s)]);
  }
  return b;
}

EnvPool::EnvPool(const envs::EnvSpec& spec, int n_envs, std::uint64_t seed) {
  if (n_envs < 1) throw std::invalid_argument("EnvPool: need at least one environment");
  for (int b = 0; b < n_envs; ++b) {
    envs_.emplace_back(spec);
    envs_.back().reset(derive_seed(seed, 0, static_cast<std::uint64_t>(b)));
    action_rngs_.emplace_back(derive_seed(seed, 1, static_cast<std::uint64_t>(b)));
  }
  episode_return_.assign(static_cast<std::size_t>(n_envs), 0.0);
  episode_length_.assign(static_cast<std::size_t>(n_envs), 0);
}

Rollout EnvPool::collect(const Model<float>& model, const Mat<float>& edges, int length, int threads,
                         EpisodeStats& stats) {
  const int n_envs = size();
  const auto& sp = spec();
  const int n = sp.n_agents;
  const int od = sp.obs_dim();
  Rollout r;
  r.n_envs = n_envs;
  r.length = length;
  r.n_agents = n;
  r.obs_dim = od;
  const std::size_t total_rows = static_cast<std::size_t>(length) * n_envs * n;
  r.obs.resize(total_rows * od);
  r.next_obs.resize(total_rows * od);
  r.actions.resize(total_rows);
  r.log_probs.resize(total_rows);
  r.values.resize(total_rows);
  r.rewards.resize(static_cast<std::size_t>(length) * n_envs);
  r.dones.resize(static_cast<std::size_t>(length) * n_envs);
  r.bootstrap.resize(static_cast<std::size_t>(n_envs) * n);

  const int workers = std::clamp(threads, 1, n_envs);
  std::vector<EpisodeStats> worker_stats(static_cast<std::size_t>(workers));

  auto run_chunk = [&](int w, int t) {
    const int lo = n_envs * w / workers;
    const int hi = n_envs * (w + 1) / workers;
    const int count = hi - lo;
    Mat<float> obs(count * n, od);
    for (int b = lo; b < hi; ++b) {
      const auto o = envs_[static_cast<std::size_t>(b)].observations();
      for (int i = 0; i < n; ++i) {
        for (int c = 0; c < od; ++c) {
          obs((b - lo) * n + i, c) = static_cast<float>(o[static_cast<std::size_t>(i * od + c)]);
        }
      }
    }
    auto seq = model.act(obs, edges, ActMode::kSample,
                         std::span<std::mt19937_64>(action_rngs_.data() + lo, static_cast<std::size_t>(count)));
    for (int b = lo; b < hi; ++b) {
      const std::size_t s = static_cast<std::size_t>(t) * n_envs + b;
      auto& env = envs_[static_cast<std::size_t>(b)];
      std::vector<int> joint(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        const std::size_t src = static_cast<std::size_t>((b - lo) * n + i);
        const std::size_t dst = s * n + i;
        joint[static_cast<std::size_t>(i)] = seq.actions[src];
        r.actions[dst] = seq.actions[src];
        r.log_probs[dst] = seq.log_probs[src];
        r.values[dst] = seq.values[src];
        for (int c = 0; c < od; ++c) r.obs[dst * od + c] = obs((b - lo) * n + i, c);
      }
      const auto res = env.step(joint);
      const auto next = env.observations();
      for (std::size_t j = 0; j < next.size(); ++j) r.next_obs[s * n * od + j] = static_cast<float>(next[j]);
      r.rewards[s] = static_cast<float>(res.reward);
      r.dones[s] = res.done ? 1 : 0;
      episode_return_[static_cast<std::size_t>(b)] += res.reward;
      episode_length_[static_cast<std::size_t>(b)] += 1;
      if (res.done) {
        auto& st = worker_stats[static_cast<std::size_t>(w)];
        st.episodes += 1;
        st.return_sum += episode_return_[static_cast<std::size_t>(b)];
        st.length_sum += episode_length_[static_cast<std::size_t>(b)];
        st.successes += res.success ? 1 : 0;
        episode_return_[static_cast<std::size_t>(b)] = 0.0;
        episode_length_[static_cast<std::size_t>(b)] = 0;
        env.reset();
      }
    }
  };

  for (int t = 0; t < length; ++t) {
    if (workers == 1) {
      run_chunk(0, t);
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < workers; ++w) pool.emplace_back(run_chunk, w, t);
      for (auto& th : pool) th.join();
    }
  }
  for (const auto& st : worker_stats) {
    stats.episodes += st.episodes;
    stats.return_sum += st.return_sum;
    stats.length_sum += st.length_sum;
    stats.successes += st.successes;
  }

  Mat<float> last(n_envs * n, od);
  for (int b = 0; b < n_envs; ++b) {
    const auto o = envs_[static_cast<std::size_t>(b)].observations();
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < od; ++c) last(b * n + i, c) = static_cast<float>(o[static_cast<std::size_t>(i * od + c)]);
    }
  }
  const Mat<float> v = model.encode_values(last, edges);
  for (int row = 0; row < n_envs * n; ++row) r.bootstrap[static_cast<std::size_t>(row)] = v(row, 0);
  return r;
}

std::string EnvPool::rng_state() const {
  std::ostringstream os;
  for (const auto& g : action_rngs_) os << g << '\n';
  return os.str();
}

void EnvPool::set_rng_state(const std::string& s) {
  std::istringstream is(s);
  for (auto& g : action_rngs_) is >> g;
  if (!is) throw std::invalid_argument("EnvPool: malformed generator state");
}

void compute_advantages(Rollout& r, const TrainConfig& cfg) {
  const int n = r.n_agents;
  const int B = r.n_envs;
  const int T = r.length;
  r.advantages.assign(static_cast<std::size_t>(B) * T, 0.0f);
  r.returns.assign(static_cast<std::size_t>(B) * T, 0.0f);
  std::vector<double> all_adv(static_cast<std::size_t>(B) * T);
  for (int b = 0; b < B; ++b) {
    std::vector<double> per_agent;
    std::vector<double> rewards;
    std::vector<std::uint8_t> dones;
    for (int t = 0; t < T; ++t) {
      const std::size_t s = static_cast<std::size_t>(t) * B + b;
      for (int i = 0; i < n; ++i) per_agent.push_back(r.values[s * n + i]);
      rewards.push_back(r.rewards[s]);
      dones.push_back(r.dones[s]);
    }
    for (int i = 0; i < n; ++i) per_agent.push_back(r.bootstrap[static_cast<std::size_t>(b) * n + i]);
    const auto jv = joint_values(per_agent, n);
    const auto gae = compute_gae(rewards, jv, dones, cfg.gamma, cfg.use_gae ? cfg.gae_lambda : 1.0);
    for (int t = 0; t < T; ++t) {
      const std::size_t s = static_cast<std::size_t>(t) * B + b;
      all_adv[s] = gae.advantages[static_cast<std::size_t>(t)];
      r.returns[s] = static_cast<float>(gae.returns[static_cast<std::size_t>(t)]);
    }
  }
  if (cfg.normalize_advantages) normalize(all_adv);
  for (std::size_t s = 0; s < all_adv.size(); ++s) r.advantages[s] = static_cast<float>(all_adv[s]);
}

std::vector<MinibatchSplit> split_minibatches(int samples, int num_minibatch, std::mt19937_64& rng) {
  if (samples < 2 * num_minibatch || num_minibatch < 1) {
    throw std::invalid_argument("split_minibatches: too few samples for the minibatch count");
  }
  std::vector<int> perm(static_cast<std::size_t>(samples));
  std::iota(perm.begin(), perm.end(), 0);
  // Fisher-Yates with an explicit distribution so the order is portable.
  for (int i = samples - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
  }
  std::vector<MinibatchSplit> out;
  for (int c = 0; c < num_minibatch; ++c) {
    const int lo = samples * c / num_minibatch;
    const int hi = samples * (c + 1) / num_minibatch;
    const int half = (hi - lo) / 2;
    MinibatchSplit split;
    split.train.assign(perm.begin() + lo, perm.begin() + lo + half);
    split.val.assign(perm.begin() + lo + half, perm.begin() + hi);
    out.push_back(std::move(split));
  }
  return out;
}

// ---------------------------------------------------------------------------

nlohmann::json IterationMetrics::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["iter"] = iter;
  j["env_steps"] = env_steps;
  j["mean_return"] = opt(mean_return);
  j["mean_ep_len"] = opt(mean_ep_len);
  j["success_rate"] = opt(success_rate);
  j["L_enc"] = l_enc;
  j["L_dec"] = l_dec;
  j["entropy"] = entropy;
  j["grad_norm"] = grad_norm;
  j["alpha_drift"] = alpha_drift;
  j["edges_changed"] = edges_changed;
  return j;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(master) ^ (stream + 1) * 0xD1B54A32D192ED03ull) ^ (index + 1) * 0x8CB92BA72F3D8DD7ull);
}

graph::CommGraph execution_graph(GraphMode mode, const Mat<float>& alpha, int k) {
  const int n = static_cast<int>(alpha.rows());
  switch (mode) {
    case GraphMode::kFullyConnected: return graph::fully_connected(n);
    case GraphMode::kDiagonalOnly: return graph::diagonal_only(n);
    default: return graph::infer_graph(alpha, k);
  }
}

Trainer::Trainer(TrainerSetup setup, int threads) : setup_(std::move(setup)), threads_(std::max(1, threads)) {
  setup_.env.validate();
  setup_.train.validate();
  setup_.graph.validate();
  auto& d = setup_.dims;
  d.n_agents = setup_.env.n_agents;
  d.obs_dim = setup_.env.obs_dim();
  d.agent_class = setup_.env.class_ids();
  d.action_counts = setup_.env.action_counts();
  d.validate();
  const int n = d.n_agents;
  k_ = setup_.graph.budget(n);

  learner_.model = Model<float>(d, derive_seed(setup_.seed, 1));
  learner_.alpha.name = "alpha";
  const std::uint64_t alpha_seed =
      setup_.graph.mode == GraphMode::kFixedRandom ? *setup_.graph.seed : derive_seed(setup_.seed, 2);
  learner_.alpha.value = graph::init_adjacency<float>(n, alpha_seed);
  learner_.alpha.zero_grad();
  const auto& tc = setup_.train;
  learner_.enc_opt.lr = tc.critic_lr;
  learner_.dec_opt.lr = tc.actor_lr;
  learner_.alpha_opt.lr = setup_.graph.lr;
  learner_.enc_opt.eps = learner_.dec_opt.eps = learner_.alpha_opt.eps = tc.optim_eps;

  pool_ = EnvPool(setup_.env, tc.rollout_threads, derive_seed(setup_.seed, 3));
  if (tc.val_source == ValSource::kDual) val_pool_ = EnvPool(setup_.env, tc.rollout_threads, derive_seed(setup_.seed, 4));
  noise_rng_.seed(derive_seed(setup_.seed, 5));
  shuffle_rng_.seed(derive_seed(setup_.seed, 6));
}

graph::CommGraph Trainer::current_graph() const {
  return execution_graph(setup_.graph.mode, learner_.alpha.value, k_);
}

graph::CommGraph Trainer::draw_graph(Mat<float>& noise) {
  const int n = setup_.dims.n_agents;
  if (setup_.graph.mode != GraphMode::kLearned) {
    noise = Mat<float>::Zero(n, n);
    return current_graph();
  }
  noise = graph::gumbel_noise<float>(n, noise_rng_);
  return graph::sample_graph(learner_.alpha.value, k_, noise);
}

IterationMetrics Trainer::step() {
  const auto& tc = setup_.train;
  const bool learned = setup_.graph.mode == GraphMode::kLearned;
  const Mat<float> alpha_before = learner_.alpha.value;
  const auto graph_before = current_graph();

  Mat<float> noise;
  const auto g = draw_graph(noise);
  const Mat<float> edges = graph::edge_values<float>(g);

  EpisodeStats episodes;
  Rollout rollout = pool_.collect(learner_.model, edges, tc.episode_length, threads_, episodes);
  compute_advantages(rollout, tc);
  Rollout val_rollout;
  if (tc.val_source == ValSource::kDual) {
    EpisodeStats ignored;
    val_rollout = val_pool_.collect(learner_.model, edges, tc.episode_length, threads_, ignored);
    compute_advantages(val_rollout, tc);
  }
  env_steps_ += tc.steps_per_iteration();

  IterationMetrics met;
  int inner_count = 0;
  for (int epoch = 0; epoch < tc.ppo_epochs; ++epoch) {
    auto splits = split_minibatches(rollout.samples(), tc.num_minibatch, shuffle_rng_);
    std::vector<MinibatchSplit> val_splits;
    if (tc.val_source == ValSource::kDual) val_splits = split_minibatches(val_rollout.samples(), tc.num_minibatch, shuffle_rng_);
    for (std::size_t c = 0; c < splits.size(); ++c) {
      auto& sp = splits[c];
      if (tc.val_source == ValSource::kDual) {
        // Every collected sample trains; validation comes from the second stream.
        sp.train.insert(sp.train.end(), sp.val.begin(), sp.val.end());
      }
      const auto st = inner_step(learner_, rollout.gather(sp.train), g, tc);
      met.l_enc += st.l_enc;
      met.l_dec += st.l_dec;
      met.entropy += st.entropy;
      met.grad_norm += st.grad_norm;
      ++inner_count;
      if (learned) {
        if (tc.val_source == ValSource::kDual) {
          auto& vs = val_splits[c];
          vs.val.insert(vs.val.end(), vs.train.begin(), vs.train.end());
          outer_step(learner_, val_rollout.gather(vs.val), g, noise, tc, setup_.graph);
        } else {
          outer_step(learner_, rollout.gather(sp.val), g, noise, tc, setup_.graph);
        }
      }
    }
  }
  if (inner_count > 0) {
    met.l_enc /= inner_count;
    met.l_dec /= inner_count;
    met.entropy /= inner_count;
    met.grad_norm /= inner_count;
  }
  ++iteration_;
  met.iter = iteration_;
  met.env_steps = env_steps_;
  if (episodes.episodes > 0) {
    met.mean_return = episodes.return_sum / episodes.episodes;
    met.mean_ep_len = episodes.length_sum / episodes.episodes;
    met.success_rate = static_cast<double>(episodes.successes) / episodes.episodes;
  }
  met.alpha_drift = static_cast<double>((learner_.alpha.value - alpha_before).cwiseAbs().sum());
  met.edges_changed = graph::hamming(current_graph(), graph_before);
  return met;
}

std::string Trainer::rng_state() const {
  std::ostringstream os;
  os << noise_rng_ << '\n' << shuffle_rng_ << '\n' << pool_.rng_state();
  return os.str();
}

void Trainer::set_rng_state(const std::string& s) {
  std::istringstream is(s);
  is >> noise_rng_ >> shuffle_rng_;
  if (!is) throw std::invalid_argument("Trainer: malformed generator state");
  std::string rest((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  pool_.set_rng_state(rest);
}

void Trainer::set_progress(long long iteration, long long env_steps) {
  iteration_ = iteration;
  env_steps_ = env_steps;
}

// ---------------------------------------------------------------------------

double GradientReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& g : groups) m = std::max(m, g.rel_error);
  return m;
}

bool GradientReport::ok() const {
  return std::all_of(groups.begin(), groups.end(), [](const GroupError& g) { return g.ok(); });
}

GradientFixture make_gradient_fixture(int n_agents, int d_model, int samples, std::uint64_t seed) {
  if (n_agents < 2) throw std::invalid_argument("make_gradient_fixture: need at least two agents");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ModelDims dims;
  dims.n_agents = n_agents;
  dims.obs_dim = 5;
  dims.agent_class.assign(static_cast<std::size_t>(n_agents), 0);
  dims.agent_class.back() = 1;
  dims.action_counts.assign(static_cast<std::size_t>(n_agents), 5);
  dims.action_counts.back() = 6;
  dims.d_model = d_model;
  dims.n_heads = d_model % 2 == 0 ? 2 : 1;
  dims.head_gain = 1.0;

  GradientFixture fx;
  fx.model = Model<double>(dims, seed);
  // Move every weight off its structured init so no gradient is trivially zero.
  for (auto* set : {&fx.model.encoder(), &fx.model.decoder(), &fx.model.target()}) {
    for (auto& p : set->all()) {
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += 0.2 * normal(rng);
    }
  }

  const int n = n_agents;
  auto& b = fx.batch;
  b.obs.resize(samples * n, dims.obs_dim);
  b.next_obs.resize(samples * n, dims.obs_dim);
  for (Eigen::Index i = 0; i < b.obs.size(); ++i) {
    b.obs.data()[i] = normal(rng);
    b.next_obs.data()[i] = normal(rng);
  }
  for (int s = 0; s < samples; ++s) {
    for (int i = 0; i < n; ++i) {
      std::uniform_int_distribution<int> act(0, dims.action_counts[static_cast<std::size_t>(i)] - 1);
      b.actions.push_back(act(rng));
    }
    b.advantages.push_back(normal(rng));
    b.rewards.push_back(0.1 * normal(rng));
    b.dones.push_back(s % 3 == 2 ? 1 : 0);
  }

  fx.k = n - 1;
  fx.temperature = 0.7;
  fx.alpha.resize(n, n);
  for (Eigen::Index i = 0; i < fx.alpha.size(); ++i) fx.alpha.data()[i] = 0.5 * normal(rng);
  fx.noise = graph::gumbel_noise<double>(n, rng);
  fx.settings.gamma = 0.9;
  fx.settings.clip = 0.2;
  fx.settings.entropy_coef = 0.05;

  // Old log-probs offset from the current ones so that ratios sit either well
  // inside the clip band or well outside it.
  const auto relaxed = graph::relax_graph<double>(fx.alpha, fx.k, fx.noise, fx.temperature);
  const Mat<double> edges = graph::edge_values<double>(relaxed.hard);
  const auto eval = fx.model.evaluate_actions(b.obs, b.actions, edges);
  const double offsets[] = {0.03, -0.03, 0.5, -0.5};
  for (std::size_t r = 0; r < eval.log_probs.size(); ++r) b.old_log_probs.push_back(eval.log_probs[r] + offsets[r % 4]);
  return fx;
}

namespace {

double selected_value(const Tape<double>& t, const LossVars<double>& lv, LossSelector which) {
  switch (which) {
    case LossSelector::kEncoder: return t.value(lv.encoder)(0, 0);
    case LossSelector::kDecoder: return t.value(lv.decoder)(0, 0);
    default: return t.value(lv.total)(0, 0);
  }
}

Var selected_var(const LossVars<double>& lv, LossSelector which) {
  switch (which) {
    case LossSelector::kEncoder: return lv.encoder;
    case LossSelector::kDecoder: return lv.decoder;
    default: return lv.total;
  }
}

double relative_error(const Mat<double>& a, const Mat<double>& b) {
  const double denom = std::max({a.norm(), b.norm(), 1e-8});
  return (a - b).norm() / denom;
}

}  // namespace

GradientReport gradient_check(GradientFixture& fx, LossSelector which, double h, double tol, double alpha_tol) {
  auto& model = fx.model;
  const auto base = graph::relax_graph<double>(fx.alpha, fx.k, fx.noise, fx.temperature);
  const Mat<double> hard = graph::edge_values<double>(base.hard);

  // The target branch stays on the hard graph; it carries no gradient.
  auto loss_at = [&](const Mat<double>& edges) {
    Tape<double> t;
    auto lv = record_losses(t, model, model.encoder().bind_frozen(t), model.decoder().bind_frozen(t), fx.batch,
                            t.constant_ref(edges), fx.settings, &hard);
    return selected_value(t, lv, which);
  };

  model.encoder().zero_grad();
  model.decoder().zero_grad();
  Mat<double> d_edges = Mat<double>::Zero(hard.rows(), hard.cols());
  {
    Tape<double> t;
    const auto pe = model.encoder().bind(t, true);
    const auto pd = model.decoder().bind(t, true);
    auto lv = record_losses(t, model, pe, pd, fx.batch, t.external(hard, &d_edges), fx.settings);
    t.backward(selected_var(lv, which));
  }

  GradientReport report;
  for (auto* set : {&model.encoder(), &model.decoder()}) {
    for (auto& p : set->all()) {
      Mat<double> fd(p.value.rows(), p.value.cols());
      for (Eigen::Index i = 0; i < p.value.size(); ++i) {
        const double keep = p.value.data()[i];
        p.value.data()[i] = keep + h;
        const double up = loss_at(hard);
        p.value.data()[i] = keep - h;
        const double down = loss_at(hard);
        p.value.data()[i] = keep;
        fd.data()[i] = (up - down) / (2.0 * h);
      }
      report.groups.push_back({p.name, relative_error(p.grad, fd), tol});
    }
  }

  // Alpha enters only through the soft rows: edges(alpha) = hard + soft(alpha) - soft(alpha0).
  const Mat<double> analytic = graph::straight_through_grad(base, d_edges);
  Mat<double> fd(fx.alpha.rows(), fx.alpha.cols());
  for (Eigen::Index i = 0; i < fx.alpha.size(); ++i) {
    Mat<double> a = fx.alpha;
    a.data()[i] += h;
    const double up = loss_at(hard + graph::relax_graph<double>(a, fx.k, fx.noise, fx.temperature).soft - base.soft);
    a.data()[i] -= 2.0 * h;
    const double down =
        loss_at(hard + graph::relax_graph<double>(a, fx.k, fx.noise, fx.temperature).soft - base.soft);
    fd.data()[i] = (up - down) / (2.0 * h);
  }
  report.groups.push_back({"alpha", relative_error(analytic, fd), alpha_tol});
  return report;
}

}  // namespace commformer::train
