#pragma once

// Property probes shared by the unit tests and the acceptance runner.

#include "comm_graph.hpp"
#include "model.hpp"
#include "ops.hpp"
#include "training.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace probes {

using commformer::Mat;

inline commformer::ModelDims small_dims(int n, int d, int obs_dim, int heads = 1, double gain = 1.0) {
  commformer::ModelDims dims;
  dims.n_agents = n;
  dims.obs_dim = obs_dim;
  dims.agent_class.assign(static_cast<std::size_t>(n), 0);
  dims.action_counts.assign(static_cast<std::size_t>(n), 5);
  dims.d_model = d;
  dims.n_heads = heads;
  dims.n_blocks = 1;
  dims.head_gain = gain;
  return dims;
}

inline Mat<double> random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> z(0.0, scale);
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = z(rng);
  return m;
}

inline commformer::graph::CommGraph random_graph(int n, std::mt19937_64& rng) {
  commformer::graph::CommGraph g;
  const int k = std::uniform_int_distribution<int>(1, n)(rng);
  g.k = k;
  g.edges.setZero(n, n);
  std::bernoulli_distribution coin(0.5);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) g.edges(i, j) = coin(rng) ? 1 : 0;
  }
  return g;
}

// Plain scaled dot-product attention per head, softmax over unmasked keys.
inline Mat<double> plain_attention(const Mat<double>& x, const Mat<double>& wq, const Mat<double>& wk,
                                   const Mat<double>& wv, int n, int heads) {
  const Mat<double> q = x * wq, k = x * wk, v = x * wv;
  const Eigen::Index d = x.cols(), dh = d / heads;
  Mat<double> out = Mat<double>::Zero(x.rows(), d);
  for (Eigen::Index b = 0; b < x.rows() / n; ++b) {
    for (int i = 0; i < n; ++i) {
      for (int h = 0; h < heads; ++h) {
        std::vector<double> s(static_cast<std::size_t>(n));
        double mx = -1e300;
        for (int j = 0; j < n; ++j) {
          s[static_cast<std::size_t>(j)] =
              q.row(b * n + i).segment(h * dh, dh).dot(k.row(b * n + j).segment(h * dh, dh)) / std::sqrt(double(dh));
          mx = std::max(mx, s[static_cast<std::size_t>(j)]);
        }
        double z = 0;
        for (double& e : s) z += (e = std::exp(e - mx));
        for (int j = 0; j < n; ++j) {
          out.block(b * n + i, h * dh, 1, dh) += (s[static_cast<std::size_t>(j)] / z) * v.block(b * n + j, h * dh, 1, dh);
        }
      }
    }
  }
  return out;
}

// Relation-enhanced attention with the given table and edges, evaluated on a tape.
inline Mat<double> relation_attention_value(const Mat<double>& x, const Mat<double>& edges, const Mat<double>& table,
                                            const Mat<double>& wq, const Mat<double>& wk, const Mat<double>& wv,
                                            int n, int heads, bool causal = false) {
  commformer::Tape<double> t;
  commformer::ops::AttentionInputs<double> in;
  in.xq = in.xkv = t.constant_ref(x);
  in.edges = t.constant_ref(edges);
  in.table = t.constant_ref(table);
  in.wq = t.constant_ref(wq);
  in.wk = t.constant_ref(wk);
  in.wv = t.constant_ref(wv);
  return t.value(commformer::ops::relation_attention(t, in, {n, heads, causal}));
}

// Max |difference| between relation attention with a zero edge table on a full graph and
// plain dot-product attention over `trials` random inputs.
inline double zero_table_gap(int trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int n = 2 + t % 4;
    const int heads = 1 + t % 2;
    const int d = 8;
    const auto x = random_matrix(3 * n, d, rng);
    const auto wq = random_matrix(d, d, rng), wk = random_matrix(d, d, rng), wv = random_matrix(d, d, rng);
    const Mat<double> ones = Mat<double>::Ones(n, n);
    const auto a = relation_attention_value(x, ones, Mat<double>::Zero(2, d), wq, wk, wv, n, heads);
    const auto b = plain_attention(x, wq, wk, wv, n, heads);
    worst = std::max(worst, (a - b).cwiseAbs().maxCoeff());
  }
  return worst;
}

struct IsolationResult {
  int probes = 0;       // perturbations applied
  int violations = 0;   // value, logit or greedy-action changes
  int causal_checks = 0;
  int causal_violations = 0;
};

// For `graphs` random graphs at N agents: perturbing agent j's observation
// with e_{j->i} = 0 (j != i) must leave agent i's value, logits (given the
// same prior actions) and greedy action bitwise unchanged; changing actions of
// agents m' >= m must leave slot m's logits unchanged.
inline IsolationResult isolation_probe(int graphs, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  IsolationResult res;
  const int obs_dim = 7, d = 16, batch = 3;
  for (int g = 0; g < graphs; ++g) {
    auto dims = small_dims(n, d, obs_dim, 2, 1.0);
    dims.n_heads = 1 + g % 2;
    commformer::Model<double> model(dims, seed + static_cast<std::uint64_t>(g));
    for (auto* set : {&model.encoder(), &model.decoder()}) {
      for (auto& p : set->all()) p.value += random_matrix(p.value.rows(), p.value.cols(), rng, 0.3);
    }
    const auto graph = random_graph(n, rng);
    const Mat<double> edges = commformer::graph::edge_values<double>(graph);
    const auto obs = random_matrix(batch * n, obs_dim, rng);
    std::vector<int> actions(static_cast<std::size_t>(batch * n));
    for (auto& a : actions) a = std::uniform_int_distribution<int>(0, 4)(rng);

    const Mat<double> v0 = model.encode_values(obs, edges);
    const Mat<double> l0 = model.decode_logits(model.encode_rep(obs, edges), actions, edges);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (i == j || graph.edges(i, j) != 0) continue;
        Mat<double> o1 = obs;
        for (int b = 0; b < batch; ++b) o1.row(b * n + j) += random_matrix(1, obs_dim, rng, 2.0);
        const Mat<double> v1 = model.encode_values(o1, edges);
        const Mat<double> l1 = model.decode_logits(model.encode_rep(o1, edges), actions, edges);
        ++res.probes;
        bool bad = false;
        for (int b = 0; b < batch; ++b) {
          const Eigen::Index r = b * n + i;
          if (v1(r, 0) != v0(r, 0)) bad = true;
          if (l1.row(r) != l0.row(r)) bad = true;
          Eigen::Index a0 = 0, a1 = 0;
          l0.row(r).head(5).maxCoeff(&a0);
          l1.row(r).head(5).maxCoeff(&a1);
          if (a0 != a1) bad = true;
        }
        if (bad) ++res.violations;
      }
    }
    const Mat<double> rep = model.encode_rep(obs, edges);
    for (int m = 0; m < n; ++m) {
      auto changed = actions;
      for (int b = 0; b < batch; ++b) {
        for (int mm = m; mm < n; ++mm) {
          auto& a = changed[static_cast<std::size_t>(b * n + mm)];
          a = (a + 1 + std::uniform_int_distribution<int>(0, 3)(rng)) % 5;
        }
      }
      const Mat<double> l1 = model.decode_logits(rep, changed, edges);
      ++res.causal_checks;
      bool bad = false;
      for (int b = 0; b < batch; ++b) {
        for (int mm = 0; mm <= m; ++mm) {
          if (l1.row(b * n + mm) != l0.row(b * n + mm)) bad = true;
        }
      }
      if (bad) ++res.causal_violations;
    }
  }
  return res;
}

}  // namespace probes

namespace probes {

inline std::uint64_t hash_bytes(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t hash_matrix(const Mat<float>& m, std::uint64_t h = 0xcbf29ce484222325ull) {
  return hash_bytes(m.data(), sizeof(float) * static_cast<std::size_t>(m.size()), h);
}

inline std::uint64_t hash_set(const commformer::ParamSet<float>& s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (const auto& p : s.all()) h = hash_matrix(p.value, h);
  return h;
}

inline std::uint64_t hash_model(const commformer::Model<float>& m) {
  return hash_set(m.target(), hash_set(m.decoder(), hash_set(m.encoder())));
}

inline commformer::train::TrainerSetup tiny_setup(std::uint64_t seed, commformer::train::GraphMode mode,
                                                  double sparsity = 0.67) {
  commformer::train::TrainerSetup s;
  s.env = commformer::envs::pp_spec(3, 5, 1, 20);
  s.dims.d_model = 8;
  s.train.rollout_threads = 4;
  s.train.episode_length = 16;
  s.train.total_env_steps = 4 * 16 * 3;
  s.train.ppo_epochs = 2;
  s.train.actor_lr = s.train.critic_lr = 1e-3;
  s.train.target_interval = 3;
  s.graph.mode = mode;
  s.graph.sparsity = sparsity;
  s.graph.lr = 1e-2;
  if (mode == commformer::train::GraphMode::kFixedRandom) s.graph.seed = 3;
  s.seed = seed;
  return s;
}

struct BilevelResult {
  int steps = 0;
  int inner_touched_alpha = 0;   // must stay 0
  int outer_touched_model = 0;   // must stay 0
  int inner_moved_model = 0;     // should be > 0 (non-vacuous)
  int outer_moved_alpha = 0;     // should be > 0 (non-vacuous)
};

// Alternating inner / outer steps on a real rollout with parameter hashes
// taken around every step.
inline BilevelResult bilevel_probe(int steps, std::uint64_t seed) {
  using namespace commformer;
  using namespace commformer::train;
  const auto setup = tiny_setup(seed, GraphMode::kLearned);
  Trainer trainer(setup, 1);
  Learner& l = trainer.learner();
  const int n = setup.env.n_agents;
  const int k = trainer.budget();
  EnvPool pool(setup.env, 4, seed + 1);
  EpisodeStats stats;
  Rollout roll = pool.collect(l.model, graph::edge_values<float>(graph::infer_graph(l.alpha.value, k)), 16, 1, stats);
  compute_advantages(roll, setup.train);
  std::mt19937_64 rng(seed + 2);
  BilevelResult res;
  for (int s = 0; s < steps; ++s) {
    const auto split = split_minibatches(roll.samples(), 1, rng).front();
    const Mat<float> noise = graph::gumbel_noise<float>(n, rng);
    const auto g = graph::sample_graph(l.alpha.value, k, noise);

    const auto a0 = hash_matrix(l.alpha.value);
    const auto m0 = hash_model(l.model);
    inner_step(l, roll.gather(split.train), g, setup.train);
    const auto a1 = hash_matrix(l.alpha.value);
    const auto m1 = hash_model(l.model);
    res.inner_touched_alpha += a1 != a0;
    res.inner_moved_model += m1 != m0;

    outer_step(l, roll.gather(split.val), g, noise, setup.train, setup.graph);
    res.outer_touched_model += hash_model(l.model) != m1;
    res.outer_moved_alpha += hash_matrix(l.alpha.value) != a1;
    ++res.steps;
  }
  return res;
}

}  // namespace probes

namespace probes {

inline commformer::train::LossBatch<double> random_batch(const commformer::ModelDims& dims, int samples,
                                                         std::mt19937_64& rng) {
  commformer::train::LossBatch<double> b;
  const int rows = samples * dims.n_agents;
  b.obs = random_matrix(rows, dims.obs_dim, rng);
  b.next_obs = random_matrix(rows, dims.obs_dim, rng);
  std::uniform_int_distribution<int> act(0, 4);
  std::normal_distribution<double> z;
  for (int r = 0; r < rows; ++r) {
    b.actions.push_back(act(rng));
    b.old_log_probs.push_back(-1.6);
  }
  for (int s = 0; s < samples; ++s) {
    b.advantages.push_back(z(rng));
    b.rewards.push_back(z(rng));
    b.dones.push_back(s % 3 == 2 ? 1 : 0);
  }
  return b;
}

// Constant value head: zero output weights, bias `bias`, online and target.
inline void set_value_head(commformer::Model<double>& m, double bias) {
  const auto& vh = m.layout().value_head;
  for (auto* set : {&m.encoder(), &m.target()}) {
    (*set)[vh.w2].value.setZero();
    (*set)[vh.b2].value.setConstant(bias);
  }
}

// Recursion unrolled from each start index: O(T^2), same arithmetic order.
inline std::vector<double> gae_double_loop(const std::vector<double>& r, const std::vector<double>& v,
                                           const std::vector<std::uint8_t>& d, double g, double l) {
  const std::size_t n = r.size();
  std::vector<double> out(n);
  for (std::size_t t = 0; t < n; ++t) {
    double acc = 0.0;
    for (std::size_t s = n; s-- > t;) {
      const double live = d[s] ? 0.0 : 1.0;
      acc = (r[s] + g * v[s + 1] * live - v[s]) + g * l * live * acc;
    }
    out[t] = acc;
  }
  return out;
}

// Length-5 random trajectories; counts entries that differ from the oracle in any bit.
inline int gae_mismatches(int trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  int bad = 0;
  std::vector<double> r(5), v(6);
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<std::uint8_t> d(5);
    for (auto& x : d) x = std::bernoulli_distribution(0.3)(rng) ? 1 : 0;
    for (auto& x : r) x = z(rng);
    for (auto& x : v) x = z(rng);
    const double gamma = 0.9 + 0.09 * (trial % 2), lambda = 0.5 + 0.01 * (trial % 50);
    const auto got = commformer::train::compute_gae(r, v, d, gamma, lambda);
    const auto want = gae_double_loop(r, v, d, gamma, lambda);
    for (std::size_t t = 0; t < 5; ++t) bad += got.advantages[t] != want[t];
  }
  return bad;
}

struct EncoderCases {
  double unit = 0.0;     // expected exactly 1
  double squared = 0.0;  // expected exactly c * c
  double c = 0.37;
};

// Zero value head with unit rewards, then constant head c with zero rewards and gamma 0.
inline EncoderCases encoder_loss_cases(std::uint64_t seed) {
  using namespace commformer;
  std::mt19937_64 rng(seed);
  auto dims = small_dims(2, 8, 4);
  Model<double> model(dims, seed);
  auto batch = random_batch(dims, 3, rng);
  const Mat<double> e = Mat<double>::Ones(2, 2);
  EncoderCases res;
  set_value_head(model, 0.0);
  std::fill(batch.rewards.begin(), batch.rewards.end(), 1.0);
  train::LossSettings s;
  s.gamma = 0.73;
  res.unit = train::encoder_loss(model, batch, e, s);
  set_value_head(model, res.c);
  std::fill(batch.rewards.begin(), batch.rewards.end(), 0.0);
  s.gamma = 0.0;
  res.squared = train::encoder_loss(model, batch, e, s);
  return res;
}

// |L_decoder + mean(A)| at theta = theta_old with no entropy bonus.
inline double decoder_loss_gap(std::uint64_t seed) {
  using namespace commformer;
  std::mt19937_64 rng(seed);
  auto dims = small_dims(3, 8, 4);
  Model<double> model(dims, seed);
  auto batch = random_batch(dims, 5, rng);
  const Mat<double> e = Mat<double>::Ones(3, 3);
  batch.old_log_probs = model.evaluate_actions(batch.obs, batch.actions, e).log_probs;
  train::LossSettings s;
  s.entropy_coef = 0.0;
  double mean = 0.0;
  for (double a : batch.advantages) mean += a;
  mean /= static_cast<double>(batch.advantages.size());
  return std::abs(train::decoder_loss(model, batch, e, s) + mean);
}

struct GraphLaws {
  int trials = 0;
  int bad_rows = 0;           // sampled or inferred rows without exactly k ones
  int zero_noise_mismatch = 0;
};

inline GraphLaws graph_laws(int trials, std::uint64_t seed) {
  using namespace commformer::graph;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> nd(1, 7);
  std::normal_distribution<double> z(0.0, 2.0);
  GraphLaws res;
  for (int trial = 0; trial < trials; ++trial) {
    const int n = nd(rng);
    const int k = std::uniform_int_distribution<int>(1, n)(rng);
    Mat<double> alpha(n, n);
    for (Eigen::Index i = 0; i < alpha.size(); ++i) alpha.data()[i] = z(rng);
    const auto s = sample_graph(alpha, k, gumbel_noise<double>(n, rng));
    const auto inf = infer_graph(alpha, k);
    for (int i = 0; i < n; ++i) {
      res.bad_rows += s.edges.row(i).cast<int>().sum() != k;
      res.bad_rows += inf.edges.row(i).cast<int>().sum() != k;
    }
    res.zero_noise_mismatch += !(sample_graph(alpha, k, Mat<double>(Mat<double>::Zero(n, n))) == inf);
    ++res.trials;
  }
  return res;
}

// Largest |frequency - 1/N| of the selected column when k = 1 and alpha is uniform.
inline double gumbel_uniformity_gap(int n, int draws, std::uint64_t seed) {
  using namespace commformer::graph;
  std::mt19937_64 rng(seed);
  const Mat<double> alpha = Mat<double>::Zero(n, n);
  std::vector<int> counts(static_cast<std::size_t>(n), 0);
  for (int d = 0; d < draws; ++d) {
    const auto g = sample_graph(alpha, 1, gumbel_noise<double>(n, rng));
    for (int j = 0; j < n; ++j) counts[static_cast<std::size_t>(j)] += g.edges(0, j);
  }
  double worst = 0.0;
  for (int c : counts) worst = std::max(worst, std::abs(c / double(draws) - 1.0 / n));
  return worst;
}

}  // namespace probes
