#pragma once

// Learnable communication graph.
//
// Convention: alpha(i, j) scores the edge j -> i (agent i receiving from
// agent j), and edges(i, j) = 1 means agent j's message reaches agent i. Each
// row selects exactly k senders. The diagonal is always passable in the
// attention mask and does not count toward k.

#include "tape.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

namespace commformer::graph {

using EdgeMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct CommGraph {
  EdgeMatrix edges;
  int k = 0;

  int n_agents() const { return static_cast<int>(edges.rows()); }
  bool operator==(const CommGraph& o) const { return k == o.k && edges == o.edges; }
};

template <class S>
struct RelaxedGraph {
  CommGraph hard;
  Mat<S> soft;       // row i = k * softmax((alpha_i + noise_i) / temperature)
  Mat<S> softmax;    // row i = softmax((alpha_i + noise_i) / temperature)
  S temperature = S(1);
};

// k = max(1, round(S * N)).
inline int budget_for_sparsity(double sparsity, int n_agents) {
  if (!(sparsity > 0.0 && sparsity <= 1.0)) throw std::invalid_argument("sparsity must lie in (0, 1]");
  if (n_agents < 1) throw std::invalid_argument("n_agents must be >= 1");
  const int k = static_cast<int>(std::lround(sparsity * n_agents));
  return std::clamp(k, 1, n_agents);
}

template <class S>
Mat<S> init_adjacency(int n_agents, std::uint64_t seed) {
  if (n_agents < 1) throw std::invalid_argument("init_adjacency: n_agents must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-0.01, 0.01);
  Mat<S> alpha(n_agents, n_agents);
  for (Eigen::Index i = 0; i < alpha.size(); ++i) alpha.data()[i] = static_cast<S>(dist(rng));
  return alpha;
}

template <class S>
Mat<S> gumbel_noise(int n_agents, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Mat<S> g(n_agents, n_agents);
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    double u = dist(rng);
    while (u <= 0.0) u = dist(rng);
    g.data()[i] = static_cast<S>(-std::log(-std::log(u)));
  }
  return g;
}

namespace detail {

template <class S>
void check_alpha(const Mat<S>& alpha) {
  if (alpha.rows() < 1 || alpha.rows() != alpha.cols()) throw std::invalid_argument("alpha must be a non-empty N x N matrix");
  if (!alpha.allFinite()) throw std::invalid_argument("alpha has non-finite entries");
}

inline void check_budget(int k, Eigen::Index n) {
  if (k < 1 || k > n) throw std::invalid_argument("budget k must satisfy 1 <= k <= N");
}

// Indices of the k largest entries; equal values resolve to the lowest index.
template <class Row>
std::vector<int> top_k(const Row& row, int k) {
  std::vector<int> idx(static_cast<std::size_t>(row.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return row(a) > row(b); });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

template <class S>
Eigen::Matrix<S, 1, Eigen::Dynamic> row_softmax(const Eigen::Matrix<S, 1, Eigen::Dynamic>& z) {
  const S c = z.maxCoeff();
  Eigen::Matrix<S, 1, Eigen::Dynamic> e = (z.array() - c).exp().matrix();
  return e / e.sum();
}

}  // namespace detail

// Row-wise k-hot of the k largest Softmax(alpha_i + noise_i) entries.
template <class S>
CommGraph sample_graph(const Mat<S>& alpha, int k, const Mat<S>& noise) {
  detail::check_alpha(alpha);
  const Eigen::Index n = alpha.rows();
  detail::check_budget(k, n);
  if (noise.rows() != n || noise.cols() != n) throw std::invalid_argument("sample_graph: noise must be N x N");
  if (!noise.allFinite()) throw std::invalid_argument("sample_graph: noise has non-finite entries");
  CommGraph g;
  g.k = k;
  g.edges.setZero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Matrix<S, 1, Eigen::Dynamic> z = alpha.row(i) + noise.row(i);
    const auto p = detail::row_softmax<S>(z);
    for (int j : detail::top_k(p, k)) g.edges(i, j) = 1;
  }
  return g;
}

// Deterministic execution-time graph: row-wise k-hot of the k largest alpha entries.
template <class S>
CommGraph infer_graph(const Mat<S>& alpha, int k) {
  detail::check_alpha(alpha);
  const Eigen::Index n = alpha.rows();
  detail::check_budget(k, n);
  CommGraph g;
  g.k = k;
  g.edges.setZero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Matrix<S, 1, Eigen::Dynamic> row = alpha.row(i);
    for (int j : detail::top_k(row, k)) g.edges(i, j) = 1;
  }
  return g;
}

template <class S>
RelaxedGraph<S> relax_graph(const Mat<S>& alpha, int k, const Mat<S>& noise, S temperature) {
  if (!(temperature > S(0))) throw std::invalid_argument("relax_graph: temperature must be > 0");
  detail::check_alpha(alpha);
  const Eigen::Index n = alpha.rows();
  detail::check_budget(k, n);
  if (noise.rows() != n || noise.cols() != n || !noise.allFinite()) {
    throw std::invalid_argument("relax_graph: noise must be a finite N x N matrix");
  }
  RelaxedGraph<S> r;
  r.temperature = temperature;
  r.softmax.resize(n, n);
  r.hard.k = k;
  r.hard.edges.setZero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Matrix<S, 1, Eigen::Dynamic> z = (alpha.row(i) + noise.row(i)) / temperature;
    r.softmax.row(i) = detail::row_softmax<S>(z);
  }
  r.soft = r.softmax * static_cast<S>(k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Matrix<S, 1, Eigen::Dynamic> row = r.soft.row(i);
    for (int j : detail::top_k(row, k)) r.hard.edges(i, j) = 1;
  }
  return r;
}

// Backward half of the straight-through pair: maps dL/d(edges), evaluated at
// the hard graph, to dL/d(alpha) through the soft rows.
//   d soft_ij / d alpha_il = (k / tau) p_ij (delta_jl - p_il)
template <class S>
Mat<S> straight_through_grad(const RelaxedGraph<S>& relaxed, const Mat<S>& d_edges) {
  const Mat<S>& p = relaxed.softmax;
  if (d_edges.rows() != p.rows() || d_edges.cols() != p.cols()) {
    throw std::invalid_argument("straight_through_grad: gradient shape mismatch");
  }
  const S scale = static_cast<S>(relaxed.hard.k) / relaxed.temperature;
  Mat<S> d_alpha(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const S inner = p.row(i).dot(d_edges.row(i));
    d_alpha.row(i) = scale * (p.row(i).array() * (d_edges.row(i).array() - inner)).matrix();
  }
  return d_alpha;
}

// 1 = pass, 0 = block. Diagonal always passes.
inline EdgeMatrix build_mask(const CommGraph& g) {
  EdgeMatrix m = g.edges;
  for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, i) = 1;
  return m;
}

template <class S>
Mat<S> edge_values(const CommGraph& g) {
  return g.edges.template cast<S>();
}

inline CommGraph fully_connected(int n_agents) {
  CommGraph g;
  g.k = n_agents;
  g.edges = EdgeMatrix::Ones(n_agents, n_agents);
  return g;
}

inline CommGraph diagonal_only(int n_agents) {
  CommGraph g;
  g.k = 0;
  g.edges = EdgeMatrix::Zero(n_agents, n_agents);
  return g;
}

// Per-pair edge embeddings. Result[i] is an N x d matrix whose row j is
// r_{i->j} = table[e_{i->j}] with e_{i->j} = edges(j, i).
template <class S>
std::vector<Mat<S>> edge_features(const CommGraph& g, const Mat<S>& table, Eigen::Index d_model) {
  if (table.rows() != 2 || table.cols() != d_model) {
    throw std::invalid_argument("edge_features: table must be 2 x d_model");
  }
  const int n = g.n_agents();
  std::vector<Mat<S>> out(static_cast<std::size_t>(n), Mat<S>(n, d_model));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i)].row(j) = table.row(g.edges(j, i) ? 1 : 0);
  }
  return out;
}

inline int hamming(const CommGraph& a, const CommGraph& b) {
  if (a.edges.rows() != b.edges.rows() || a.edges.cols() != b.edges.cols()) {
    throw std::invalid_argument("hamming: shape mismatch");
  }
  return static_cast<int>((a.edges.array() != b.edges.array()).count());
}

inline int edge_count(const CommGraph& g, bool include_diagonal) {
  int c = static_cast<int>(g.edges.template cast<int>().sum());
  if (!include_diagonal) {
    for (Eigen::Index i = 0; i < g.edges.rows(); ++i) c -= g.edges(i, i);
  }
  return c;
}

template <class S>
nlohmann::json snapshot_json(long long step, const Mat<S>& alpha, const CommGraph& g) {
  nlohmann::json a = nlohmann::json::array();
  nlohmann::json e = nlohmann::json::array();
  for (Eigen::Index i = 0; i < alpha.rows(); ++i) {
    nlohmann::json ar = nlohmann::json::array();
    nlohmann::json er = nlohmann::json::array();
    for (Eigen::Index j = 0; j < alpha.cols(); ++j) {
      ar.push_back(static_cast<double>(alpha(i, j)));
      er.push_back(static_cast<int>(g.edges(i, j)));
    }
    a.push_back(std::move(ar));
    e.push_back(std::move(er));
  }
  nlohmann::json out;
  out["step"] = step;
  out["alpha"] = std::move(a);
  out["edges"] = std::move(e);
  return out;
}

}  // namespace commformer::graph
