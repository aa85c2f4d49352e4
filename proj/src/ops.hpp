#pragma once

// Differentiable operations recorded on a Tape.
//
// Row layout convention: a batch of B joint samples over N agents is stored as
// R = B*N rows, row r = b*N + i.

#include "tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace commformer::ops {

// Largest score excess over the row, in nats, at which a blocked key's edge slope stops growing.
inline constexpr double kRatioCapNats = 2.0;

namespace detail {
inline void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}
}  // namespace detail

template <class S>
Var matmul(Tape<S>& t, Var a, Var b) {
  const Mat<S>& A = t.value(a);
  const Mat<S>& B = t.value(b);
  detail::require(A.cols() == B.rows(), "matmul: inner dimension mismatch");
  Mat<S> C = A * B;
  Var c = t.push(std::move(C), t.any_requires_grad(a, b));
  if (t.requires_grad(c)) {
    t.on_backward([&t, a, b, c] {
      const Mat<S>& G = t.grad(c);
      if (t.requires_grad(a)) t.grad(a).noalias() += G * t.value(b).transpose();
      if (t.requires_grad(b)) t.grad(b).noalias() += t.value(a).transpose() * G;
    });
  }
  return c;
}

template <class S>
Var add(Tape<S>& t, Var a, Var b) {
  const Mat<S>& A = t.value(a);
  const Mat<S>& B = t.value(b);
  detail::require(A.rows() == B.rows() && A.cols() == B.cols(), "add: shape mismatch");
  Var c = t.push(A + B, t.any_requires_grad(a, b));
  if (t.requires_grad(c)) {
    t.on_backward([&t, a, b, c] {
      const Mat<S>& G = t.grad(c);
      if (t.requires_grad(a)) t.grad(a) += G;
      if (t.requires_grad(b)) t.grad(b) += G;
    });
  }
  return c;
}

template <class S>
Var scale(Tape<S>& t, Var a, S k) {
  Var c = t.push(t.value(a) * k, t.requires_grad(a));
  if (t.requires_grad(c)) {
    t.on_backward([&t, a, c, k] { t.grad(a) += t.grad(c) * k; });
  }
  return c;
}

// A[R,d] + b[1,d] broadcast over rows.
template <class S>
Var add_row(Tape<S>& t, Var a, Var b) {
  const Mat<S>& A = t.value(a);
  const Mat<S>& B = t.value(b);
  detail::require(B.rows() == 1 && B.cols() == A.cols(), "add_row: bias shape mismatch");
  Mat<S> C = A.rowwise() + B.row(0);
  Var c = t.push(std::move(C), t.any_requires_grad(a, b));
  if (t.requires_grad(c)) {
    t.on_backward([&t, a, b, c] {
      const Mat<S>& G = t.grad(c);
      if (t.requires_grad(a)) t.grad(a) += G;
      if (t.requires_grad(b)) t.grad(b) += G.colwise().sum();
    });
  }
  return c;
}

template <class S>
Var linear(Tape<S>& t, Var x, Var w, Var b) {
  return add_row(t, matmul(t, x, w), b);
}

// A[R,d] + P[N,d] where row r receives P.row(r % N).
template <class S>
Var add_tiled(Tape<S>& t, Var a, Var p) {
  const Mat<S>& A = t.value(a);
  const Mat<S>& P = t.value(p);
  detail::require(P.cols() == A.cols() && P.rows() > 0 && A.rows() % P.rows() == 0,
                  "add_tiled: shape mismatch");
  const Eigen::Index n = P.rows();
  Mat<S> C = A;
  for (Eigen::Index r = 0; r < C.rows(); ++r) C.row(r) += P.row(r % n);
  Var c = t.push(std::move(C), t.any_requires_grad(a, p));
  if (t.requires_grad(c)) {
    t.on_backward([&t, a, p, c, n] {
      const Mat<S>& G = t.grad(c);
      if (t.requires_grad(a)) t.grad(a) += G;
      if (t.requires_grad(p)) {
        Mat<S>& GP = t.grad(p);
        for (Eigen::Index r = 0; r < G.rows(); ++r) GP.row(r % n) += G.row(r);
      }
    });
  }
  return c;
}

// Row r of the result is row idx[r] of `table`.
template <class S>
Var gather_rows(Tape<S>& t, Var table, std::vector<int> idx) {
  const Mat<S>& T = t.value(table);
  Mat<S> C(static_cast<Eigen::Index>(idx.size()), T.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    detail::require(idx[r] >= 0 && idx[r] < T.rows(), "gather_rows: index out of range");
    C.row(static_cast<Eigen::Index>(r)) = T.row(idx[r]);
  }
  Var c = t.push(std::move(C), t.requires_grad(table));
  if (t.requires_grad(c)) {
    t.on_backward([&t, table, c, idx = std::move(idx)] {
      const Mat<S>& G = t.grad(c);
      Mat<S>& GT = t.grad(table);
      for (std::size_t r = 0; r < idx.size(); ++r) GT.row(idx[r]) += G.row(static_cast<Eigen::Index>(r));
    });
  }
  return c;
}

// Row r is taken from options[choice[r % choice.size()]].
template <class S>
Var select_by_agent(Tape<S>& t, const std::vector<Var>& options, std::vector<int> choice) {
  detail::require(!options.empty() && !choice.empty(), "select_by_agent: empty input");
  const Mat<S>& first = t.value(options.front());
  for (Var o : options) {
    detail::require(t.value(o).rows() == first.rows() && t.value(o).cols() == first.cols(),
                    "select_by_agent: option shape mismatch");
  }
  const auto n = static_cast<Eigen::Index>(choice.size());
  Mat<S> C(first.rows(), first.cols());
  bool rg = false;
  for (Eigen::Index r = 0; r < C.rows(); ++r) {
    const int k = choice[static_cast<std::size_t>(r % n)];
    detail::require(k >= 0 && k < static_cast<int>(options.size()), "select_by_agent: bad choice");
    C.row(r) = t.value(options[static_cast<std::size_t>(k)]).row(r);
  }
  for (Var o : options) rg = rg || t.requires_grad(o);
  Var c = t.push(std::move(C), rg);
  if (rg) {
    t.on_backward([&t, options, c, choice = std::move(choice), n] {
      const Mat<S>& G = t.grad(c);
      for (Eigen::Index r = 0; r < G.rows(); ++r) {
        Var o = options[static_cast<std::size_t>(choice[static_cast<std::size_t>(r % n)])];
        if (t.requires_grad(o)) t.grad(o).row(r) += G.row(r);
      }
    });
  }
  return c;
}

// Row r (agent m = r % N) is w * on.row(r) + (1 - w) * off.row(r) with
// w = E(m, m - 1) for m >= 1 and w = 0 for m = 0: the decoder slot of agent m
// carries agent m-1's action only across the edge m-1 -> m.
template <class S>
Var edge_gate_rows(Tape<S>& t, Var on, Var off, Var edges) {
  const Mat<S>& A = t.value(on);
  const Mat<S>& B = t.value(off);
  const Mat<S>& E = t.value(edges);
  detail::require(A.rows() == B.rows() && A.cols() == B.cols(), "edge_gate_rows: shape mismatch");
  detail::require(E.rows() == E.cols() && E.rows() > 0 && A.rows() % E.rows() == 0,
                  "edge_gate_rows: edge matrix shape mismatch");
  const Eigen::Index n = E.rows();
  auto weight = [&E, n](Eigen::Index r) {
    const Eigen::Index m = r % n;
    return m == 0 ? S(0) : E(m, m - 1);
  };
  Mat<S> C(A.rows(), A.cols());
  for (Eigen::Index r = 0; r < C.rows(); ++r) {
    const S w = weight(r);
    C.row(r) = w * A.row(r) + (S(1) - w) * B.row(r);
  }
  Var c = t.push(std::move(C), t.any_requires_grad(on, off, edges));
  if (t.requires_grad(c)) {
    t.on_backward([&t, on, off, edges, c, n] {
      const Mat<S>& G = t.grad(c);
      const Mat<S>& E = t.value(edges);
      for (Eigen::Index r = 0; r < G.rows(); ++r) {
        const Eigen::Index m = r % n;
        const S w = m == 0 ? S(0) : E(m, m - 1);
        if (t.requires_grad(on)) t.grad(on).row(r) += w * G.row(r);
        if (t.requires_grad(off)) t.grad(off).row(r) += (S(1) - w) * G.row(r);
        if (m > 0 && t.requires_grad(edges)) {
          t.grad(edges)(m, m - 1) += G.row(r).dot(t.value(on).row(r) - t.value(off).row(r));
        }
      }
    });
  }
  return c;
}

// Exact GELU, x * Phi(x).
template <class S>
Var gelu(Tape<S>& t, Var a) {
  const Mat<S>& A = t.value(a);
  const S inv_sqrt2 = S(0.70710678118654752440);
  Mat<S> C = A.unaryExpr([inv_sqrt2](S x) { return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2)); });
  Var c = t.push(std::move(C), t.requires_grad(a));
  if (t.requires_grad(c)) {
    t.on_backward([&t, a, c, inv_sqrt2] {
      const S inv_sqrt_2pi = S(0.39894228040143267794);
      const Mat<S>& A = t.value(a);
      const Mat<S>& G = t.grad(c);
      Mat<S>& GA = t.grad(a);
      for (Eigen::Index r = 0; r < A.rows(); ++r) {
        for (Eigen::Index k = 0; k < A.cols(); ++k) {
          const S x = A(r, k);
          const S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
          const S pdf = inv_sqrt_2pi * std::exp(S(-0.5) * x * x);
          GA(r, k) += G(r, k) * (cdf + x * pdf);
        }
      }
    });
  }
  return c;
}

// Row-wise layer normalization with affine gain/bias of shape [1,d].
template <class S>
Var layer_norm(Tape<S>& t, Var a, Var gain, Var bias, S eps = S(1e-5)) {
  const Mat<S>& A = t.value(a);
  const Mat<S>& g = t.value(gain);
  const Mat<S>& b = t.value(bias);
  detail::require(g.cols() == A.cols() && b.cols() == A.cols(), "layer_norm: shape mismatch");
  const Eigen::Index d = A.cols();
  Mat<S> xhat(A.rows(), d);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(A.rows());
  for (Eigen::Index r = 0; r < A.rows(); ++r) {
    const S mean = A.row(r).mean();
    const S var = (A.row(r).array() - mean).square().mean();
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (A.row(r).array() - mean) * inv_std(r);
  }
  Mat<S> C = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
  Var c = t.push(std::move(C), t.any_requires_grad(a, gain, bias));
  if (t.requires_grad(c)) {
    t.on_backward([&t, a, gain, bias, c, xhat = std::move(xhat), inv_std = std::move(inv_std), d] {
      const Mat<S>& G = t.grad(c);
      const Mat<S>& g = t.value(gain);
      if (t.requires_grad(gain)) t.grad(gain) += (G.array() * xhat.array()).colwise().sum().matrix();
      if (t.requires_grad(bias)) t.grad(bias) += G.colwise().sum();
      if (t.requires_grad(a)) {
        Mat<S>& GA = t.grad(a);
        for (Eigen::Index r = 0; r < G.rows(); ++r) {
          const auto dxhat = (G.row(r).array() * g.row(0).array()).eval();
          const S m1 = dxhat.mean();
          const S m2 = (dxhat * xhat.row(r).array()).mean();
          GA.row(r).array() += inv_std(r) * (dxhat - m1 - xhat.row(r).array() * m2);
        }
      }
    });
  }
  (void)d;
  return c;
}

template <class S>
Var mean_all(Tape<S>& t, Var a) {
  const Mat<S>& A = t.value(a);
  detail::require(A.size() > 0, "mean_all: empty input");
  Mat<S> C(1, 1);
  C(0, 0) = A.mean();
  Var c = t.push(std::move(C), t.requires_grad(a));
  if (t.requires_grad(c)) {
    t.on_backward([&t, a, c] {
      Mat<S>& GA = t.grad(a);
      GA.array() += t.grad(c)(0, 0) / static_cast<S>(GA.size());
    });
  }
  return c;
}

// Relation-enhanced, graph-masked multi-head attention (without the output
// projection). For sample b, query token i and key token j:
//
//   q_ij = (xq_i + r_{i->j}) Wq,   k_ij = (xkv_j + r_{j->i}) Wk,   v_j = xkv_j Wv
//   r_{a->b} = T[0] + e_{a->b} (T[1] - T[0]),   e_{j->i} = E(i, j)
//   s_ij = <q_ij, k_ij> / sqrt(d_head) per head
//   w_ij = m_ij exp(s_ij) / sum_l m_il exp(s_il)
//
// with mask m_ij = 1 on the diagonal, 0 for j > i when causal, else E(i, j).
// For a binary E this is exactly a softmax with blocked scores at -infinity;
// for a continuous E it provides the straight-through derivative dL/dE.
struct AttentionShape {
  int n_agents = 1;
  int n_heads = 1;
  bool causal = false;
};

template <class S>
struct AttentionInputs {
  Var xq;      // [R, d]
  Var xkv;     // [R, d]
  Var edges;   // [N, N]
  Var table;   // [2, d]
  Var wq, wk, wv;  // [d, d]
};

template <class S>
Var relation_attention(Tape<S>& t, const AttentionInputs<S>& in, AttentionShape shape) {
  const Mat<S>& XQ = t.value(in.xq);
  const Mat<S>& XKV = t.value(in.xkv);
  const Mat<S>& E = t.value(in.edges);
  const Mat<S>& T = t.value(in.table);
  const Mat<S>& Wq = t.value(in.wq);
  const Mat<S>& Wk = t.value(in.wk);
  const Mat<S>& Wv = t.value(in.wv);
  const int n = shape.n_agents;
  const int h = shape.n_heads;
  const Eigen::Index d = XQ.cols();
  detail::require(n >= 1 && h >= 1, "relation_attention: bad shape");
  detail::require(XQ.rows() == XKV.rows() && XKV.cols() == d && XQ.rows() % n == 0,
                  "relation_attention: stream shape mismatch");
  detail::require(E.rows() == n && E.cols() == n, "relation_attention: edge matrix shape mismatch");
  detail::require(T.rows() == 2 && T.cols() == d, "relation_attention: edge table must be [2, d_model]");
  detail::require(Wq.rows() == d && Wk.rows() == d && Wv.rows() == d && Wq.cols() == d && Wk.cols() == d &&
                      Wv.cols() == d,
                  "relation_attention: projection shape mismatch");
  detail::require(d % h == 0, "relation_attention: d_model not divisible by n_heads");
  const Eigen::Index dh = d / h;
  const Eigen::Index rows = XQ.rows();
  const Eigen::Index batch = rows / n;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));

  struct Cache {
    Mat<S> qx, kx, v;    // [R, d]
    Mat<S> cq, uq, ck, uk;  // [1, d]
    Mat<S> w;            // [R * n, h], (row i of sample b, key j) -> w
    Mat<S> ratio;        // [R * n, h], h'(E) exp(s - c) / Z (for dL/dE on masked-by-E entries)
    Mat<S> mask;         // [n, n]
    std::vector<std::uint8_t> from_edges;  // 1 when mask(i,j) is E(i,j)
  };
  auto cache = std::make_shared<Cache>();
  cache->qx = XQ * Wq;
  cache->kx = XKV * Wk;
  cache->v = XKV * Wv;
  cache->cq = T.row(0) * Wq;
  cache->uq = (T.row(1) - T.row(0)) * Wq;
  cache->ck = T.row(0) * Wk;
  cache->uk = (T.row(1) - T.row(0)) * Wk;
  cache->mask.resize(n, n);
  cache->from_edges.assign(static_cast<std::size_t>(n * n), 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (shape.causal && j > i) {
        cache->mask(i, j) = S(0);
      } else if (i == j) {
        cache->mask(i, j) = S(1);
      } else {
        cache->mask(i, j) = E(i, j);
        cache->from_edges[static_cast<std::size_t>(i * n + j)] = 1;
      }
    }
  }
  cache->w.setZero(rows * n, h);
  cache->ratio.setZero(rows * n, h);

  Mat<S> out = Mat<S>::Zero(rows, d);
  Eigen::Matrix<S, 1, Eigen::Dynamic> q(d), k(d);
  std::vector<S> s(static_cast<std::size_t>(n * h));
  std::vector<S> gate(static_cast<std::size_t>(n)), slope(static_cast<std::size_t>(n));
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (int i = 0; i < n; ++i) {
      const Eigen::Index ri = b * n + i;
      for (int j = 0; j < n; ++j) {
        const Eigen::Index rj = b * n + j;
        const bool needed = cache->mask(i, j) != S(0) || cache->from_edges[static_cast<std::size_t>(i * n + j)];
        if (!needed) continue;
        q = cache->qx.row(ri) + cache->cq + E(j, i) * cache->uq;
        k = cache->kx.row(rj) + cache->ck + E(i, j) * cache->uk;
        for (int hh = 0; hh < h; ++hh) {
          s[static_cast<std::size_t>(j * h + hh)] =
              q.segment(hh * dh, dh).dot(k.segment(hh * dh, dh)) * inv_sqrt;
        }
      }
      for (int hh = 0; hh < h; ++hh) {
        // Reference over keys that are on at the nearest binary graph.
        S c = -std::numeric_limits<S>::infinity();
        for (int j = 0; j < n; ++j) {
          if (cache->mask(i, j) >= S(0.5)) c = std::max(c, s[static_cast<std::size_t>(j * h + hh)]);
        }
        // Gated keys enter as h(E) = g E + (1 - g) E^2, equal to E on {0, 1}, where
        // g = exp(min(0, cap - (s - c))) bounds the slope at E = 0 for keys scoring far above the row.
        for (int j = 0; j < n; ++j) {
          const S e = cache->mask(i, j);
          const S sij = s[static_cast<std::size_t>(j * h + hh)];
          if (!cache->from_edges[static_cast<std::size_t>(i * n + j)]) {
            gate[static_cast<std::size_t>(j)] = e;
            slope[static_cast<std::size_t>(j)] = S(0);
            continue;
          }
          const S g = std::exp(std::min(S(0), S(kRatioCapNats) - (sij - c)));
          gate[static_cast<std::size_t>(j)] = g * e + (S(1) - g) * e * e;
          slope[static_cast<std::size_t>(j)] = g + S(2) * (S(1) - g) * e;
        }
        S top = c;
        for (int j = 0; j < n; ++j) {
          if (gate[static_cast<std::size_t>(j)] != S(0)) top = std::max(top, s[static_cast<std::size_t>(j * h + hh)]);
        }
        S z = 0;
        for (int j = 0; j < n; ++j) {
          const S m = gate[static_cast<std::size_t>(j)];
          if (m != S(0)) z += m * std::exp(s[static_cast<std::size_t>(j * h + hh)] - top);
        }
        for (int j = 0; j < n; ++j) {
          const Eigen::Index wr = ri * n + j;
          const S m = gate[static_cast<std::size_t>(j)];
          const S sij = s[static_cast<std::size_t>(j * h + hh)];
          if (m != S(0)) {
            const S w = m * std::exp(sij - top) / z;
            cache->w(wr, hh) = w;
            out.block(ri, hh * dh, 1, dh) += w * cache->v.block(b * n + j, hh * dh, 1, dh);
          }
          if (cache->from_edges[static_cast<std::size_t>(i * n + j)]) {
            cache->ratio(wr, hh) =
                m != S(0) ? slope[static_cast<std::size_t>(j)] * std::exp(sij - top) / z
                          : std::exp(std::min(sij - c, S(kRatioCapNats)) + c - top) / z;
          }
        }
      }
    }
  }

  const bool rg = t.any_requires_grad(in.xq, in.xkv, in.edges, in.table) ||
                  t.any_requires_grad(in.wq, in.wk, in.wv);
  Var o = t.push(std::move(out), rg);
  if (!rg) return o;

  t.on_backward([&t, in, o, cache, n, h, d, dh, rows, batch, inv_sqrt] {
    const Mat<S>& G = t.grad(o);
    const Mat<S>& E = t.value(in.edges);
    const Mat<S>& T = t.value(in.table);
    const Mat<S>& XQ = t.value(in.xq);
    const Mat<S>& XKV = t.value(in.xkv);
    const Mat<S>& Wq = t.value(in.wq);
    const Mat<S>& Wk = t.value(in.wk);
    const Mat<S>& Wv = t.value(in.wv);
    const bool need_e = t.requires_grad(in.edges);

    Mat<S> dqx = Mat<S>::Zero(rows, d);
    Mat<S> dkx = Mat<S>::Zero(rows, d);
    Mat<S> dv = Mat<S>::Zero(rows, d);
    Mat<S> dcq = Mat<S>::Zero(1, d), duq = Mat<S>::Zero(1, d);
    Mat<S> dck = Mat<S>::Zero(1, d), duk = Mat<S>::Zero(1, d);
    Mat<S> de = Mat<S>::Zero(n, n);

    Eigen::Matrix<S, 1, Eigen::Dynamic> q(d), k(d), dq(d), dk(d);
    std::vector<S> dw(static_cast<std::size_t>(n * h));
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (int i = 0; i < n; ++i) {
        const Eigen::Index ri = b * n + i;
        // dw_ij and the softmax-weighted mean of dw per head.
        std::vector<S> avg(static_cast<std::size_t>(h), S(0));
        for (int j = 0; j < n; ++j) {
          const bool needed = cache->mask(i, j) != S(0) || cache->from_edges[static_cast<std::size_t>(i * n + j)];
          if (!needed) continue;
          const Eigen::Index rj = b * n + j;
          for (int hh = 0; hh < h; ++hh) {
            const S g = G.row(ri).segment(hh * dh, dh).dot(cache->v.row(rj).segment(hh * dh, dh));
            dw[static_cast<std::size_t>(j * h + hh)] = g;
            const S w = cache->w(ri * n + j, hh);
            avg[static_cast<std::size_t>(hh)] += w * g;
            if (w != S(0)) dv.block(rj, hh * dh, 1, dh) += w * G.block(ri, hh * dh, 1, dh);
          }
        }
        for (int j = 0; j < n; ++j) {
          const bool edge_entry = cache->from_edges[static_cast<std::size_t>(i * n + j)] != 0;
          if (cache->mask(i, j) == S(0) && !edge_entry) continue;
          const Eigen::Index rj = b * n + j;
          bool any_ds = false;
          std::vector<S> ds(static_cast<std::size_t>(h), S(0));
          for (int hh = 0; hh < h; ++hh) {
            const S centered = dw[static_cast<std::size_t>(j * h + hh)] - avg[static_cast<std::size_t>(hh)];
            const S w = cache->w(ri * n + j, hh);
            if (w != S(0)) {
              ds[static_cast<std::size_t>(hh)] = w * centered;
              any_ds = true;
            }
            if (edge_entry && need_e) de(i, j) += cache->ratio(ri * n + j, hh) * centered;
          }
          if (!any_ds) continue;
          q = cache->qx.row(ri) + cache->cq + E(j, i) * cache->uq;
          k = cache->kx.row(rj) + cache->ck + E(i, j) * cache->uk;
          for (int hh = 0; hh < h; ++hh) {
            const S sc = ds[static_cast<std::size_t>(hh)] * inv_sqrt;
            dq.segment(hh * dh, dh) = sc * k.segment(hh * dh, dh);
            dk.segment(hh * dh, dh) = sc * q.segment(hh * dh, dh);
          }
          dqx.row(ri) += dq;
          dcq += dq;
          duq += E(j, i) * dq;
          dkx.row(rj) += dk;
          dck += dk;
          duk += E(i, j) * dk;
          if (need_e) {
            de(j, i) += dq.dot(cache->uq.row(0));
            de(i, j) += dk.dot(cache->uk.row(0));
          }
        }
      }
    }

    const Mat<S> t0 = T.row(0);
    const Mat<S> tdiff = T.row(1) - T.row(0);
    if (t.requires_grad(in.xq)) t.grad(in.xq).noalias() += dqx * Wq.transpose();
    if (t.requires_grad(in.xkv)) {
      Mat<S>& gx = t.grad(in.xkv);
      gx.noalias() += dkx * Wk.transpose();
      gx.noalias() += dv * Wv.transpose();
    }
    if (t.requires_grad(in.wq)) {
      Mat<S>& gw = t.grad(in.wq);
      gw.noalias() += XQ.transpose() * dqx;
      gw.noalias() += t0.transpose() * dcq;
      gw.noalias() += tdiff.transpose() * duq;
    }
    if (t.requires_grad(in.wk)) {
      Mat<S>& gw = t.grad(in.wk);
      gw.noalias() += XKV.transpose() * dkx;
      gw.noalias() += t0.transpose() * dck;
      gw.noalias() += tdiff.transpose() * duk;
    }
    if (t.requires_grad(in.wv)) t.grad(in.wv).noalias() += XKV.transpose() * dv;
    if (t.requires_grad(in.table)) {
      Mat<S>& gt = t.grad(in.table);
      const Mat<S> via_q0 = (dcq - duq) * Wq.transpose();
      const Mat<S> via_q1 = duq * Wq.transpose();
      const Mat<S> via_k0 = (dck - duk) * Wk.transpose();
      const Mat<S> via_k1 = duk * Wk.transpose();
      gt.row(0) += via_q0.row(0) + via_k0.row(0);
      gt.row(1) += via_q1.row(0) + via_k1.row(0);
    }
    if (need_e) t.grad(in.edges) += de;
  });
  return o;
}

// log(sum(exp(x))) with the max shifted out.
template <class S, class Row>
S log_sum_exp(const Row& row) {
  const S c = row.maxCoeff();
  return c + std::log((row.array() - c).exp().sum());
}

// Per-row categorical statistics over the first counts[r % N] logits.
template <class S>
struct CategoricalOut {
  Var log_prob;  // [R, 1]
  Var entropy;   // [R, 1]
};

template <class S>
CategoricalOut<S> categorical(Tape<S>& t, Var logits, std::vector<int> counts, std::vector<int> actions) {
  const Mat<S>& L = t.value(logits);
  const auto n = static_cast<Eigen::Index>(counts.size());
  detail::require(n > 0 && L.rows() % n == 0, "categorical: row count mismatch");
  detail::require(static_cast<Eigen::Index>(actions.size()) == L.rows(), "categorical: action count mismatch");
  const Eigen::Index rows = L.rows();
  auto logp = std::make_shared<Mat<S>>(rows, L.cols());
  Mat<S> lp(rows, 1), ent(rows, 1);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const int a_count = counts[static_cast<std::size_t>(r % n)];
    detail::require(a_count >= 1 && a_count <= L.cols(), "categorical: bad action count");
    const int a = actions[static_cast<std::size_t>(r)];
    if (a < 0 || a >= a_count) throw std::invalid_argument("categorical: action index out of range");
    const auto row = L.row(r).head(a_count);
    const S lse = log_sum_exp<S>(row);
    S h = 0;
    for (int j = 0; j < a_count; ++j) {
      const S l = L(r, j) - lse;
      (*logp)(r, j) = l;
      h -= std::exp(l) * l;
    }
    lp(r, 0) = (*logp)(r, a);
    ent(r, 0) = h;
  }
  const bool rg = t.requires_grad(logits);
  Var vlp = t.push(std::move(lp), rg);
  Var vent = t.push(std::move(ent), rg);
  if (rg) {
    t.on_backward([&t, logits, vlp, vent, logp, counts = std::move(counts), actions = std::move(actions), n] {
      Mat<S>& GL = t.grad(logits);
      const bool has_lp = t.has_grad(vlp);
      const bool has_ent = t.has_grad(vent);
      for (Eigen::Index r = 0; r < GL.rows(); ++r) {
        const int a_count = counts[static_cast<std::size_t>(r % n)];
        const int a = actions[static_cast<std::size_t>(r)];
        const S glp = has_lp ? t.grad(vlp)(r, 0) : S(0);
        const S gent = has_ent ? t.grad(vent)(r, 0) : S(0);
        S h = 0;
        for (int j = 0; j < a_count; ++j) h -= std::exp((*logp)(r, j)) * (*logp)(r, j);
        for (int j = 0; j < a_count; ++j) {
          const S p = std::exp((*logp)(r, j));
          GL(r, j) += glp * ((j == a ? S(1) : S(0)) - p) - gent * p * ((*logp)(r, j) + h);
        }
      }
    });
  }
  return {vlp, vent};
}

// Per-row clipped surrogate min(r A, clip(r, 1-eps, 1+eps) A) with r = exp(logp - old).
template <class S>
Var ppo_surrogate(Tape<S>& t, Var log_prob, std::vector<S> old_log_prob, std::vector<S> advantage, S eps) {
  const Mat<S>& LP = t.value(log_prob);
  detail::require(LP.cols() == 1 && static_cast<std::size_t>(LP.rows()) == old_log_prob.size() &&
                      old_log_prob.size() == advantage.size(),
                  "ppo_surrogate: length mismatch");
  Mat<S> out(LP.rows(), 1);
  auto slope = std::make_shared<std::vector<S>>(old_log_prob.size());
  for (Eigen::Index r = 0; r < LP.rows(); ++r) {
    const auto u = static_cast<std::size_t>(r);
    const S ratio = std::exp(LP(r, 0) - old_log_prob[u]);
    const S adv = advantage[u];
    const S unclipped = ratio * adv;
    const S clipped = std::clamp(ratio, S(1) - eps, S(1) + eps) * adv;
    if (unclipped <= clipped) {
      out(r, 0) = unclipped;
      (*slope)[u] = unclipped;  // d(r A)/d logp = r A
    } else {
      out(r, 0) = clipped;
      (*slope)[u] = S(0);
    }
  }
  Var o = t.push(std::move(out), t.requires_grad(log_prob));
  if (t.requires_grad(o)) {
    t.on_backward([&t, log_prob, o, slope] {
      const Mat<S>& G = t.grad(o);
      Mat<S>& GL = t.grad(log_prob);
      for (Eigen::Index r = 0; r < G.rows(); ++r) GL(r, 0) += G(r, 0) * (*slope)[static_cast<std::size_t>(r)];
    });
  }
  return o;
}

// mean over rows of loss(target - value); squared error, or Huber with `huber_delta` > 0.
template <class S>
Var regression_loss(Tape<S>& t, Var value, std::vector<S> target, S huber_delta = S(0)) {
  const Mat<S>& V = t.value(value);
  detail::require(V.cols() == 1 && static_cast<std::size_t>(V.rows()) == target.size() && !target.empty(),
                  "regression_loss: length mismatch");
  const auto count = static_cast<S>(target.size());
  S total = 0;
  auto dloss = std::make_shared<std::vector<S>>(target.size());
  for (Eigen::Index r = 0; r < V.rows(); ++r) {
    const auto u = static_cast<std::size_t>(r);
    const S err = target[u] - V(r, 0);
    if (huber_delta > S(0) && std::abs(err) > huber_delta) {
      total += huber_delta * (std::abs(err) - S(0.5) * huber_delta);
      (*dloss)[u] = -huber_delta * (err > 0 ? S(1) : S(-1)) / count;
    } else if (huber_delta > S(0)) {
      total += S(0.5) * err * err;
      (*dloss)[u] = -err / count;
    } else {
      total += err * err;
      (*dloss)[u] = S(-2) * err / count;
    }
  }
  Mat<S> out(1, 1);
  out(0, 0) = total / count;
  Var o = t.push(std::move(out), t.requires_grad(value));
  if (t.requires_grad(o)) {
    t.on_backward([&t, value, o, dloss] {
      const S g = t.grad(o)(0, 0);
      Mat<S>& GV = t.grad(value);
      for (Eigen::Index r = 0; r < GV.rows(); ++r) GV(r, 0) += g * (*dloss)[static_cast<std::size_t>(r)];
    });
  }
  return o;
}

}  // namespace commformer::ops
