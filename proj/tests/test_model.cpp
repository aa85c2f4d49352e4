#include "model.hpp"
#include "probes.hpp"

#include "doctest.h"

#include <cmath>
#include <map>

using namespace commformer;
using probes::random_matrix;

TEST_CASE("zero edge table on a full graph is plain dot-product attention") {
  CHECK(probes::zero_table_gap(20, 1) <= 1e-12);
}

TEST_CASE("identity graph attends only to itself") {
  std::mt19937_64 rng(2);
  const int n = 3, d = 4;
  const auto x = random_matrix(2 * n, d, rng);
  const auto wq = random_matrix(d, d, rng), wk = random_matrix(d, d, rng), wv = random_matrix(d, d, rng);
  const auto out = probes::relation_attention_value(x, Mat<double>::Zero(n, n), random_matrix(2, d, rng), wq, wk, wv, n, 2);
  CHECK((out - x * wv).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("edge table row 1 only matters where edges exist") {
  std::mt19937_64 rng(4);
  const int n = 3, d = 6;
  const auto x = random_matrix(n, d, rng);
  const auto wq = random_matrix(d, d, rng), wk = random_matrix(d, d, rng), wv = random_matrix(d, d, rng);
  Mat<double> table = random_matrix(2, d, rng);
  Mat<double> edges = Mat<double>::Zero(n, n);
  edges(1, 0) = 1;  // 0 -> 1 only
  const auto a = probes::relation_attention_value(x, edges, table, wq, wk, wv, n, 1);
  table.row(1) += random_matrix(1, d, rng);
  const auto b = probes::relation_attention_value(x, edges, table, wq, wk, wv, n, 1);
  // Row 2 takes part in no edge; rows 0 and 1 share the edge 0 -> 1.
  CHECK(a.row(2) == b.row(2));
  CHECK(a.row(1) != b.row(1));
}

TEST_CASE("masked keys do not move the attention weights") {
  std::mt19937_64 rng(6);
  const int n = 4, d = 8;
  auto x = random_matrix(n, d, rng);
  const auto wq = random_matrix(d, d, rng), wk = random_matrix(d, d, rng), wv = random_matrix(d, d, rng);
  const auto table = random_matrix(2, d, rng);
  Mat<double> edges = Mat<double>::Ones(n, n);
  edges(0, 2) = 0;
  const auto a = probes::relation_attention_value(x, edges, table, wq, wk, wv, n, 2);
  x.row(2) += random_matrix(1, d, rng);
  const auto b = probes::relation_attention_value(x, edges, table, wq, wk, wv, n, 2);
  CHECK(a.row(0) == b.row(0));
}

TEST_CASE("edge derivative stays finite for a strongly blocked key") {
  std::mt19937_64 rng(12);
  const int n = 3, d = 8;
  Mat<float> x = random_matrix(n, d, rng).cast<float>();
  x.row(2) = 40.0f * x.row(0);
  const Mat<float> w = Mat<float>::Identity(d, d) * 30.0f;
  Mat<float> edges = Mat<float>::Ones(n, n);
  edges(0, 2) = 0;
  Mat<float> d_edges = Mat<float>::Zero(n, n);
  Tape<float> t;
  ops::AttentionInputs<float> in;
  in.xq = in.xkv = t.constant_ref(x);
  in.edges = t.external(edges, &d_edges);
  in.table = t.constant(Mat<float>::Zero(2, d));
  in.wq = in.wk = in.wv = t.constant_ref(w);
  Var out = ops::mean_all(t, ops::relation_attention(t, in, {n, 1, false}));
  CHECK(std::isfinite(t.value(out)(0, 0)));
  t.backward(out);
  CHECK(d_edges.allFinite());
}

TEST_CASE("edge derivative of a blocked key far above its row matches finite differences") {
  std::mt19937_64 rng(21);
  const int n = 3, d = 4;
  Mat<double> x = random_matrix(n, d, rng);
  x.row(1) = 3.0 * x.row(0);  // key 1 scores several nats above row 0's open keys
  const Mat<double> w = random_matrix(d, d, rng);
  const Mat<double> wq = Mat<double>::Identity(d, d) * (2.0 / x.row(0).norm());
  Mat<double> edges = Mat<double>::Ones(n, n);
  edges(0, 1) = edges(2, 1) = 0;
  auto loss = [&](const Mat<double>& e, Mat<double>* grad) {
    Tape<double> t;
    ops::AttentionInputs<double> in;
    in.xq = in.xkv = t.constant_ref(x);
    in.edges = grad ? t.external(e, grad) : t.constant_ref(e);
    in.table = t.constant(Mat<double>::Zero(2, d));
    in.wq = in.wk = t.constant_ref(wq);
    in.wv = t.constant_ref(w);
    Var out = ops::mean_all(t, ops::relation_attention(t, in, {n, 1, false}));
    const double v = t.value(out)(0, 0);
    if (grad) t.backward(out);
    return v;
  };
  const Mat<double> scores = (x * wq) * (x * wq).transpose() / std::sqrt(static_cast<double>(d));
  double excess = -1e9;
  for (int i : {0, 2}) {
    double top = -1e9;
    for (int j = 0; j < n; ++j)
      if (edges(i, j) == 1 || i == j) top = std::max(top, scores(i, j));
    excess = std::max(excess, scores(i, 1) - top);
  }
  REQUIRE(excess > ops::kRatioCapNats);

  Mat<double> grad = Mat<double>::Zero(n, n);
  loss(edges, &grad);
  const double h = 1e-6;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      Mat<double> ep = edges, em = edges;
      ep(i, j) += h;
      em(i, j) -= h;
      const double fd = (loss(ep, nullptr) - loss(em, nullptr)) / (2 * h);
      CHECK(grad(i, j) == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("isolation and causality probes") {
  const auto r = probes::isolation_probe(20, 4, 11);
  CHECK(r.probes > 0);
  CHECK(r.violations == 0);
  CHECK(r.causal_violations == 0);
}

TEST_CASE("identical agents give identical representations without agent embeddings") {
  std::mt19937_64 rng(8);
  auto dims = probes::small_dims(3, 8, 5);
  dims.agent_embedding = false;
  Model<double> model(dims, 3);
  Mat<double> obs(3, 5);
  const auto row = random_matrix(1, 5, rng);
  for (int i = 0; i < 3; ++i) obs.row(i) = row;
  const auto rep = model.encode_rep(obs, Mat<double>::Ones(3, 3));
  CHECK((rep.row(0) - rep.row(1)).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((rep.row(0) - rep.row(2)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("single agent model is finite") {
  std::mt19937_64 rng(9);
  Model<double> model(probes::small_dims(1, 8, 4), 1);
  const auto v = model.encode_values(random_matrix(5, 4, rng), Mat<double>::Zero(1, 1));
  CHECK(v.rows() == 5);
  CHECK(v.allFinite());
}

TEST_CASE("a dominant logit bias dominates the softmax") {
  auto dims = probes::small_dims(2, 8, 4);
  Model<double> model(dims, 1);
  for (auto& p : model.decoder().all()) p.value.setZero();
  for (int m = 0; m < 2; ++m) model.decoder()[model.layout().logit_b[static_cast<std::size_t>(m)]].value(0, 2) = 10.0;
  std::mt19937_64 rng(1);
  const auto obs = random_matrix(2, 4, rng);
  const Mat<double> e = Mat<double>::Ones(2, 2);
  const auto logits = model.decode_logits(model.encode_rep(obs, e), std::vector<int>{0, 0}, e);
  for (int r = 0; r < 2; ++r) {
    const auto row = logits.row(r).head(5);
    const double p2 = std::exp(row(2) - ops::log_sum_exp<double>(row));
    CHECK(p2 > 0.999);
  }
}

TEST_CASE("act is reproducible and consistent with evaluate_actions") {
  std::mt19937_64 rng(12);
  auto dims = probes::small_dims(3, 8, 6);
  dims.agent_class = {0, 0, 1};
  dims.action_counts = {5, 5, 6};
  Model<double> model(dims, 4);
  for (auto& p : model.decoder().all()) p.value += random_matrix(p.value.rows(), p.value.cols(), rng, 0.2);
  const auto obs = random_matrix(4 * 3, 6, rng);
  Mat<double> e = Mat<double>::Ones(3, 3);
  e(2, 0) = 0;

  const auto g1 = model.act(obs, e, ActMode::kGreedy, {});
  const auto g2 = model.act(obs, e, ActMode::kGreedy, {});
  CHECK(g1.actions == g2.actions);
  CHECK(g1.log_probs == g2.log_probs);

  std::vector<std::mt19937_64> r1(4, std::mt19937_64(5)), r2(4, std::mt19937_64(5));
  const auto s1 = model.act(obs, e, ActMode::kSample, r1);
  const auto s2 = model.act(obs, e, ActMode::kSample, r2);
  CHECK(s1.actions == s2.actions);

  const auto ev = model.evaluate_actions(obs, s1.actions, e);
  double worst = 0.0;
  for (std::size_t r = 0; r < ev.log_probs.size(); ++r) {
    worst = std::max(worst, std::abs(ev.log_probs[r] - s1.log_probs[r]));
    CHECK(ev.values[r] == s1.values[r]);
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("entropy of uniform and peaked policies") {
  std::mt19937_64 rng(13);
  auto dims = probes::small_dims(2, 8, 4);
  dims.agent_class = {0, 1};
  dims.action_counts = {5, 6};
  Model<double> model(dims, 2);
  for (auto i : model.layout().logit_w) model.decoder()[i].value.setZero();
  for (auto i : model.layout().logit_b) model.decoder()[i].value.setZero();
  const auto obs = random_matrix(2, 4, rng);
  const Mat<double> e = Mat<double>::Ones(2, 2);
  auto ev = model.evaluate_actions(obs, std::vector<int>{1, 5}, e);
  CHECK(ev.entropy[0] == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  CHECK(ev.entropy[1] == doctest::Approx(std::log(6.0)).epsilon(1e-12));
  for (auto i : model.layout().logit_b) model.decoder()[i].value(0, 3) = 50.0;
  ev = model.evaluate_actions(obs, std::vector<int>{3, 3}, e);
  CHECK(ev.entropy[0] < 1e-15);
  CHECK(ev.log_probs[0] == doctest::Approx(0.0));
}

TEST_CASE("sampled joint actions follow the autoregressive policy") {
  std::mt19937_64 rng(21);
  Model<double> model(probes::small_dims(2, 8, 4, 1, 1.0), 7);
  for (auto& p : model.decoder().all()) p.value += random_matrix(p.value.rows(), p.value.cols(), rng, 0.3);
  const auto obs = random_matrix(2, 4, rng);
  const Mat<double> e = Mat<double>::Ones(2, 2);
  const auto rep = model.encode_rep(obs, e);

  // Exact joint probabilities p(a0) p(a1 | a0).
  Mat<double> exact(5, 5);
  for (int a0 = 0; a0 < 5; ++a0) {
    const auto l = model.decode_logits(rep, std::vector<int>{a0, 0}, e);
    const auto r0 = l.row(0).head(5), r1 = l.row(1).head(5);
    const double p0 = std::exp(r0(a0) - ops::log_sum_exp<double>(r0));
    for (int a1 = 0; a1 < 5; ++a1) exact(a0, a1) = p0 * std::exp(r1(a1) - ops::log_sum_exp<double>(r1));
  }
  const int draws = 10000;
  Mat<double> obs_batch(2 * draws, 4);
  for (int b = 0; b < draws; ++b) obs_batch.middleRows(2 * b, 2) = obs;
  std::vector<std::mt19937_64> rngs;
  for (int b = 0; b < draws; ++b) rngs.emplace_back(1000 + b);
  const auto seq = model.act(obs_batch, e, ActMode::kSample, rngs);
  Mat<double> freq = Mat<double>::Zero(5, 5);
  for (int b = 0; b < draws; ++b) freq(seq.actions[2 * b], seq.actions[2 * b + 1]) += 1.0 / draws;
  CHECK((freq - exact).cwiseAbs().maxCoeff() <= 0.02);
  for (int a0 = 0; a0 < 5; ++a0) CHECK(std::abs(freq.row(a0).sum() - exact.row(a0).sum()) <= 0.02);
}

TEST_CASE("target network copies and blends") {
  Model<float> model(probes::small_dims(2, 8, 4), 1);
  for (auto& p : model.encoder().all()) p.value.array() += 1.0f;
  const auto before = model.target()[0].value;
  model.ema_target(0.0f);
  CHECK(model.target()[0].value == before);
  model.ema_target(1.0f);
  CHECK(model.target()[0].value == model.encoder()[0].value);
  for (auto& p : model.encoder().all()) p.value.array() += 1.0f;
  model.sync_target();
  for (std::size_t i = 0; i < model.encoder().size(); ++i) {
    CHECK(model.target()[static_cast<int>(i)].value == model.encoder()[static_cast<int>(i)].value);
  }
}

TEST_CASE("dims validation") {
  auto d = probes::small_dims(2, 8, 4);
  d.n_heads = 3;
  CHECK_THROWS_AS(d.validate(), std::invalid_argument);
  d = probes::small_dims(2, 8, 4);
  d.action_counts = {5};
  CHECK_THROWS_AS(d.validate(), std::invalid_argument);
}
