#include "envs.hpp"

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

using namespace commformer::envs;

namespace {

int manhattan(Cell a, Cell b) { return std::abs(a.row - b.row) + std::abs(a.col - b.col); }

// Brute-force expectation of the scripted policy over every ordered placement
// of n agents and the prey on distinct cells of a g x g grid. Only agents in
// `goal` count. Returns {E[return], E[steps]}.
std::pair<double, double> manhattan_expectation(int n, int g, int max_steps, double penalty,
                                                const std::vector<int>& goal) {
  const int cells = g * g;
  std::vector<int> pos(static_cast<std::size_t>(n + 1));
  double ret = 0.0;
  double steps = 0.0;
  long long count = 0;
  auto rec = [&](auto&& self, int depth) -> void {
    if (depth == n + 1) {
      const Cell prey{pos[n] / g, pos[n] % g};
      int worst = 0;
      double r = 0.0;
      for (int i : goal) {
        const int d = manhattan(Cell{pos[i] / g, pos[i] % g}, prey);
        worst = std::max(worst, d);
        r -= penalty * (std::min(d, max_steps + 1) - 1);
      }
      ret += r;
      steps += std::min(worst, max_steps);
      ++count;
      return;
    }
    for (int c = 0; c < cells; ++c) {
      if (std::find(pos.begin(), pos.begin() + depth, c) != pos.begin() + depth) continue;
      pos[depth] = c;
      self(self, depth + 1);
    }
  };
  rec(rec, 0);
  return {ret / count, steps / count};
}

}  // namespace

TEST_CASE("reset is seeded and places on distinct cells") {
  GridEnv a(pp_spec());
  GridEnv b(pp_spec());
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    a.reset(seed);
    b.reset(seed);
    CHECK(a.state().agents == b.state().agents);
    CHECK(a.state().prey == b.state().prey);
    std::set<int> used;
    for (auto c : a.state().agents) used.insert(c.row * 5 + c.col);
    used.insert(a.state().prey.row * 5 + a.state().prey.col);
    CHECK(used.size() == 4);
    CHECK(a.state().step == 0);
    CHECK_FALSE(a.state().done);
  }
  a.reset(1);
  const auto first = a.state().agents;
  bool differs = false;
  for (std::uint64_t seed = 2; seed < 10; ++seed) {
    a.reset(seed);
    differs = differs || a.state().agents != first;
  }
  CHECK(differs);
}

TEST_CASE("prey placement is uniform on a 3x3 grid") {
  GridEnv env(pp_spec(3, 3, 1, 20));
  env.reset(99);
  std::map<int, int> hits;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    env.reset();
    ++hits[env.state().prey.row * 3 + env.state().prey.col];
  }
  REQUIRE(hits.size() == 9);
  for (auto [cell, n] : hits) {
    CAPTURE(cell);
    CHECK(std::abs(n / double(trials) - 1.0 / 9.0) <= 0.02);
  }
}

TEST_CASE("observation layout") {
  GridEnv env(pp_spec(3, 5, 1, 20));
  CHECK(env.spec().frame_dim() == 2 + 9 + 2);
  env.reset_to({{2, 2}, {0, 0}, {4, 4}}, Cell{1, 3});

  const auto o = env.observe(0);
  CHECK(o[0] == doctest::Approx(0.5));
  CHECK(o[1] == doctest::Approx(0.5));
  // Prey at offset (-1, +1) lands in patch index 0 * 3 + 2.
  for (int k = 0; k < 9; ++k) CHECK(o[2 + k] == (k == 2 ? 1.0 : 0.0));
  CHECK(o[11] == 0.0);
  CHECK(o[12] == 0.0);

  const auto far = env.observe(1);
  for (int k = 0; k < 9; ++k) CHECK(far[2 + k] == 0.0);
  CHECK(far[0] == 0.0);

  const std::vector<int> stay{kStay, kStay, kStay};
  env.step(stay);
  CHECK(env.observe(0)[12] == doctest::Approx(1.0 / 20.0));
  CHECK_THROWS(env.observe(3));
}

TEST_CASE("stacked frames keep the newest frame last") {
  auto spec = pp_spec(3, 5, 1, 20);
  spec.stacked_frames = 2;
  GridEnv env(spec);
  env.reset_to({{2, 2}, {0, 0}, {4, 4}}, Cell{0, 4});
  const int fd = spec.frame_dim();
  auto obs = env.observations();
  REQUIRE(obs.size() == static_cast<std::size_t>(3 * 2 * fd));
  CHECK(std::equal(obs.begin(), obs.begin() + fd, obs.begin() + fd));
  const std::vector<int> acts{kUp, kStay, kStay};
  env.step(acts);
  obs = env.observations();
  CHECK(obs[0] == doctest::Approx(0.5));
  CHECK(obs[fd] == doctest::Approx(0.25));
}

TEST_CASE("capture agents observe nothing") {
  GridEnv env(pcp_spec(2, 1, 5, 1, 20));
  env.reset_to({{2, 2}, {0, 0}, {1, 1}}, Cell{1, 1});
  for (double v : env.observe(2)) CHECK(v == 0.0);
  CHECK(env.spec().action_counts() == std::vector<int>{5, 5, 6});
}

TEST_CASE("rewards count unset goal flags") {
  GridEnv env(pp_spec(3, 5, 1, 20));
  env.reset_to({{0, 0}, {4, 4}, {4, 0}}, Cell{0, 1});
  const std::vector<int> stay{kStay, kStay, kStay};
  auto r = env.step(stay);
  CHECK(r.reward == doctest::Approx(-0.15));
  CHECK_FALSE(r.done);

  const std::vector<int> right{kRight, kStay, kStay};
  r = env.step(right);
  CHECK(r.reward == doctest::Approx(-0.10));
  CHECK(env.state().goal_flags[0] == 1);
  // Flags persist after leaving the prey cell.
  const std::vector<int> away{kDown, kStay, kStay};
  r = env.step(away);
  CHECK(env.state().goal_flags[0] == 1);
  CHECK(r.reward == doctest::Approx(-0.10));

  env.reset_to({{0, 0}, {0, 2}, {1, 1}}, Cell{0, 1});
  const std::vector<int> converge{kRight, kLeft, kUp};
  r = env.step(converge);
  CHECK(r.reward == 0.0);
  CHECK(r.done);
  CHECK(r.success);
  r = env.step(converge);
  CHECK(r.reward == 0.0);
}

TEST_CASE("episodes end at max_steps without success") {
  GridEnv env(pp_spec(3, 5, 1, 4));
  env.reset_to({{0, 0}, {4, 4}, {4, 0}}, Cell{0, 4});
  const std::vector<int> stay{kStay, kStay, kStay};
  StepResult r;
  for (int t = 0; t < 4; ++t) r = env.step(stay);
  CHECK(r.done);
  CHECK_FALSE(r.success);
  CHECK(env.state().step == 4);
}

TEST_CASE("invalid actions are rejected") {
  GridEnv env(pp_spec());
  CHECK_THROWS(env.step(std::vector<int>{0, 0}));
  CHECK_THROWS(env.step(std::vector<int>{0, 0, kCapturePrey}));
  CHECK_THROWS(env.step(std::vector<int>{-1, 0, 0}));
}

TEST_CASE("pcp capture needs the capture action on the prey cell") {
  GridEnv env(pcp_spec(2, 1, 5, 1, 20));
  env.reset_to({{0, 0}, {0, 2}, {1, 0}}, Cell{0, 1});
  env.step(std::vector<int>{kStay, kStay, kRight});
  CHECK(env.state().agents[2] == Cell{1, 1});
  CHECK(env.state().goal_flags[2] == 0);
  env.step(std::vector<int>{kStay, kStay, kUp});
  CHECK(env.state().goal_flags[2] == 0);
  env.step(std::vector<int>{kRight, kLeft, kCapturePrey});
  CHECK(env.state().success);
}

TEST_CASE("scripted policy takes max Manhattan steps from every placement") {
  const auto spec = pp_spec(3, 5, 1, 20);
  GridEnv env(spec);
  long long placements = 0;
  for (int a = 0; a < 25; ++a) {
    for (int b = 0; b < 25; ++b) {
      for (int c = 0; c < 25; ++c) {
        for (int p = 0; p < 25; ++p) {
          const std::set<int> distinct{a, b, c, p};
          if (distinct.size() != 4) continue;
          const Cell prey{p / 5, p % 5};
          const std::vector<Cell> agents{{a / 5, a % 5}, {b / 5, b % 5}, {c / 5, c % 5}};
          int expect = 0;
          for (auto x : agents) expect = std::max(expect, manhattan(x, prey));
          env.reset_to(agents, prey);
          while (!env.state().done) env.step(scripted_actions(env.state(), spec));
          CHECK(env.state().success);
          if (env.state().step != expect) CHECK(env.state().step == expect);
          ++placements;
        }
      }
    }
  }
  CHECK(placements == 25 * 24 * 23 * 22);
}

TEST_CASE("relay scout sees the prey quadrant and no patch") {
  const auto spec = relay_spec(3, 5, 20);
  GridEnv env(spec);
  CHECK(spec.frame_dim() == 2 + 1 + 2 + 4);
  CHECK(spec.goal_agents() == std::vector<int>{1, 2});
  CHECK(quadrant(Cell{0, 0}, 5) == 0);
  CHECK(quadrant(Cell{0, 3}, 5) == 1);
  CHECK(quadrant(Cell{3, 0}, 5) == 2);
  CHECK(quadrant(Cell{4, 4}, 5) == 3);
  CHECK(quadrant(Cell{2, 2}, 5) == 0);

  env.reset_to({{0, 0}, {2, 2}, {4, 4}}, Cell{4, 1});
  CHECK(env.state().goal_flags[0] == 1);
  const auto scout = env.observe(0);
  for (int q = 0; q < 4; ++q) CHECK(scout[5 + q] == (q == 2 ? 1.0 : 0.0));
  const auto other = env.observe(1);
  CHECK(other[2] == 0.0);
  for (int q = 0; q < 4; ++q) CHECK(other[5 + q] == 0.0);
  // Standing on the prey fills the vision-0 patch.
  env.reset_to({{0, 0}, {2, 2}, {4, 4}}, Cell{2, 2});
  CHECK(env.observe(1)[2] == 1.0);

  const auto r = env.step(std::vector<int>{kStay, kStay, kStay});
  CHECK(r.reward == doctest::Approx(-0.05));
}

TEST_CASE("joint optimum matches the closed-form scripted expectation") {
  const auto pp = pp_spec(3, 5, 1, 20);
  const auto opt = joint_mdp_optimum(pp);
  const auto [ret, steps] = manhattan_expectation(3, 5, 20, 0.05, {0, 1, 2});
  CHECK(opt.expected_steps == doctest::Approx(steps).epsilon(1e-12));
  CHECK(opt.expected_return == doctest::Approx(ret).epsilon(1e-12));
  CHECK(opt.expected_steps == doctest::Approx(4.6768).epsilon(1e-4));

  const auto relay = relay_spec(3, 5, 20);
  const auto ropt = joint_mdp_optimum(relay);
  const auto [rret, rsteps] = manhattan_expectation(3, 5, 20, 0.05, {1, 2});
  CHECK(ropt.expected_steps == doctest::Approx(rsteps).epsilon(1e-12));
  CHECK(ropt.expected_return == doctest::Approx(rret).epsilon(1e-12));
}

TEST_CASE("spec validation") {
  CHECK_THROWS(pp_spec(0));
  CHECK_THROWS(pp_spec(3, 1));
  CHECK_THROWS(relay_spec(1));
  CHECK_THROWS(make_spec("nope", 3, 1, 5, 1, 20));
  CHECK(make_spec("pcp", 3, 1, 5, 1, 20).n_agents == 3);
}
