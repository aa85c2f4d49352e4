#include "commformer/commformer.h"

#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

namespace fs = std::filesystem;

namespace {

const char* kTiny =
    "env.name = pp\n"
    "model.hidden_dim = 8\n"
    "train.rollout_threads = 2\n"
    "train.episode_length = 16\n"
    "train.total_env_steps = 64\n"
    "train.ppo_epochs = 1\n"
    "graph.sparsity = 0.67\n";

fs::path scratch(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("cf_capi_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string config_text(const cf_config* cfg) {
  std::size_t needed = 0;
  REQUIRE(cf_config_to_string(cfg, nullptr, 0, &needed) == CF_ERR_ARGUMENT);
  std::string buf(needed, '\0');
  REQUIRE(cf_config_to_string(cfg, buf.data(), buf.size(), &needed) == CF_OK);
  buf.resize(needed - 1);
  return buf;
}

void count_lines(const char*, void* user) { ++*static_cast<int*>(user); }

}  // namespace

TEST_CASE("status names and version") {
  CHECK(std::string(cf_status_name(CF_OK)) == "ok");
  CHECK(std::string(cf_status_name(CF_ERR_MISMATCH)).size() > 0);
  CHECK(std::string(cf_version()) == "0.1.0");
  CHECK(cf_resolve_threads(1) == 1);
}

TEST_CASE("config handles") {
  cf_config* cfg = nullptr;
  REQUIRE(cf_config_parse(kTiny, &cfg) == CF_OK);
  const auto text = config_text(cfg);
  CHECK(text.find("model.hidden_dim = 8") != std::string::npos);

  CHECK(cf_config_set(cfg, "env.grid", "6") == CF_OK);
  CHECK(config_text(cfg).find("env.grid = 6") != std::string::npos);
  CHECK(cf_config_set(cfg, "env.bogus", "1") == CF_ERR_CONFIG);
  CHECK(std::string(cf_last_error()).find("env.bogus") != std::string::npos);
  CHECK(cf_config_validate(cfg) == CF_OK);
  CHECK(cf_config_set(cfg, nullptr, "1") == CF_ERR_ARGUMENT);
  cf_config_free(cfg);

  cf_config* bad = nullptr;
  CHECK(cf_config_parse("env.grid = 5\nnope = 1\n", &bad) == CF_ERR_CONFIG);
  CHECK(bad == nullptr);
  CHECK(std::string(cf_last_error()).find(":2:") != std::string::npos);
  CHECK(cf_config_load("/nonexistent/file.cfg", &bad) != CF_OK);
  CHECK(cf_config_default(nullptr) == CF_ERR_ARGUMENT);
  cf_config_free(nullptr);
}

TEST_CASE("train, load, evaluate and act through the C API") {
  const auto dir = scratch("train");
  cf_config* cfg = nullptr;
  REQUIRE(cf_config_parse(kTiny, &cfg) == CF_OK);
  int progress = 0;
  cf_train_summary sum{};
  REQUIRE(cf_train(cfg, dir.string().c_str(), 1, count_lines, &progress, &sum) == CF_OK);
  CHECK(sum.iterations == 2);
  CHECK(sum.env_steps == 64);
  CHECK(progress == 2);
  CHECK(cf_train(cfg, dir.string().c_str(), 1, nullptr, nullptr, nullptr) == CF_ERR_CONFIG);

  cf_policy* pol = nullptr;
  REQUIRE(cf_policy_load((dir / "checkpoint.bin").string().c_str(), &pol) == CF_OK);
  CHECK(cf_policy_n_agents(pol) == 3);
  CHECK(cf_policy_check(pol, cfg) == CF_OK);

  cf_config* other = nullptr;
  REQUIRE(cf_config_parse(kTiny, &other) == CF_OK);
  REQUIRE(cf_config_set(other, "env.grid", "7") == CF_OK);
  CHECK(cf_policy_check(pol, other) == CF_ERR_MISMATCH);
  cf_config_free(other);

  auto opt = cf_eval_defaults();
  CHECK(opt.episodes == 500);
  opt.episodes = 30;
  cf_eval_report r1{}, r2{};
  REQUIRE(cf_policy_eval(pol, &opt, &r1) == CF_OK);
  REQUIRE(cf_policy_eval(pol, &opt, &r2) == CF_OK);
  CHECK(r1.episodes == 30);
  CHECK(r1.mean_return == r2.mean_return);
  CHECK(r1.mean_steps == r2.mean_steps);

  const int n = cf_policy_n_agents(pol), d = cf_policy_obs_dim(pol);
  std::vector<float> obs(static_cast<std::size_t>(2 * n * d), 0.25f);
  std::vector<int> acts(static_cast<std::size_t>(2 * n), -1);
  REQUIRE(cf_policy_act(pol, obs.data(), 2, acts.data()) == CF_OK);
  for (int a : acts) CHECK((a >= 0 && a < 5));
  CHECK(acts[0] == acts[static_cast<std::size_t>(n)]);
  CHECK(cf_policy_act(pol, nullptr, 1, acts.data()) == CF_ERR_ARGUMENT);
  cf_policy_free(pol);

  int curves = 0, frames = 0;
  REQUIRE(cf_export(dir.string().c_str(), &curves, &frames) == CF_OK);
  CHECK(curves == 9);
  CHECK(frames == 3);

  CHECK(cf_policy_load((dir / "nothing.bin").string().c_str(), &pol) == CF_ERR_IO);
  cf_config_free(cfg);
  fs::remove_all(dir);
}

TEST_CASE("step-wise trainer") {
  cf_config* cfg = nullptr;
  REQUIRE(cf_config_parse(kTiny, &cfg) == CF_OK);
  cf_trainer* tr = nullptr;
  REQUIRE(cf_trainer_create(cfg, 1, &tr) == CF_OK);
  CHECK(cf_trainer_metrics(tr, nullptr, 0, nullptr) == CF_ERR_ARGUMENT);
  while (!cf_trainer_finished(tr)) REQUIRE(cf_trainer_step(tr) == CF_OK);
  CHECK(cf_trainer_env_steps(tr) == 64);
  std::size_t needed = 0;
  cf_trainer_metrics(tr, nullptr, 0, &needed);
  std::string m(needed, '\0');
  REQUIRE(cf_trainer_metrics(tr, m.data(), m.size(), &needed) == CF_OK);
  CHECK(m.find("\"env_steps\":64") != std::string::npos);

  std::vector<std::uint8_t> edges(9, 7);
  REQUIRE(cf_trainer_graph(tr, edges.data(), edges.size()) == CF_OK);
  int on = 0;
  for (auto e : edges) {
    CHECK(e <= 1);
    on += e;
  }
  CHECK(on == 6);
  CHECK(cf_trainer_graph(tr, edges.data(), 4) == CF_ERR_ARGUMENT);

  const auto path = scratch("step").string() + ".bin";
  REQUIRE(cf_trainer_save(tr, path.c_str()) == CF_OK);
  cf_policy* pol = nullptr;
  CHECK(cf_policy_load(path.c_str(), &pol) == CF_OK);
  cf_policy_free(pol);
  std::remove(path.c_str());
  cf_trainer_free(tr);
  cf_config_free(cfg);
}
