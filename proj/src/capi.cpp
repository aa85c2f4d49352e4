#include "commformer/commformer.h"

#include "checkpoint.hpp"
#include "config.hpp"
#include "harness.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <streambuf>
#include <string>

struct cf_config {
  commformer::RunConfig cfg;
};

struct cf_trainer {
  commformer::RunConfig cfg;
  std::unique_ptr<commformer::train::Trainer> trainer;
  std::string last_metrics = "{}";
};

struct cf_policy {
  commformer::Checkpoint ck;
};

namespace {

thread_local std::string g_error;

cf_status fail(cf_status s, const std::string& msg) {
  g_error = msg;
  return s;
}

// Maps the active exception to a status.
cf_status translate() {
  try {
    throw;
  } catch (const commformer::ConfigError& e) {
    return fail(CF_ERR_CONFIG, e.what());
  } catch (const commformer::CheckpointMismatch& e) {
    return fail(CF_ERR_MISMATCH, e.what());
  } catch (const commformer::CheckpointError& e) {
    return fail(CF_ERR_IO, e.what());
  } catch (const commformer::train::NonFiniteError& e) {
    return fail(CF_ERR_NONFINITE, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(CF_ERR_IO, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(CF_ERR_ARGUMENT, e.what());
  } catch (const std::exception& e) {
    return fail(CF_ERR_RUNTIME, e.what());
  } catch (...) {
    return fail(CF_ERR_RUNTIME, "unknown error");
  }
}

template <class F>
cf_status guarded(F&& f) {
  g_error.clear();
  try {
    f();
    return CF_OK;
  } catch (...) {
    return translate();
  }
}

cf_status copy_out(const std::string& s, char* buf, size_t cap, size_t* needed) {
  if (needed != nullptr) *needed = s.size() + 1;
  if (buf == nullptr || cap < s.size() + 1) return fail(CF_ERR_ARGUMENT, "buffer too small");
  std::memcpy(buf, s.c_str(), s.size() + 1);
  return CF_OK;
}

// Forwards complete lines to a callback.
class LineBuf : public std::streambuf {
 public:
  LineBuf(cf_progress_fn fn, void* user) : fn_(fn), user_(user) {}
  ~LineBuf() override {
    if (!line_.empty()) fn_(line_.c_str(), user_);
  }

 protected:
  int_type overflow(int_type ch) override {
    if (ch == traits_type::eof()) return traits_type::not_eof(ch);
    if (ch == '\n') {
      fn_(line_.c_str(), user_);
      line_.clear();
    } else {
      line_.push_back(static_cast<char>(ch));
    }
    return ch;
  }

 private:
  cf_progress_fn fn_;
  void* user_;
  std::string line_;
};

#define CF_REQUIRE(cond, msg) \
  if (!(cond)) return fail(CF_ERR_ARGUMENT, msg)

}  // namespace

extern "C" {

const char* cf_last_error(void) { return g_error.c_str(); }

const char* cf_status_name(cf_status status) {
  switch (status) {
    case CF_OK: return "ok";
    case CF_ERR_ARGUMENT: return "invalid argument";
    case CF_ERR_CONFIG: return "configuration error";
    case CF_ERR_IO: return "i/o error";
    case CF_ERR_MISMATCH: return "checkpoint mismatch";
    case CF_ERR_NONFINITE: return "non-finite value";
    case CF_ERR_RUNTIME: return "runtime error";
  }
  return "unknown status";
}

const char* cf_version(void) { return COMMFORMER_VERSION; }

int cf_resolve_threads(int requested) { return commformer::resolve_threads(requested); }

cf_status cf_config_default(cf_config** out) {
  CF_REQUIRE(out != nullptr, "null output handle");
  return guarded([&] { *out = new cf_config(); });
}

cf_status cf_config_load(const char* path, cf_config** out) {
  CF_REQUIRE(path != nullptr && out != nullptr, "null argument");
  return guarded([&] { *out = new cf_config{commformer::load_config(path)}; });
}

cf_status cf_config_parse(const char* text, cf_config** out) {
  CF_REQUIRE(text != nullptr && out != nullptr, "null argument");
  return guarded([&] { *out = new cf_config{commformer::parse_config(text)}; });
}

cf_status cf_config_set(cf_config* cfg, const char* key, const char* value) {
  CF_REQUIRE(cfg != nullptr && key != nullptr && value != nullptr, "null argument");
  return guarded([&] { cfg->cfg.set(key, value); });
}

cf_status cf_config_validate(const cf_config* cfg) {
  CF_REQUIRE(cfg != nullptr, "null config");
  return guarded([&] { cfg->cfg.validate(); });
}

cf_status cf_config_to_string(const cf_config* cfg, char* buf, size_t cap, size_t* needed) {
  CF_REQUIRE(cfg != nullptr, "null config");
  g_error.clear();
  return copy_out(cfg->cfg.to_string(), buf, cap, needed);
}

void cf_config_free(cf_config* cfg) { delete cfg; }

cf_status cf_train(const cf_config* cfg, const char* out_dir, int threads, cf_progress_fn progress, void* user,
                   cf_train_summary* summary) {
  CF_REQUIRE(cfg != nullptr, "null config");
  return guarded([&] {
    commformer::RunConfig c = cfg->cfg;
    if (out_dir != nullptr) c.out_dir = out_dir;
    commformer::TrainOptions opt;
    opt.threads = commformer::resolve_threads(threads);
    std::unique_ptr<LineBuf> buf;
    std::unique_ptr<std::ostream> os;
    if (progress != nullptr) {
      buf = std::make_unique<LineBuf>(progress, user);
      os = std::make_unique<std::ostream>(buf.get());
      opt.progress = os.get();
    }
    const auto s = commformer::run_training(c, opt);
    if (summary != nullptr) {
      const double nan = std::numeric_limits<double>::quiet_NaN();
      summary->iterations = s.iterations;
      summary->env_steps = s.env_steps;
      summary->last_mean_return = s.last && s.last->mean_return ? *s.last->mean_return : nan;
      summary->last_success_rate = s.last && s.last->success_rate ? *s.last->success_rate : nan;
    }
  });
}

cf_status cf_trainer_create(const cf_config* cfg, int threads, cf_trainer** out) {
  CF_REQUIRE(cfg != nullptr && out != nullptr, "null argument");
  return guarded([&] {
    cfg->cfg.validate();
    auto tr = std::make_unique<cf_trainer>();
    tr->cfg = cfg->cfg;
    tr->trainer = std::make_unique<commformer::train::Trainer>(tr->cfg.trainer_setup(),
                                                               commformer::resolve_threads(threads));
    *out = tr.release();
  });
}

cf_status cf_trainer_step(cf_trainer* tr) {
  CF_REQUIRE(tr != nullptr, "null trainer");
  CF_REQUIRE(!tr->trainer->finished(), "training already finished");
  return guarded([&] { tr->last_metrics = tr->trainer->step().to_json().dump(); });
}

cf_status cf_trainer_metrics(const cf_trainer* tr, char* buf, size_t cap, size_t* needed) {
  CF_REQUIRE(tr != nullptr, "null trainer");
  g_error.clear();
  return copy_out(tr->last_metrics, buf, cap, needed);
}

int cf_trainer_finished(const cf_trainer* tr) { return tr == nullptr || tr->trainer->finished() ? 1 : 0; }

long long cf_trainer_env_steps(const cf_trainer* tr) { return tr == nullptr ? 0 : tr->trainer->env_steps(); }

cf_status cf_trainer_graph(const cf_trainer* tr, uint8_t* edges, size_t cap) {
  CF_REQUIRE(tr != nullptr && edges != nullptr, "null argument");
  const auto g = tr->trainer->current_graph();
  const auto n = static_cast<size_t>(g.n_agents());
  CF_REQUIRE(cap >= n * n, "buffer too small");
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < n; ++j) edges[i * n + j] = g.edges(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  return CF_OK;
}

cf_status cf_trainer_save(const cf_trainer* tr, const char* path) {
  CF_REQUIRE(tr != nullptr && path != nullptr, "null argument");
  return guarded([&] {
    commformer::save_checkpoint(path, tr->cfg, tr->trainer->learner(), tr->trainer->iteration(),
                                tr->trainer->env_steps());
  });
}

void cf_trainer_free(cf_trainer* tr) { delete tr; }

cf_eval_options cf_eval_defaults(void) {
  cf_eval_options o;
  o.episodes = 500;
  o.seed = 12345;
  o.sample = 0;
  o.trace_path = nullptr;
  return o;
}

cf_status cf_policy_load(const char* path, cf_policy** out) {
  CF_REQUIRE(path != nullptr && out != nullptr, "null argument");
  return guarded([&] { *out = new cf_policy{commformer::load_checkpoint(path)}; });
}

cf_status cf_policy_check(const cf_policy* p, const cf_config* cfg) {
  CF_REQUIRE(p != nullptr && cfg != nullptr, "null argument");
  return guarded([&] { commformer::check_compatible(p->ck, cfg->cfg); });
}

int cf_policy_n_agents(const cf_policy* p) { return p == nullptr ? 0 : p->ck.learner.model.dims().n_agents; }

int cf_policy_obs_dim(const cf_policy* p) { return p == nullptr ? 0 : p->ck.learner.model.dims().obs_dim; }

cf_status cf_policy_eval(const cf_policy* p, const cf_eval_options* opt, cf_eval_report* out) {
  CF_REQUIRE(p != nullptr && out != nullptr, "null argument");
  const cf_eval_options o = opt != nullptr ? *opt : cf_eval_defaults();
  CF_REQUIRE(o.episodes >= 1, "episodes must be >= 1");
  return guarded([&] {
    commformer::EvalOptions eo;
    eo.episodes = o.episodes;
    eo.seed = o.seed;
    eo.sample = o.sample != 0;
    std::ofstream trace;
    if (o.trace_path != nullptr) {
      trace.open(o.trace_path, std::ios::binary | std::ios::trunc);
      if (!trace) throw commformer::CheckpointError(std::string("cannot write trace '") + o.trace_path + "'");
      eo.trace = &trace;
    }
    const auto r = commformer::evaluate_checkpoint(p->ck, eo);
    out->episodes = r.episodes;
    out->success_rate = r.success_rate;
    out->mean_steps = r.mean_steps;
    out->std_steps = r.std_steps;
    out->se_steps = r.se_steps;
    out->mean_return = r.mean_return;
    out->std_return = r.std_return;
    out->se_return = r.se_return;
  });
}

cf_status cf_policy_act(const cf_policy* p, const float* obs, int batch, int* actions) {
  CF_REQUIRE(p != nullptr && obs != nullptr && actions != nullptr, "null argument");
  CF_REQUIRE(batch >= 1, "batch must be >= 1");
  return guarded([&] {
    const auto& model = p->ck.learner.model;
    const int n = model.dims().n_agents;
    const int od = model.dims().obs_dim;
    commformer::Mat<float> o(batch * n, od);
    std::memcpy(o.data(), obs, sizeof(float) * static_cast<size_t>(o.size()));
    const auto edges = commformer::graph::edge_values<float>(p->ck.execution_graph());
    const auto seq = model.act(o, edges, commformer::ActMode::kGreedy, {});
    std::copy(seq.actions.begin(), seq.actions.end(), actions);
  });
}

void cf_policy_free(cf_policy* p) { delete p; }

cf_status cf_ablate(const cf_config* base, const char* sweep_path, const char* out_dir, int threads,
                    cf_progress_fn progress, void* user) {
  CF_REQUIRE(base != nullptr && sweep_path != nullptr, "null argument");
  return guarded([&] {
    const auto sweep = commformer::load_sweep(sweep_path);
    commformer::TrainOptions opt;
    opt.threads = commformer::resolve_threads(threads);
    std::unique_ptr<LineBuf> buf;
    std::unique_ptr<std::ostream> os;
    if (progress != nullptr) {
      buf = std::make_unique<LineBuf>(progress, user);
      os = std::make_unique<std::ostream>(buf.get());
      opt.progress = os.get();
    }
    commformer::run_ablation(base->cfg, sweep, opt, out_dir != nullptr ? out_dir : "");
  });
}

cf_status cf_export(const char* run_dir, int* curves, int* frames) {
  CF_REQUIRE(run_dir != nullptr, "null argument");
  return guarded([&] {
    const auto s = commformer::export_run(run_dir);
    if (curves != nullptr) *curves = s.curves;
    if (frames != nullptr) *frames = s.frames;
  });
}

}  // extern "C"
