// commformer: train, evaluate, sweep and export from the command line.

#include "commformer/commformer.h"

#include "CLI11.hpp"

#include <cstdio>
#include <iostream>
#include <string>
#include <thread>

namespace {

int exit_code(cf_status s) {
  switch (s) {
    case CF_OK: return 0;
    case CF_ERR_NONFINITE:
    case CF_ERR_RUNTIME: return 2;
    default: return 1;
  }
}

int report(cf_status s) {
  if (s != CF_OK) std::cerr << "error: " << cf_last_error() << '\n';
  return exit_code(s);
}

void print_line(const char* line, void*) {
  std::cout << line << '\n' << std::flush;
}

struct ConfigHandle {
  cf_config* p = nullptr;
  ~ConfigHandle() { cf_config_free(p); }
};

int default_threads() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CommFormer: multi-agent PPO with a learned communication graph"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(cf_version()));

  std::string config_path, out_dir, ckpt, sweep_path, run_dir, trace_path;
  int threads = default_threads();
  int episodes = 500;
  std::uint64_t seed = 12345;
  bool sample = false, as_json = false, quiet = false;

  auto* train = app.add_subcommand("train", "Train a policy and write metrics, snapshots and checkpoints");
  train->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out_dir, "Output directory (overrides run.out_dir)");
  train->add_option("--threads", threads, "Rollout worker threads")->check(CLI::PositiveNumber);
  train->add_flag("--quiet", quiet, "No per-iteration progress");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--episodes", episodes, "Episodes")->check(CLI::PositiveNumber);
  eval->add_option("--seed", seed, "Evaluation seed");
  eval->add_option("--config", config_path, "Config whose environment must match the checkpoint")
      ->check(CLI::ExistingFile);
  eval->add_flag("--sample", sample, "Sample actions instead of taking the argmax");
  eval->add_option("--trace", trace_path, "Write a per-step JSONL episode trace");
  eval->add_flag("--json", as_json, "Print the report as JSON");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate every cell of a sweep");
  ablate->add_option("--config", config_path, "Base config file")->required()->check(CLI::ExistingFile);
  ablate->add_option("--sweep", sweep_path, "Sweep file")->required()->check(CLI::ExistingFile);
  ablate->add_option("--out", out_dir, "Output directory (overrides run.out_dir)");
  ablate->add_option("--threads", threads, "Rollout worker threads")->check(CLI::PositiveNumber);

  auto* exp = app.add_subcommand("export", "Write plot-ready CSVs for a run or sweep directory");
  exp->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (*train) {
    ConfigHandle cfg;
    if (cf_status s = cf_config_load(config_path.c_str(), &cfg.p); s != CF_OK) return report(s);
    cf_train_summary sum{};
    const cf_status s = cf_train(cfg.p, out_dir.empty() ? nullptr : out_dir.c_str(), threads,
                                 quiet ? nullptr : print_line, nullptr, &sum);
    if (s != CF_OK) return report(s);
    std::cout << "trained " << sum.iterations << " iterations, " << sum.env_steps << " env steps\n";
    return 0;
  }

  if (*eval) {
    cf_policy* policy = nullptr;
    if (cf_status s = cf_policy_load(ckpt.c_str(), &policy); s != CF_OK) return report(s);
    struct Guard {
      cf_policy* p;
      ~Guard() { cf_policy_free(p); }
    } guard{policy};
    if (!config_path.empty()) {
      ConfigHandle cfg;
      if (cf_status s = cf_config_load(config_path.c_str(), &cfg.p); s != CF_OK) return report(s);
      if (cf_status s = cf_policy_check(policy, cfg.p); s != CF_OK) return report(s);
    }
    cf_eval_options opt = cf_eval_defaults();
    opt.episodes = episodes;
    opt.seed = seed;
    opt.sample = sample ? 1 : 0;
    opt.trace_path = trace_path.empty() ? nullptr : trace_path.c_str();
    cf_eval_report r{};
    if (cf_status s = cf_policy_eval(policy, &opt, &r); s != CF_OK) return report(s);
    if (as_json) {
      std::printf(
          "{\"episodes\":%d,\"success_rate\":%.17g,\"mean_steps\":%.17g,\"std_steps\":%.17g,\"se_steps\":%.17g,"
          "\"mean_return\":%.17g,\"std_return\":%.17g,\"se_return\":%.17g}\n",
          r.episodes, r.success_rate, r.mean_steps, r.std_steps, r.se_steps, r.mean_return, r.std_return,
          r.se_return);
    } else {
      std::printf("episodes      %d\n", r.episodes);
      std::printf("success_rate  %.4f\n", r.success_rate);
      std::printf("mean_steps    %.4f +- %.4f (std %.4f)\n", r.mean_steps, r.se_steps, r.std_steps);
      std::printf("mean_return   %.4f +- %.4f (std %.4f)\n", r.mean_return, r.se_return, r.std_return);
    }
    return 0;
  }

  if (*ablate) {
    ConfigHandle cfg;
    if (cf_status s = cf_config_load(config_path.c_str(), &cfg.p); s != CF_OK) return report(s);
    return report(cf_ablate(cfg.p, sweep_path.c_str(), out_dir.empty() ? nullptr : out_dir.c_str(), threads,
                            print_line, nullptr));
  }

  if (*exp) {
    int curves = 0, frames = 0;
    if (cf_status s = cf_export(run_dir.c_str(), &curves, &frames); s != CF_OK) return report(s);
    std::cout << "wrote " << curves << " curves and " << frames << " adjacency frames\n";
    return 0;
  }
  return 1;
}
