#include "harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace commformer {

namespace {

long env_long(const char* name) {
  const char* v = std::getenv(name);
  if (v == nullptr || *v == '\0') return 0;
  char* end = nullptr;
  const long x = std::strtol(v, &end, 10);
  return (end != nullptr && *end == '\0') ? x : 0;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

}  // namespace

bool deterministic_mode() { return env_long("COMMFORMER_DETERMINISTIC") == 1; }

int resolve_threads(int requested) {
  int t = std::max(1, requested);
  const long cap = env_long("COMMFORMER_THREADS");
  if (cap > 0) t = std::min<long>(t, cap);
  if (deterministic_mode()) t = 1;
  return t;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::pair<double, double> mean_std(const std::vector<double>& x) {
  if (x.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double v : x) m += v;
  m /= static_cast<double>(x.size());
  if (x.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return {m, std::sqrt(ss / static_cast<double>(x.size() - 1))};
}

// ---------------------------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
  return {{"episodes", episodes},     {"success_rate", success_rate}, {"mean_steps", mean_steps},
          {"std_steps", std_steps},   {"se_steps", se_steps},         {"mean_return", mean_return},
          {"std_return", std_return}, {"se_return", se_return}};
}

EvalReport evaluate(const Model<float>& model, const graph::CommGraph& graph, const envs::EnvSpec& spec,
                    const EvalOptions& opt) {
  if (opt.episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
  if (opt.batch < 1) throw std::invalid_argument("evaluate: batch must be >= 1");
  spec.validate();
  const auto& dims = model.dims();
  if (dims.n_agents != spec.n_agents || dims.obs_dim != spec.obs_dim() || dims.action_counts != spec.action_counts()) {
    throw std::invalid_argument("evaluate: model does not match the environment");
  }
  const int n = spec.n_agents;
  const int od = spec.obs_dim();
  const Mat<float> edges = graph::edge_values<float>(graph);
  const ActMode mode = opt.sample ? ActMode::kSample : ActMode::kGreedy;

  std::vector<double> steps(static_cast<std::size_t>(opt.episodes));
  std::vector<double> returns(static_cast<std::size_t>(opt.episodes));
  int successes = 0;

  for (int e0 = 0; e0 < opt.episodes; e0 += opt.batch) {
    const int count = std::min(opt.batch, opt.episodes - e0);
    std::vector<envs::GridEnv> envs;
    std::vector<std::mt19937_64> rngs;
    envs.reserve(static_cast<std::size_t>(count));
    for (int b = 0; b < count; ++b) {
      const auto ep = static_cast<std::uint64_t>(e0 + b);
      envs.emplace_back(spec);
      envs.back().reset(train::derive_seed(opt.seed, 0, ep));
      rngs.emplace_back(train::derive_seed(opt.seed, 1, ep));
    }
    std::vector<int> active(static_cast<std::size_t>(count));
    for (int b = 0; b < count; ++b) active[static_cast<std::size_t>(b)] = b;
    while (!active.empty()) {
      const int m = static_cast<int>(active.size());
      Mat<float> obs(m * n, od);
      std::vector<std::mt19937_64> act_rngs;
      act_rngs.reserve(static_cast<std::size_t>(m));
      for (int r = 0; r < m; ++r) {
        const int b = active[static_cast<std::size_t>(r)];
        const auto o = envs[static_cast<std::size_t>(b)].observations();
        for (int i = 0; i < n; ++i) {
          for (int c = 0; c < od; ++c) obs(r * n + i, c) = static_cast<float>(o[static_cast<std::size_t>(i * od + c)]);
        }
        act_rngs.push_back(rngs[static_cast<std::size_t>(b)]);
      }
      const auto seq = model.act(obs, edges, mode, std::span<std::mt19937_64>(act_rngs));
      std::vector<int> still;
      for (int r = 0; r < m; ++r) {
        const int b = active[static_cast<std::size_t>(r)];
        rngs[static_cast<std::size_t>(b)] = act_rngs[static_cast<std::size_t>(r)];
        auto& env = envs[static_cast<std::size_t>(b)];
        std::vector<int> joint(seq.actions.begin() + r * n, seq.actions.begin() + (r + 1) * n);
        const auto res = env.step(joint);
        const auto idx = static_cast<std::size_t>(e0 + b);
        returns[idx] += res.reward;
        if (opt.trace != nullptr) {
          const auto& s = env.state();
          nlohmann::json rec;
          rec["episode"] = e0 + b;
          rec["step"] = s.step;
          nlohmann::json pos = nlohmann::json::array();
          for (const auto& c : s.agents) pos.push_back({c.row, c.col});
          rec["agents"] = std::move(pos);
          rec["prey"] = {s.prey.row, s.prey.col};
          rec["actions"] = joint;
          rec["reward"] = res.reward;
          rec["flags"] = s.goal_flags;
          rec["done"] = res.done;
          *opt.trace << rec.dump() << '\n';
        }
        if (res.done) {
          steps[idx] = env.state().step;
          successes += res.success ? 1 : 0;
        } else {
          still.push_back(b);
        }
      }
      active = std::move(still);
    }
  }

  EvalReport rep;
  rep.episodes = opt.episodes;
  rep.success_rate = static_cast<double>(successes) / opt.episodes;
  const double root = std::sqrt(static_cast<double>(opt.episodes));
  std::tie(rep.mean_steps, rep.std_steps) = mean_std(steps);
  std::tie(rep.mean_return, rep.std_return) = mean_std(returns);
  rep.se_steps = rep.std_steps / root;
  rep.se_return = rep.std_return / root;
  return rep;
}

EvalReport evaluate_checkpoint(const Checkpoint& ck, const EvalOptions& opt) {
  return evaluate(ck.learner.model, ck.execution_graph(), ck.config.eval_env_spec(), opt);
}

void check_compatible(const Checkpoint& ck, const RunConfig& cfg) {
  const auto a = ck.config.env_spec();
  const auto b = cfg.env_spec();
  auto mismatch = [](const std::string& what) {
    return CheckpointMismatch("checkpoint does not match the config: " + what + " differs");
  };
  if (a.name != b.name) throw mismatch("env.name");
  if (a.n_agents != b.n_agents) throw mismatch("env.n_agents");
  if (a.class_ids() != b.class_ids()) throw mismatch("agent classes");
  if (a.grid != b.grid) throw mismatch("env.grid");
  if (a.vision != b.vision) throw mismatch("env.vision");
  if (a.stacked_frames != b.stacked_frames) throw mismatch("env.stacked_frames");
  const auto ma = ck.config.model_dims();
  const auto mb = cfg.model_dims();
  if (ma.d_model != mb.d_model || ma.n_heads != mb.n_heads || ma.n_blocks != mb.n_blocks ||
      ma.agent_embedding != mb.agent_embedding) {
    throw mismatch("model shape");
  }
}

// ---------------------------------------------------------------------------

TrainSummary run_training(const RunConfig& cfg, const TrainOptions& opt) {
  cfg.validate();
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  if (fs::exists(out / "metrics.jsonl")) {
    throw ConfigError("output directory '" + cfg.out_dir + "' already holds a run");
  }
  write_text(out / "config.resolved", cfg.to_string());

  train::Trainer trainer(cfg.trainer_setup(), opt.threads);
  std::ofstream metrics(out / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  std::ofstream adjacency(out / "adjacency.jsonl", std::ios::binary | std::ios::trunc);
  if (!metrics || !adjacency) throw std::runtime_error("cannot write into '" + cfg.out_dir + "'");

  auto snapshot = [&] {
    adjacency << graph::snapshot_json(trainer.env_steps(), trainer.learner().alpha.value, trainer.current_graph()).dump()
              << '\n';
    adjacency.flush();
  };
  snapshot();

  TrainSummary sum;
  sum.out_dir = cfg.out_dir;
  const long long total = trainer.setup().train.iterations();
  while (!trainer.finished()) {
    const auto m = trainer.step();
    const bool last = trainer.finished();
    if (m.iter % cfg.log_interval == 0 || last) {
      metrics << m.to_json().dump() << '\n';
      metrics.flush();
      if (opt.progress != nullptr) {
        auto& p = *opt.progress;
        p << "iter " << m.iter << "/" << total << " steps " << m.env_steps;
        if (m.mean_return) {
          p << std::fixed << std::setprecision(3) << " return " << *m.mean_return << " success " << *m.success_rate
            << " len " << *m.mean_ep_len;
          p.unsetf(std::ios::floatfield);
        }
        p << '\n';
      }
    }
    if (m.iter % cfg.snapshot_interval == 0 || last) snapshot();
    if (cfg.checkpoint_interval > 0 && m.iter % cfg.checkpoint_interval == 0 && !last) {
      save_checkpoint((out / ("checkpoint_" + std::to_string(m.iter) + ".bin")).string(), cfg, trainer.learner(),
                      trainer.iteration(), trainer.env_steps());
    }
    sum.last = m;
  }
  sum.checkpoint = (out / "checkpoint.bin").string();
  save_checkpoint(sum.checkpoint, cfg, trainer.learner(), trainer.iteration(), trainer.env_steps());
  sum.iterations = trainer.iteration();
  sum.env_steps = trainer.env_steps();
  return sum;
}

// ---------------------------------------------------------------------------

std::uint64_t label_hash(const std::string& label) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

SweepSpec parse_sweep(const std::string& text, const std::string& origin) {
  SweepSpec sw;
  const auto known = config_keys();
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(number) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = v1, v2, ...'");
    const std::string key = trim(line.substr(0, eq));
    const auto values = split_list(line.substr(eq + 1));
    if (values.empty()) throw ConfigError(where + "no values for '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "'" + key + "' listed twice");
    if (key == "seeds" || key == "run.seed") {
      for (const auto& v : values) {
        std::uint64_t s = 0;
        auto res = std::from_chars(v.data(), v.data() + v.size(), s);
        if (res.ec != std::errc() || res.ptr != v.data() + v.size()) throw ConfigError(where + "invalid seed '" + v + "'");
        sw.seeds.push_back(s);
      }
      continue;
    }
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (key == "run.out_dir") throw ConfigError(where + "run.out_dir cannot be swept");
    sw.axes.emplace_back(key, values);
  }
  if (sw.axes.empty()) throw ConfigError(origin + ": empty sweep (no swept keys)");
  return sw;
}

SweepSpec load_sweep(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read sweep file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_sweep(ss.str(), path);
}

namespace {

std::string slug(const std::string& label) {
  std::string s;
  for (char c : label) {
    const bool keep = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '=';
    s += keep ? c : (c == ',' ? '+' : '_');
  }
  return s;
}

}  // namespace

std::vector<std::pair<std::string, RunConfig>> expand_sweep(const RunConfig& base, const SweepSpec& sweep,
                                                            const std::string& out_dir) {
  if (sweep.axes.empty()) throw ConfigError("empty sweep");
  const std::vector<std::uint64_t> seeds = sweep.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : sweep.seeds;
  std::vector<std::size_t> idx(sweep.axes.size(), 0);
  std::vector<std::pair<std::string, RunConfig>> out;
  std::set<std::string> dirs;
  while (true) {
    std::string label;
    RunConfig cell = base;
    for (std::size_t a = 0; a < sweep.axes.size(); ++a) {
      const auto& [key, values] = sweep.axes[a];
      if (a > 0) label += ",";
      label += key + "=" + values[idx[a]];
      cell.set(key, values[idx[a]]);
    }
    const std::string cell_dir = slug(label);
    for (auto s : seeds) {
      RunConfig c = cell;
      c.seed = s ^ label_hash(label);
      c.out_dir = (fs::path(out_dir) / cell_dir / ("seed_" + std::to_string(s))).string();
      if (!dirs.insert(c.out_dir).second) throw ConfigError("sweep cells overlap in '" + c.out_dir + "'");
      try {
        c.validate();
      } catch (const ConfigError& e) {
        throw ConfigError("cell " + label + ": " + e.what());
      }
      out.emplace_back(label, std::move(c));
    }
    std::size_t a = sweep.axes.size();
    while (a > 0) {
      --a;
      if (++idx[a] < sweep.axes[a].second.size()) break;
      idx[a] = 0;
      if (a == 0) return out;
    }
  }
}

AblationResult run_ablation(const RunConfig& base, const SweepSpec& sweep, const TrainOptions& opt,
                            const std::string& out_dir) {
  AblationResult res;
  res.out_dir = out_dir.empty() ? base.out_dir : out_dir;
  const fs::path root(res.out_dir);
  if (fs::exists(root) && !(fs::is_directory(root) && fs::is_empty(root))) {
    throw ConfigError("ablation output directory '" + res.out_dir + "' is not empty");
  }
  const auto cells = expand_sweep(base, sweep, res.out_dir);
  const std::vector<std::uint64_t> seeds = sweep.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : sweep.seeds;
  fs::create_directories(root);

  std::ofstream csv(root / "results.csv", std::ios::binary | std::ios::trunc);
  csv << "cell,label,seed,run_seed,episodes,success_rate,mean_steps,mean_return,std_return,se_return\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& [label, cfg] = cells[i];
    if (opt.progress != nullptr) *opt.progress << "[" << (i + 1) << "/" << cells.size() << "] " << label << " seed "
                                               << seeds[i % seeds.size()] << '\n';
    TrainOptions quiet = opt;
    quiet.progress = nullptr;
    const auto summary = run_training(cfg, quiet);
    const auto ck = load_checkpoint(summary.checkpoint);
    EvalOptions eo;
    eo.episodes = cfg.eval_episodes;
    eo.seed = cfg.eval_seed;
    AblationRun run;
    run.cell = fs::path(cfg.out_dir).parent_path().filename().string();
    run.label = label;
    run.seed = seeds[i % seeds.size()];
    run.run_seed = cfg.seed;
    run.out_dir = cfg.out_dir;
    run.report = evaluate_checkpoint(ck, eo);
    write_text(fs::path(cfg.out_dir) / "eval.json", run.report.to_json().dump() + "\n");
    csv << run.cell << ",\"" << label << "\"," << run.seed << ',' << run.run_seed << ',' << run.report.episodes << ','
        << format_double(run.report.success_rate) << ',' << format_double(run.report.mean_steps) << ','
        << format_double(run.report.mean_return) << ',' << format_double(run.report.std_return) << ','
        << format_double(run.report.se_return) << '\n';
    csv.flush();
    if (opt.progress != nullptr) {
      *opt.progress << "    success " << run.report.success_rate << " steps " << run.report.mean_steps << " return "
                    << run.report.mean_return << '\n';
    }
    res.runs.push_back(std::move(run));
  }

  std::vector<std::string> order;
  std::map<std::string, std::vector<const AblationRun*>> by_cell;
  for (const auto& r : res.runs) {
    if (by_cell.find(r.cell) == by_cell.end()) order.push_back(r.cell);
    by_cell[r.cell].push_back(&r);
  }
  std::ofstream sum(root / "summary.csv", std::ios::binary | std::ios::trunc);
  sum << "cell,label,n,return_mean,return_std,return_se,success_mean,success_std,steps_mean,steps_std\n";
  std::ostringstream txt;
  txt << std::left << std::setw(48) << "cell" << std::right << std::setw(4) << "n" << std::setw(20) << "return"
      << std::setw(20) << "success" << std::setw(20) << "steps" << '\n';
  for (const auto& name : order) {
    const auto& rs = by_cell[name];
    std::vector<double> ret, succ, st;
    for (const auto* r : rs) {
      ret.push_back(r->report.mean_return);
      succ.push_back(r->report.success_rate);
      st.push_back(r->report.mean_steps);
    }
    AblationCell c;
    c.cell = name;
    c.label = rs.front()->label;
    c.n = static_cast<int>(rs.size());
    std::tie(c.return_mean, c.return_std) = mean_std(ret);
    c.return_se = c.return_std / std::sqrt(static_cast<double>(c.n));
    std::tie(c.success_mean, c.success_std) = mean_std(succ);
    std::tie(c.steps_mean, c.steps_std) = mean_std(st);
    sum << c.cell << ",\"" << c.label << "\"," << c.n << ',' << format_double(c.return_mean) << ','
        << format_double(c.return_std) << ',' << format_double(c.return_se) << ',' << format_double(c.success_mean)
        << ',' << format_double(c.success_std) << ',' << format_double(c.steps_mean) << ','
        << format_double(c.steps_std) << '\n';
    auto pm = [](double m, double s) {
      std::ostringstream os;
      os << std::fixed << std::setprecision(3) << m << " +- " << s;
      return os.str();
    };
    txt << std::left << std::setw(48) << c.label << std::right << std::setw(4) << c.n << std::setw(20)
        << pm(c.return_mean, c.return_std) << std::setw(20) << pm(c.success_mean, c.success_std) << std::setw(20)
        << pm(c.steps_mean, c.steps_std) << '\n';
    res.cells.push_back(c);
  }
  write_text(root / "summary.txt", txt.str());
  if (opt.progress != nullptr) *opt.progress << txt.str();
  return res;
}

// ---------------------------------------------------------------------------

ExportSummary export_run(const std::string& run_dir) {
  const fs::path root(run_dir);
  if (!fs::is_directory(root)) throw ConfigError("run directory '" + run_dir + "' does not exist");
  std::vector<fs::path> runs;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file() && entry.path().filename() == "metrics.jsonl" &&
        entry.path().parent_path().filename() != "export") {
      runs.push_back(entry.path().parent_path());
    }
  }
  if (runs.empty()) throw ConfigError("no metrics.jsonl found under '" + run_dir + "'");
  std::sort(runs.begin(), runs.end());

  static const char* kMetrics[] = {"mean_return", "mean_ep_len", "success_rate", "L_enc", "L_dec",
                                   "entropy",     "grad_norm",   "alpha_drift",  "edges_changed"};
  std::map<std::string, std::map<long long, std::vector<double>>> curves;
  for (const auto& r : runs) {
    std::ifstream in(r / "metrics.jsonl");
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
      ++number;
      if (trim(line).empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        throw ConfigError((r / "metrics.jsonl").string() + ":" + std::to_string(number) + ": malformed record");
      }
      const long long steps = j.at("env_steps").get<long long>();
      for (const char* m : kMetrics) {
        if (j.contains(m) && j[m].is_number()) curves[m][steps].push_back(j[m].get<double>());
      }
    }
  }

  ExportSummary sum;
  const fs::path out = root / "export";
  fs::create_directories(out);
  sum.out_dir = out.string();
  sum.runs = static_cast<int>(runs.size());
  for (const char* m : kMetrics) {
    std::ofstream csv(out / (std::string(m) + ".csv"), std::ios::binary | std::ios::trunc);
    csv << "env_steps,mean,std,n\n";
    for (const auto& [steps, vals] : curves[m]) {
      const auto [mean, sd] = mean_std(vals);
      csv << steps << ',' << format_double(mean) << ',' << format_double(sd) << ',' << vals.size() << '\n';
    }
    ++sum.curves;
  }

  const fs::path frames = out / "frames";
  fs::create_directories(frames);
  std::ofstream index(frames / "frames.csv", std::ios::binary | std::ios::trunc);
  index << "run,frame,step,alpha_file,edges_file\n";
  for (const auto& r : runs) {
    const fs::path adj = r / "adjacency.jsonl";
    if (!fs::exists(adj)) continue;
    std::string rel = fs::relative(r, root).generic_string();
    if (rel == ".") rel = "run";
    std::string name;
    for (char c : rel) name += (c == '/') ? '_' : c;
    const fs::path dir = frames / name;
    fs::create_directories(dir);
    std::ifstream in(adj);
    std::string line;
    int frame = 0;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      const auto j = nlohmann::json::parse(line);
      std::ostringstream stem;
      stem << std::setw(5) << std::setfill('0') << frame;
      const std::string af = "alpha_" + stem.str() + ".csv";
      const std::string ef = "edges_" + stem.str() + ".csv";
      std::ofstream a(dir / af, std::ios::binary | std::ios::trunc);
      std::ofstream e(dir / ef, std::ios::binary | std::ios::trunc);
      for (const auto& row : j.at("alpha")) {
        for (std::size_t c = 0; c < row.size(); ++c) a << (c ? "," : "") << format_double(row[c].get<double>());
        a << '\n';
      }
      for (const auto& row : j.at("edges")) {
        for (std::size_t c = 0; c < row.size(); ++c) e << (c ? "," : "") << row[c].get<int>();
        e << '\n';
      }
      index << name << ',' << frame << ',' << j.at("step").get<long long>() << ',' << name << '/' << af << ','
            << name << '/' << ef << '\n';
      ++frame;
      ++sum.frames;
    }
  }
  return sum;
}

}  // namespace commformer
