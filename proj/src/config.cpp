#include "config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace commformer {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* first = v.data();
  const char* last = v.data() + v.size();
  auto res = std::from_chars(first, last, out);
  if (res.ec != std::errc() || res.ptr != last) {
    throw ConfigError("invalid value '" + v + "' for " + key);
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "True" || v == "1") return true;
  if (v == "false" || v == "False" || v == "0") return false;
  throw ConfigError("invalid boolean '" + v + "' for " + key + " (use true or false)");
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field int_field(std::string key, T RunConfig::*member) {
  return {std::move(key), [member](RunConfig& c, const std::string& k, const std::string& v) {
            c.*member = parse_number<T>(k, v);
          },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

Field double_field(std::string key, double RunConfig::*member) {
  return {std::move(key), [member](RunConfig& c, const std::string& k, const std::string& v) {
            c.*member = parse_number<double>(k, v);
          },
          [member](const RunConfig& c) { return fmt_double(c.*member); }};
}

Field bool_field(std::string key, bool RunConfig::*member) {
  return {std::move(key), [member](RunConfig& c, const std::string& k, const std::string& v) {
            c.*member = parse_bool(k, v);
          },
          [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

Field string_field(std::string key, std::string RunConfig::*member) {
  return {std::move(key), [member](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; },
          [member](const RunConfig& c) { return c.*member; }};
}

// Accessors into nested structs.
template <class T, class Get>
Field nested_int(std::string key, Get get) {
  return {std::move(key), [get](RunConfig& c, const std::string& k, const std::string& v) {
            get(c) = parse_number<T>(k, v);
          },
          [get](const RunConfig& c) { return std::to_string(get(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Field nested_double(std::string key, Get get) {
  return {std::move(key), [get](RunConfig& c, const std::string& k, const std::string& v) {
            get(c) = parse_number<double>(k, v);
          },
          [get](const RunConfig& c) { return fmt_double(get(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Field nested_bool(std::string key, Get get) {
  return {std::move(key), [get](RunConfig& c, const std::string& k, const std::string& v) {
            get(c) = parse_bool(k, v);
          },
          [get](const RunConfig& c) { return std::string(get(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back(string_field("env.name", &RunConfig::env_name));
    f.push_back(int_field("env.n_agents", &RunConfig::n_agents));
    f.push_back(int_field("env.n_captures", &RunConfig::n_captures));
    f.push_back(int_field("env.grid", &RunConfig::grid));
    f.push_back(int_field("env.vision", &RunConfig::vision));
    f.push_back(int_field("env.max_steps", &RunConfig::max_steps));
    f.push_back(int_field("env.eval_episode_length", &RunConfig::eval_episode_length));
    f.push_back(int_field("env.stacked_frames", &RunConfig::stacked_frames));
    f.push_back(double_field("env.step_penalty", &RunConfig::step_penalty));

    f.push_back(int_field("model.hidden_dim", &RunConfig::hidden_dim));
    f.push_back(int_field("model.n_heads", &RunConfig::n_heads));
    f.push_back(int_field("model.n_blocks", &RunConfig::n_blocks));
    f.push_back(double_field("model.gain", &RunConfig::gain));
    f.push_back(bool_field("model.agent_embedding", &RunConfig::agent_embedding));

    auto tr = [](RunConfig& c) -> train::TrainConfig& { return c.train; };
    f.push_back(nested_double("train.gamma", [tr](RunConfig& c) -> double& { return tr(c).gamma; }));
    f.push_back(nested_double("train.gae_lambda", [tr](RunConfig& c) -> double& { return tr(c).gae_lambda; }));
    f.push_back(nested_bool("train.use_gae", [tr](RunConfig& c) -> bool& { return tr(c).use_gae; }));
    f.push_back(nested_double("train.ppo_clip", [tr](RunConfig& c) -> double& { return tr(c).clip; }));
    f.push_back(nested_int<int>("train.ppo_epochs", [tr](RunConfig& c) -> int& { return tr(c).ppo_epochs; }));
    f.push_back(nested_int<int>("train.num_minibatch", [tr](RunConfig& c) -> int& { return tr(c).num_minibatch; }));
    f.push_back(nested_double("train.entropy_coef", [tr](RunConfig& c) -> double& { return tr(c).entropy_coef; }));
    f.push_back(nested_double("train.max_grad_norm", [tr](RunConfig& c) -> double& { return tr(c).max_grad_norm; }));
    f.push_back(nested_double("train.critic_lr", [tr](RunConfig& c) -> double& { return tr(c).critic_lr; }));
    f.push_back(nested_double("train.actor_lr", [tr](RunConfig& c) -> double& { return tr(c).actor_lr; }));
    f.push_back(nested_double("train.optim_eps", [tr](RunConfig& c) -> double& { return tr(c).optim_eps; }));
    f.push_back({"train.optimizer",
                 [](RunConfig&, const std::string& k, const std::string& v) {
                   if (v != "adam" && v != "Adam") throw ConfigError("only 'adam' is supported for " + k);
                 },
                 [](const RunConfig&) { return std::string("adam"); }});
    f.push_back(
        nested_int<int>("train.rollout_threads", [tr](RunConfig& c) -> int& { return tr(c).rollout_threads; }));
    f.push_back(int_field("train.training_threads", &RunConfig::training_threads));
    f.push_back(nested_int<int>("train.episode_length", [tr](RunConfig& c) -> int& { return tr(c).episode_length; }));
    f.push_back({"train.batch_size",
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.batch_size = parse_number<long long>(k, v);
                 },
                 [](const RunConfig& c) {
                   return std::to_string(static_cast<long long>(c.train.rollout_threads) * c.train.episode_length);
                 }});
    f.push_back(nested_int<long long>("train.total_env_steps",
                                      [tr](RunConfig& c) -> long long& { return tr(c).total_env_steps; }));
    f.push_back({"train.target_mode",
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   try {
                     c.train.target_mode = train::parse_target_mode(v);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(e.what());
                   }
                 },
                 [](const RunConfig& c) { return train::to_string(c.train.target_mode); }});
    f.push_back(
        nested_int<int>("train.target_interval", [tr](RunConfig& c) -> int& { return tr(c).target_interval; }));
    f.push_back(nested_double("train.ema_rho", [tr](RunConfig& c) -> double& { return tr(c).ema_rho; }));
    f.push_back(nested_bool("train.use_huber", [tr](RunConfig& c) -> bool& { return tr(c).use_huber; }));
    f.push_back(nested_double("train.huber_delta", [tr](RunConfig& c) -> double& { return tr(c).huber_delta; }));
    f.push_back(nested_bool("train.normalize_advantages",
                            [tr](RunConfig& c) -> bool& { return tr(c).normalize_advantages; }));
    f.push_back({"train.val_source",
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   try {
                     c.train.val_source = train::parse_val_source(v);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(e.what());
                   }
                 },
                 [](const RunConfig& c) { return train::to_string(c.train.val_source); }});

    f.push_back({"graph.mode",
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   try {
                     c.graph.mode = train::parse_graph_mode(v);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(e.what());
                   }
                 },
                 [](const RunConfig& c) { return train::to_string(c.graph.mode); }});
    f.push_back(nested_double("graph.sparsity", [](RunConfig& c) -> double& { return c.graph.sparsity; }));
    f.push_back({"graph.seed",
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   if (v == "none") {
                     c.graph.seed.reset();
                   } else {
                     c.graph.seed = parse_number<std::uint64_t>(k, v);
                   }
                 },
                 [](const RunConfig& c) {
                   return c.graph.seed ? std::to_string(*c.graph.seed) : std::string("none");
                 }});
    f.push_back(nested_double("graph.temperature", [](RunConfig& c) -> double& { return c.graph.temperature; }));
    f.push_back(nested_double("graph.lr", [](RunConfig& c) -> double& { return c.graph.lr; }));

    f.push_back(int_field("run.seed", &RunConfig::seed));
    f.push_back(string_field("run.out_dir", &RunConfig::out_dir));
    f.push_back(int_field("run.log_interval", &RunConfig::log_interval));
    f.push_back(int_field("run.snapshot_interval", &RunConfig::snapshot_interval));
    f.push_back(int_field("run.checkpoint_interval", &RunConfig::checkpoint_interval));
    f.push_back(int_field("run.eval_episodes", &RunConfig::eval_episodes));
    f.push_back(int_field("run.eval_seed", &RunConfig::eval_seed));
    return f;
  }();
  return all;
}

}  // namespace

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(*this, key, value);
      return;
    }
  }
  throw ConfigError("unknown key '" + key + "'");
}

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(env_name == "pp" || env_name == "pcp" || env_name == "relay", "env.name must be pp, pcp or relay");
  need(eval_episode_length >= 1, "env.eval_episode_length must be >= 1");
  need(env_name != "pcp" || (n_captures >= 1 && n_captures < n_agents),
       "env.n_captures must lie in [1, env.n_agents) for pcp");
  need(training_threads >= 1, "train.training_threads must be >= 1");
  need(log_interval >= 1, "run.log_interval must be >= 1");
  need(snapshot_interval >= 1, "run.snapshot_interval must be >= 1");
  need(checkpoint_interval >= 0, "run.checkpoint_interval must be >= 0");
  need(eval_episodes >= 1, "run.eval_episodes must be >= 1");
  need(!out_dir.empty(), "run.out_dir must not be empty");
  if (batch_size > 0) {
    need(batch_size == static_cast<long long>(train.rollout_threads) * train.episode_length,
         "train.batch_size must equal train.rollout_threads * train.episode_length");
  }
  try {
    env_spec();
    eval_env_spec();
    model_dims().validate();
    train.validate();
    graph.validate();
    graph.budget(n_agents);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

envs::EnvSpec RunConfig::env_spec() const {
  auto spec = envs::make_spec(env_name, n_agents, n_captures, grid, vision, max_steps);
  spec.stacked_frames = stacked_frames;
  spec.step_penalty = step_penalty;
  spec.validate();
  return spec;
}

envs::EnvSpec RunConfig::eval_env_spec() const {
  auto spec = env_spec();
  spec.max_steps = eval_episode_length;
  spec.validate();
  return spec;
}

ModelDims RunConfig::model_dims() const {
  const auto spec = env_spec();
  ModelDims d;
  d.n_agents = spec.n_agents;
  d.obs_dim = spec.obs_dim();
  d.agent_class = spec.class_ids();
  d.action_counts = spec.action_counts();
  d.d_model = hidden_dim;
  d.n_heads = n_heads;
  d.n_blocks = n_blocks;
  d.head_gain = gain;
  d.agent_embedding = agent_embedding;
  return d;
}

train::TrainerSetup RunConfig::trainer_setup() const {
  train::TrainerSetup s;
  s.env = env_spec();
  s.dims = model_dims();
  s.train = train;
  s.graph = graph;
  s.seed = seed;
  return s;
}

std::string RunConfig::to_string() const {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.key << " = " << f.get(*this) << '\n';
  return os.str();
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(number) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "missing key");
    if (value.empty()) throw ConfigError(where + "missing value for '" + key + "'");
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

}  // namespace commformer
