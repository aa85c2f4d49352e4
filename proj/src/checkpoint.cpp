#include "checkpoint.hpp"

#include "json.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <map>
#include <fstream>
#include <sstream>

namespace commformer {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'M', 'F', 'R', 'C', 'K', 'P', 'T'};
constexpr int kVersion = 1;

struct Entry {
  std::string name;
  const Mat<float>* value;
};

void add_adam(std::vector<Entry>& out, const std::string& prefix, const train::Adam<float>& opt,
              const std::vector<std::string>& names) {
  if (opt.m.empty()) return;
  for (std::size_t i = 0; i < opt.m.size(); ++i) {
    out.push_back({prefix + "/m/" + names[i], &opt.m[i]});
    out.push_back({prefix + "/v/" + names[i], &opt.v[i]});
  }
}

std::vector<std::string> names_of(const ParamSet<float>& set) {
  std::vector<std::string> n;
  for (const auto& p : set.all()) n.push_back(p.name);
  return n;
}

nlohmann::json adam_json(const train::Adam<float>& opt) {
  return {{"steps", opt.steps}, {"moments", !opt.m.empty()}};
}

}  // namespace

graph::CommGraph Checkpoint::execution_graph() const {
  return train::execution_graph(config.graph.mode, learner.alpha.value, budget());
}

std::string encode_checkpoint(const RunConfig& config, const train::Learner& learner, long long iteration,
                              long long env_steps) {
  const auto& model = learner.model;
  std::vector<Entry> entries;
  entries.push_back({"alpha", &learner.alpha.value});
  for (const auto& p : model.encoder().all()) entries.push_back({"param/" + p.name, &p.value});
  for (const auto& p : model.decoder().all()) entries.push_back({"param/" + p.name, &p.value});
  for (const auto& p : model.target().all()) entries.push_back({"target/" + p.name, &p.value});
  add_adam(entries, "adam/enc", learner.enc_opt, names_of(model.encoder()));
  add_adam(entries, "adam/dec", learner.dec_opt, names_of(model.decoder()));
  add_adam(entries, "adam/alpha", learner.alpha_opt, {"alpha"});

  nlohmann::json header;
  header["format"] = "commformer-checkpoint";
  header["version"] = kVersion;
  header["config"] = config.to_string();
  header["iteration"] = iteration;
  header["env_steps"] = env_steps;
  header["optimizer_steps"] = learner.optimizer_steps;
  header["adam"] = {{"enc", adam_json(learner.enc_opt)},
                    {"dec", adam_json(learner.dec_opt)},
                    {"alpha", adam_json(learner.alpha_opt)}};
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : entries) {
    const auto count = static_cast<std::size_t>(e.value->size());
    table.push_back({{"name", e.name}, {"shape", {e.value->rows(), e.value->cols()}}, {"offset", offset},
                     {"count", count}});
    offset += count;
  }
  header["tensors"] = std::move(table);

  const std::string h = header.dump();
  const std::uint64_t hlen = h.size();
  std::string out;
  out.reserve(16 + h.size() + offset * sizeof(float));
  out.append(kMagic, sizeof(kMagic));
  out.append(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.append(h);
  for (const auto& e : entries) {
    out.append(reinterpret_cast<const char*>(e.value->data()), static_cast<std::size_t>(e.value->size()) * sizeof(float));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
  auto fail = [&](const std::string& what) { return CheckpointError(origin + ": " + what); };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw fail("not a checkpoint file");
  }
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 8, sizeof(hlen));
  if (hlen > bytes.size() - 16) throw fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  }
  if (header.value("format", "") != "commformer-checkpoint") throw fail("unknown format");
  if (header.value("version", 0) != kVersion) throw fail("unsupported version");

  Checkpoint ck;
  try {
    ck.config = parse_config(header.at("config").get<std::string>(), origin + "[config]");
    ck.iteration = header.at("iteration").get<long long>();
    ck.env_steps = header.at("env_steps").get<long long>();
    ck.learner.optimizer_steps = header.at("optimizer_steps").get<long long>();
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  }

  auto& l = ck.learner;
  l.model = Model<float>(ck.config.model_dims(), 0);
  const int n = ck.config.n_agents;
  l.alpha.name = "alpha";
  l.alpha.value = Mat<float>::Zero(n, n);
  l.alpha.zero_grad();
  const auto& tc = ck.config.train;
  l.enc_opt.lr = tc.critic_lr;
  l.dec_opt.lr = tc.actor_lr;
  l.alpha_opt.lr = ck.config.graph.lr;
  l.enc_opt.eps = l.dec_opt.eps = l.alpha_opt.eps = tc.optim_eps;

  std::map<std::string, Mat<float>*> slots;
  slots["alpha"] = &l.alpha.value;
  for (auto& p : l.model.encoder().all()) slots["param/" + p.name] = &p.value;
  for (auto& p : l.model.decoder().all()) slots["param/" + p.name] = &p.value;
  for (auto& p : l.model.target().all()) slots["target/" + p.name] = &p.value;

  auto prepare_adam = [&](const char* key, train::Adam<float>& opt, std::vector<Param<float>*> params,
                          const std::string& prefix) {
    const auto& a = header.at("adam").at(key);
    opt.steps = a.at("steps").get<long long>();
    if (!a.at("moments").get<bool>()) return;
    for (auto* p : params) {
      opt.m.push_back(Mat<float>::Zero(p->value.rows(), p->value.cols()));
      opt.v.push_back(Mat<float>::Zero(p->value.rows(), p->value.cols()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      slots[prefix + "/m/" + params[i]->name] = &opt.m[i];
      slots[prefix + "/v/" + params[i]->name] = &opt.v[i];
    }
  };
  auto pointers = [](ParamSet<float>& s) {
    std::vector<Param<float>*> out;
    for (auto& p : s.all()) out.push_back(&p);
    return out;
  };
  try {
    prepare_adam("enc", l.enc_opt, pointers(l.model.encoder()), "adam/enc");
    prepare_adam("dec", l.dec_opt, pointers(l.model.decoder()), "adam/dec");
    prepare_adam("alpha", l.alpha_opt, {&l.alpha}, "adam/alpha");
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed optimizer state: ") + e.what());
  }

  const std::size_t data_start = 16 + hlen;
  const std::size_t floats = (bytes.size() - data_start) / sizeof(float);
  try {
    for (const auto& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto it = slots.find(name);
      if (it == slots.end()) throw fail("unexpected tensor '" + name + "'");
      Mat<float>& dst = *it->second;
      const auto rows = t.at("shape").at(0).get<long long>();
      const auto cols = t.at("shape").at(1).get<long long>();
      if (rows != dst.rows() || cols != dst.cols()) throw fail("shape mismatch for tensor '" + name + "'");
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      if (count != static_cast<std::size_t>(dst.size()) || offset + count > floats) {
        throw fail("tensor '" + name + "' exceeds the data section");
      }
      std::memcpy(dst.data(), bytes.data() + data_start + offset * sizeof(float), count * sizeof(float));
      slots.erase(it);
    }
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed tensor table: ") + e.what());
  }
  if (!slots.empty()) throw fail("missing tensor '" + slots.begin()->first + "'");
  for (auto& p : l.model.encoder().all()) p.zero_grad();
  for (auto& p : l.model.decoder().all()) p.zero_grad();
  return ck;
}

void save_checkpoint(const std::string& path, const RunConfig& config, const train::Learner& learner,
                     long long iteration, long long env_steps) {
  const std::string bytes = encode_checkpoint(config, learner, iteration, env_steps);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write on checkpoint '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot finalize checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str(), path);
}

}  // namespace commformer
