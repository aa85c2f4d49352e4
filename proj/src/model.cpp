#include "model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace commformer {

int ModelDims::n_classes() const {
  return agent_class.empty() ? 1 : *std::max_element(agent_class.begin(), agent_class.end()) + 1;
}

int ModelDims::max_actions() const {
  return action_counts.empty() ? 0 : *std::max_element(action_counts.begin(), action_counts.end());
}

void ModelDims::validate() const {
  if (n_agents < 1) throw std::invalid_argument("model: n_agents must be >= 1");
  if (obs_dim < 1) throw std::invalid_argument("model: obs_dim must be >= 1");
  if (static_cast<int>(agent_class.size()) != n_agents) throw std::invalid_argument("model: agent_class size != n_agents");
  if (static_cast<int>(action_counts.size()) != n_agents) {
    throw std::invalid_argument("model: action_counts size != n_agents");
  }
  for (int c : agent_class) {
    if (c < 0) throw std::invalid_argument("model: negative agent class");
  }
  for (int a : action_counts) {
    if (a < 1) throw std::invalid_argument("model: every agent needs at least one action");
  }
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
    throw std::invalid_argument("model: d_model must be a positive multiple of n_heads");
  }
  if (n_blocks < 1) throw std::invalid_argument("model: n_blocks must be >= 1");
}

namespace {

template <class S>
Mat<S> uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
  return m;
}

template <class S>
Mat<S> xavier(Eigen::Index fan_in, Eigen::Index fan_out, std::mt19937_64& rng, double gain = 1.0) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_init<S>(fan_in, fan_out, bound, rng);
}

template <class S>
Mat<S> ones(Eigen::Index cols) {
  return Mat<S>::Ones(1, cols);
}

template <class S>
Mat<S> zeros(Eigen::Index rows, Eigen::Index cols) {
  return Mat<S>::Zero(rows, cols);
}

template <class S>
std::pair<int, int> add_norm(ParamSet<S>& set, const std::string& prefix, int d) {
  const int g = set.add(prefix + ".g", ones<S>(d));
  const int b = set.add(prefix + ".b", zeros<S>(1, d));
  return {g, b};
}

template <class S, class Idx>
Idx add_attention(ParamSet<S>& set, const std::string& prefix, int d, std::mt19937_64& rng) {
  Idx idx{};
  idx.wq = set.add(prefix + ".wq", xavier<S>(d, d, rng));
  idx.wk = set.add(prefix + ".wk", xavier<S>(d, d, rng));
  idx.wv = set.add(prefix + ".wv", xavier<S>(d, d, rng));
  idx.wo = set.add(prefix + ".wo", xavier<S>(d, d, rng));
  idx.bo = set.add(prefix + ".bo", zeros<S>(1, d));
  return idx;
}

template <class S, class Idx>
Idx add_mlp(ParamSet<S>& set, const std::string& prefix, int d_in, int d_hidden, int d_out, std::mt19937_64& rng,
            double out_gain = 1.0) {
  Idx idx{};
  idx.w1 = set.add(prefix + ".w1", xavier<S>(d_in, d_hidden, rng));
  idx.b1 = set.add(prefix + ".b1", zeros<S>(1, d_hidden));
  idx.w2 = set.add(prefix + ".w2", xavier<S>(d_hidden, d_out, rng, out_gain));
  idx.b2 = set.add(prefix + ".b2", zeros<S>(1, d_out));
  return idx;
}

}  // namespace

template <class S>
Model<S>::Model(ModelDims dims, std::uint64_t seed) : dims_(std::move(dims)) {
  dims_.validate();
  std::mt19937_64 rng(seed);
  const int d = dims_.d_model;
  const int n = dims_.n_agents;
  const int amax = dims_.max_actions();

  for (int c = 0; c < dims_.n_classes(); ++c) {
    layout_.obs_w.push_back(encoder_.add("enc.obs_w." + std::to_string(c), xavier<S>(dims_.obs_dim, d, rng)));
    layout_.obs_b.push_back(encoder_.add("enc.obs_b." + std::to_string(c), zeros<S>(1, d)));
  }
  layout_.enc_agent_emb = encoder_.add("enc.agent_emb", uniform_init<S>(n, d, 0.05, rng));
  layout_.enc_edge_table = encoder_.add("enc.edge_table", uniform_init<S>(2, d, 0.05, rng));
  for (int b = 0; b < dims_.n_blocks; ++b) {
    const std::string p = "enc.block" + std::to_string(b);
    ModelLayout::EncBlockIdx blk{};
    std::tie(blk.ln1_g, blk.ln1_b) = add_norm(encoder_, p + ".ln1", d);
    blk.attn = add_attention<S, AttnIdx>(encoder_, p + ".attn", d, rng);
    std::tie(blk.ln2_g, blk.ln2_b) = add_norm(encoder_, p + ".ln2", d);
    blk.mlp = add_mlp<S, MlpIdx>(encoder_, p + ".mlp", d, d, d, rng);
    layout_.enc_blocks.push_back(blk);
  }
  std::tie(layout_.enc_lnf_g, layout_.enc_lnf_b) = add_norm(encoder_, "enc.ln_f", d);
  layout_.value_head = add_mlp<S, MlpIdx>(encoder_, "enc.value", d, d, 1, rng);

  layout_.action_emb = decoder_.add("dec.action_emb", xavier<S>(amax + 1, d, rng));
  layout_.dec_agent_emb = decoder_.add("dec.agent_emb", uniform_init<S>(n, d, 0.05, rng));
  layout_.dec_edge_table = decoder_.add("dec.edge_table", uniform_init<S>(2, d, 0.05, rng));
  for (int b = 0; b < dims_.n_blocks; ++b) {
    const std::string p = "dec.block" + std::to_string(b);
    ModelLayout::DecBlockIdx blk{};
    std::tie(blk.ln1_g, blk.ln1_b) = add_norm(decoder_, p + ".ln1", d);
    blk.self_attn = add_attention<S, AttnIdx>(decoder_, p + ".self", d, rng);
    std::tie(blk.lnq_g, blk.lnq_b) = add_norm(decoder_, p + ".lnq", d);
    std::tie(blk.ln2_g, blk.ln2_b) = add_norm(decoder_, p + ".ln2", d);
    blk.cross_attn = add_attention<S, AttnIdx>(decoder_, p + ".cross", d, rng);
    std::tie(blk.ln3_g, blk.ln3_b) = add_norm(decoder_, p + ".ln3", d);
    blk.mlp = add_mlp<S, MlpIdx>(decoder_, p + ".mlp", d, d, d, rng);
    layout_.dec_blocks.push_back(blk);
  }
  std::tie(layout_.dec_lnf_g, layout_.dec_lnf_b) = add_norm(decoder_, "dec.ln_f", d);
  layout_.head_w = decoder_.add("dec.head.w", xavier<S>(d, d, rng));
  layout_.head_b = decoder_.add("dec.head.b", zeros<S>(1, d));
  for (int m = 0; m < n; ++m) {
    layout_.logit_w.push_back(
        decoder_.add("dec.logits.w." + std::to_string(m), xavier<S>(d, amax, rng, dims_.head_gain)));
    layout_.logit_b.push_back(decoder_.add("dec.logits.b." + std::to_string(m), zeros<S>(1, amax)));
  }

  for (const auto& p : encoder_.all()) {
    target_.add("target." + p.name.substr(4), p.value);
  }
}

template <class S>
Var Model<S>::attention_block(Tape<S>& t, const std::vector<Var>& p, const AttnIdx& idx, Var xq, Var xkv,
                              Var edges, Var table, bool causal) const {
  ops::AttentionInputs<S> in{xq, xkv, edges, table, p[idx.wq], p[idx.wk], p[idx.wv]};
  ops::AttentionShape shape{dims_.n_agents, dims_.n_heads, causal};
  Var a = ops::relation_attention(t, in, shape);
  return ops::linear(t, a, p[idx.wo], p[idx.bo]);
}

template <class S>
Var Model<S>::mlp(Tape<S>& t, const std::vector<Var>& p, const MlpIdx& idx, Var x) const {
  Var h = ops::gelu(t, ops::linear(t, x, p[idx.w1], p[idx.b1]));
  return ops::linear(t, h, p[idx.w2], p[idx.b2]);
}

template <class S>
typename Model<S>::EncoderOut Model<S>::encode(Tape<S>& t, const std::vector<Var>& p, const Mat<S>& obs,
                                                Var edges) const {
  if (obs.cols() != dims_.obs_dim || obs.rows() % dims_.n_agents != 0) {
    throw std::invalid_argument("encode: observation batch must be [B * N, obs_dim]");
  }
  Var o = t.constant_ref(obs);
  std::vector<Var> per_class;
  for (std::size_t c = 0; c < layout_.obs_w.size(); ++c) {
    per_class.push_back(ops::linear(t, o, p[layout_.obs_w[c]], p[layout_.obs_b[c]]));
  }
  Var x = per_class.size() == 1 ? per_class.front() : ops::select_by_agent(t, per_class, dims_.agent_class);
  if (dims_.agent_embedding) x = ops::add_tiled(t, x, p[layout_.enc_agent_emb]);
  x = ops::gelu(t, x);
  const Var table = p[layout_.enc_edge_table];
  for (const auto& blk : layout_.enc_blocks) {
    Var a = ops::layer_norm(t, x, p[blk.ln1_g], p[blk.ln1_b]);
    x = ops::add(t, x, attention_block(t, p, blk.attn, a, a, edges, table, false));
    Var m = ops::layer_norm(t, x, p[blk.ln2_g], p[blk.ln2_b]);
    x = ops::add(t, x, mlp(t, p, blk.mlp, m));
  }
  Var f = ops::layer_norm(t, x, p[layout_.enc_lnf_g], p[layout_.enc_lnf_b]);
  Var v = mlp(t, p, layout_.value_head, f);
  return {x, v};
}

template <class S>
std::vector<int> Model<S>::slot_tokens(std::span<const int> actions) const {
  const int n = dims_.n_agents;
  if (actions.size() % static_cast<std::size_t>(n) != 0) throw std::invalid_argument("slot_tokens: bad action count");
  const int start = dims_.max_actions();
  std::vector<int> tokens(actions.size());
  for (std::size_t r = 0; r < actions.size(); ++r) {
    const int m = static_cast<int>(r % static_cast<std::size_t>(n));
    if (m == 0) {
      tokens[r] = start;
    } else {
      const int a = actions[r - 1];
      if (a < 0 || a >= dims_.action_counts[static_cast<std::size_t>(m - 1)]) {
        throw std::invalid_argument("decode: prior action index out of range");
      }
      tokens[r] = a;
    }
  }
  return tokens;
}

template <class S>
Var Model<S>::decode(Tape<S>& t, const std::vector<Var>& p, Var rep, const std::vector<int>& slot_tokens,
                     Var edges) const {
  Var prior = ops::gather_rows(t, p[layout_.action_emb], slot_tokens);
  Var start = ops::gather_rows(t, p[layout_.action_emb], std::vector<int>(slot_tokens.size(), dims_.max_actions()));
  Var x = ops::edge_gate_rows(t, prior, start, edges);
  if (dims_.agent_embedding) x = ops::add_tiled(t, x, p[layout_.dec_agent_emb]);
  x = ops::gelu(t, x);
  const Var table = p[layout_.dec_edge_table];
  for (const auto& blk : layout_.dec_blocks) {
    Var a = ops::layer_norm(t, x, p[blk.ln1_g], p[blk.ln1_b]);
    x = ops::add(t, x, attention_block(t, p, blk.self_attn, a, a, edges, table, true));
    Var q = ops::layer_norm(t, rep, p[blk.lnq_g], p[blk.lnq_b]);
    Var kv = ops::layer_norm(t, x, p[blk.ln2_g], p[blk.ln2_b]);
    Var y = ops::add(t, rep, attention_block(t, p, blk.cross_attn, q, kv, edges, table, true));
    Var m = ops::layer_norm(t, y, p[blk.ln3_g], p[blk.ln3_b]);
    x = ops::add(t, y, mlp(t, p, blk.mlp, m));
  }
  Var f = ops::layer_norm(t, x, p[layout_.dec_lnf_g], p[layout_.dec_lnf_b]);
  Var h = ops::gelu(t, ops::linear(t, f, p[layout_.head_w], p[layout_.head_b]));
  std::vector<Var> heads;
  for (int m = 0; m < dims_.n_agents; ++m) {
    heads.push_back(ops::linear(t, h, p[layout_.logit_w[static_cast<std::size_t>(m)]],
                                p[layout_.logit_b[static_cast<std::size_t>(m)]]));
  }
  if (heads.size() == 1) return heads.front();
  std::vector<int> own(static_cast<std::size_t>(dims_.n_agents));
  std::iota(own.begin(), own.end(), 0);
  return ops::select_by_agent(t, heads, std::move(own));
}

template <class S>
Mat<S> Model<S>::decode_logits(const Mat<S>& rep, std::span<const int> actions, const Mat<S>& edges) const {
  Tape<S> t;
  const auto p = decoder_.bind_frozen(t);
  Var r = t.constant_ref(rep);
  Var e = t.constant_ref(edges);
  return t.value(decode(t, p, r, slot_tokens(actions), e));
}

template <class S>
Mat<S> Model<S>::encode_values(const Mat<S>& obs, const Mat<S>& edges, bool use_target) const {
  Tape<S> t;
  const auto p = (use_target ? target_ : encoder_).bind_frozen(t);
  return t.value(encode(t, p, obs, t.constant_ref(edges)).values);
}

template <class S>
Mat<S> Model<S>::encode_rep(const Mat<S>& obs, const Mat<S>& edges) const {
  Tape<S> t;
  const auto p = encoder_.bind_frozen(t);
  return t.value(encode(t, p, obs, t.constant_ref(edges)).rep);
}

template <class S>
ActionSequence<S> Model<S>::act(const Mat<S>& obs, const Mat<S>& edges, ActMode mode,
                                std::span<std::mt19937_64> rngs) const {
  const int n = dims_.n_agents;
  const Eigen::Index batch = obs.rows() / n;
  if (mode == ActMode::kSample && static_cast<Eigen::Index>(rngs.size()) < batch) {
    throw std::invalid_argument("act: sample mode needs one generator per batch element");
  }
  Mat<S> rep;
  Mat<S> values;
  {
    Tape<S> t;
    const auto p = encoder_.bind_frozen(t);
    auto out = encode(t, p, obs, t.constant_ref(edges));
    rep = t.value(out.rep);
    values = t.value(out.values);
  }
  ActionSequence<S> seq;
  const auto rows = static_cast<std::size_t>(obs.rows());
  seq.actions.assign(rows, 0);
  seq.log_probs.assign(rows, S(0));
  seq.values.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) seq.values[r] = values(static_cast<Eigen::Index>(r), 0);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int m = 0; m < n; ++m) {
    const Mat<S> logits = decode_logits(rep, seq.actions, edges);
    const int count = dims_.action_counts[static_cast<std::size_t>(m)];
    for (Eigen::Index b = 0; b < batch; ++b) {
      const Eigen::Index r = b * n + m;
      const auto row = logits.row(r).head(count);
      const S lse = ops::log_sum_exp<S>(row);
      int chosen = 0;
      if (mode == ActMode::kGreedy) {
        for (int j = 1; j < count; ++j) {
          if (row(j) > row(chosen)) chosen = j;
        }
      } else {
        const double u = unit(rngs[static_cast<std::size_t>(b)]);
        double cum = 0.0;
        chosen = count - 1;
        for (int j = 0; j < count; ++j) {
          cum += std::exp(static_cast<double>(row(j) - lse));
          if (u < cum) {
            chosen = j;
            break;
          }
        }
      }
      seq.actions[static_cast<std::size_t>(r)] = chosen;
      seq.log_probs[static_cast<std::size_t>(r)] = row(chosen) - lse;
    }
  }
  return seq;
}

template <class S>
ActionEvaluation<S> Model<S>::evaluate_actions(const Mat<S>& obs, std::span<const int> actions,
                                               const Mat<S>& edges) const {
  Tape<S> t;
  const auto pe = encoder_.bind_frozen(t);
  const auto pd = decoder_.bind_frozen(t);
  Var e = t.constant_ref(edges);
  auto enc = encode(t, pe, obs, e);
  Var logits = decode(t, pd, enc.rep, slot_tokens(actions), e);
  auto cat = ops::categorical(t, logits, dims_.action_counts, std::vector<int>(actions.begin(), actions.end()));
  ActionEvaluation<S> out;
  const auto& lp = t.value(cat.log_prob);
  const auto& en = t.value(cat.entropy);
  const auto& v = t.value(enc.values);
  for (Eigen::Index r = 0; r < lp.rows(); ++r) {
    out.log_probs.push_back(lp(r, 0));
    out.entropy.push_back(en(r, 0));
    out.values.push_back(v(r, 0));
  }
  return out;
}

template <class S>
void Model<S>::sync_target() {
  target_.copy_values_from(encoder_);
}

template <class S>
void Model<S>::ema_target(S rho) {
  for (std::size_t i = 0; i < target_.size(); ++i) {
    auto& tv = target_[static_cast<int>(i)].value;
    const auto& ev = encoder_[static_cast<int>(i)].value;
    tv = (S(1) - rho) * tv + rho * ev;
  }
}

template class Model<float>;
template class Model<double>;

}  // namespace commformer
