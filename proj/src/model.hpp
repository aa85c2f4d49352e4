#pragma once

// Encoder-decoder policy with relation-enhanced, graph-masked attention.
//
// Encoder (critic, parameters "enc.*"): per-class observation embedding,
// n_blocks x [pre-norm masked self-attention + residual, pre-norm MLP +
// residual], value head. The target network is a full copy of the encoder
// ("target.*"), since every encoder weight lies on the value path.
//
// Decoder (actor, parameters "dec.*"): slot m holds the embedding of action
// a^{m-1} when the edge m-1 -> m is present and a learned start token
// otherwise (always for slot 0), plus an agent-index embedding. Each
// block runs masked causal self-attention over the action slots, then lets
// the agent's own encoded observation query the action slots (causal and
// graph masked), then an MLP. Per-agent linear heads emit logits.

#include "comm_graph.hpp"
#include "ops.hpp"
#include "params.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace commformer {

struct ModelDims {
  int n_agents = 1;
  int obs_dim = 1;
  std::vector<int> agent_class;    // size n_agents, values in [0, n_classes)
  std::vector<int> action_counts;  // size n_agents
  int d_model = 64;
  int n_heads = 1;
  int n_blocks = 1;
  bool agent_embedding = true;
  double head_gain = 0.01;

  int n_classes() const;
  int max_actions() const;
  void validate() const;
};

enum class ActMode { kSample, kGreedy };

template <class S>
struct ActionSequence {
  std::vector<int> actions;  // [B * N]
  std::vector<S> log_probs;  // [B * N]
  std::vector<S> values;     // [B * N]
};

template <class S>
struct ActionEvaluation {
  std::vector<S> log_probs;
  std::vector<S> entropy;
  std::vector<S> values;
};

// Parameter index layout; the target set shares the encoder layout.
struct ModelLayout {
  struct AttnIdx {
    int wq, wk, wv, wo, bo;
  };
  struct MlpIdx {
    int w1, b1, w2, b2;
  };
  struct EncBlockIdx {
    int ln1_g, ln1_b;
    AttnIdx attn;
    int ln2_g, ln2_b;
    MlpIdx mlp;
  };
  struct DecBlockIdx {
    int ln1_g, ln1_b;
    AttnIdx self_attn;
    int lnq_g, lnq_b, ln2_g, ln2_b;
    AttnIdx cross_attn;
    int ln3_g, ln3_b;
    MlpIdx mlp;
  };

  std::vector<int> obs_w, obs_b;
  int enc_agent_emb = -1;
  int enc_edge_table = -1;
  std::vector<EncBlockIdx> enc_blocks;
  int enc_lnf_g = -1, enc_lnf_b = -1;
  MlpIdx value_head{};
  int action_emb = -1;
  int dec_agent_emb = -1;
  int dec_edge_table = -1;
  std::vector<DecBlockIdx> dec_blocks;
  int dec_lnf_g = -1, dec_lnf_b = -1;
  int head_w = -1, head_b = -1;
  std::vector<int> logit_w, logit_b;
};

template <class S>
class Model {
 public:
  struct EncoderOut {
    Var rep;     // [R, d]
    Var values;  // [R, 1]
  };

  Model() = default;
  Model(ModelDims dims, std::uint64_t seed);

  const ModelDims& dims() const { return dims_; }

  ParamSet<S>& encoder() { return encoder_; }
  const ParamSet<S>& encoder() const { return encoder_; }
  ParamSet<S>& decoder() { return decoder_; }
  const ParamSet<S>& decoder() const { return decoder_; }
  ParamSet<S>& target() { return target_; }
  const ParamSet<S>& target() const { return target_; }

  // Tape-level passes. `enc` / `dec` are the bound parameter vars of the
  // corresponding set (see ParamSet::bind); the target network binds with the
  // encoder layout.
  EncoderOut encode(Tape<S>& t, const std::vector<Var>& enc, const Mat<S>& obs, Var edges) const;
  Var decode(Tape<S>& t, const std::vector<Var>& dec, Var rep, const std::vector<int>& slot_tokens,
             Var edges) const;

  // Slot inputs for teacher-forced decoding of joint actions [B * N].
  std::vector<int> slot_tokens(std::span<const int> actions) const;

  // Logits for every slot given the prior actions (entries at or after each
  // slot are ignored thanks to the causal mask).
  Mat<S> decode_logits(const Mat<S>& rep, std::span<const int> actions, const Mat<S>& edges) const;

  Mat<S> encode_values(const Mat<S>& obs, const Mat<S>& edges, bool use_target = false) const;
  Mat<S> encode_rep(const Mat<S>& obs, const Mat<S>& edges) const;

  // Encode once, then decode the N agents in order. `rngs` holds one
  // generator per batch element (unused in greedy mode).
  ActionSequence<S> act(const Mat<S>& obs, const Mat<S>& edges, ActMode mode,
                        std::span<std::mt19937_64> rngs) const;

  ActionEvaluation<S> evaluate_actions(const Mat<S>& obs, std::span<const int> actions,
                                       const Mat<S>& edges) const;

  void sync_target();
  void ema_target(S rho);

  template <class T>
  Model<T> cast() const {
    Model<T> m;
    m.dims_ = dims_;
    m.encoder_ = encoder_.template cast<T>();
    m.decoder_ = decoder_.template cast<T>();
    m.target_ = target_.template cast<T>();
    m.layout_ = layout_;
    return m;
  }

  using AttnIdx = ModelLayout::AttnIdx;
  using MlpIdx = ModelLayout::MlpIdx;
  using Layout = ModelLayout;

  const Layout& layout() const { return layout_; }

 private:
  template <class T>
  friend class Model;

  Var attention_block(Tape<S>& t, const std::vector<Var>& p, const AttnIdx& idx, Var xq, Var xkv, Var edges,
                      Var table, bool causal) const;
  Var mlp(Tape<S>& t, const std::vector<Var>& p, const MlpIdx& idx, Var x) const;

  ModelDims dims_;
  ParamSet<S> encoder_;
  ParamSet<S> decoder_;
  ParamSet<S> target_;
  Layout layout_;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace commformer
