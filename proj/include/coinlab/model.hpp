#pragma once

// Neural sequential predictors: embedding, single-layer LSTM or decoder-only
// Transformer block stack, unembedding. Forward passes run over a flattened
// batch; LSTM uses time-major layout so each timestep is a contiguous row
// slice, the Transformer uses batch-major layout for block attention.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "coinlab/checkpoint.hpp"
#include "coinlab/data.hpp"
#include "coinlab/errors.hpp"
#include "coinlab/mat.hpp"
#include "coinlab/random.hpp"
#include "coinlab/tape.hpp"

namespace coinlab {

struct PredictorConfig {
  enum class Arch { LSTM, Transformer };
  Arch arch = Arch::Transformer;
  int64_t input_dim = 2;
  int64_t embed_dim = 128;
  int64_t width = 128;
  int64_t heads = 4;
  int64_t layers = 1;
  int64_t mlp_widening = 4;
  int64_t vocab = 2;

  void validate() const {
    if (input_dim <= 0 || embed_dim <= 0 || width <= 0 || heads <= 0 || layers <= 0 ||
        mlp_widening <= 0 || vocab <= 0)
      throw InvalidConfig("predictor config: nonpositive dimension");
    if (arch == Arch::Transformer && embed_dim % heads != 0)
      throw InvalidConfig("predictor config: embed_dim not divisible by heads");
  }

  int64_t final_dim() const { return arch == Arch::LSTM ? width : embed_dim; }
};

struct LstmLayer {
  Mat w;  // (in + width) x 4*width, gate order i,f,g,o
  Mat b;  // 1 x 4*width
};

struct TransformerLayer {
  Mat wq, wk, wv, wo;        // embed x embed
  Mat q_gain, q_offset;      // 1 x embed
  Mat k_gain, k_offset;
  Mat mlp_gain, mlp_offset;  // pre-norm on the MLP block
  Mat w1, b1;                // embed x widening*embed, 1 x widening*embed
  Mat w2, b2;                // widening*embed x embed, 1 x embed
};

struct ParameterSet {
  PredictorConfig config;
  Mat embed;    // input_dim x embed_dim
  Mat unembed;  // final_dim x vocab
  std::vector<LstmLayer> lstm;
  std::vector<TransformerLayer> tf;

  std::vector<std::pair<std::string, Mat*>> named_params() {
    std::vector<std::pair<std::string, Mat*>> out;
    out.emplace_back("embed", &embed);
    for (size_t l = 0; l < lstm.size(); ++l) {
      const std::string p = "lstm" + std::to_string(l) + ".";
      out.emplace_back(p + "w", &lstm[l].w);
      out.emplace_back(p + "b", &lstm[l].b);
    }
    for (size_t l = 0; l < tf.size(); ++l) {
      const std::string p = "tf" + std::to_string(l) + ".";
      out.emplace_back(p + "wq", &tf[l].wq);
      out.emplace_back(p + "wk", &tf[l].wk);
      out.emplace_back(p + "wv", &tf[l].wv);
      out.emplace_back(p + "wo", &tf[l].wo);
      out.emplace_back(p + "q_gain", &tf[l].q_gain);
      out.emplace_back(p + "q_offset", &tf[l].q_offset);
      out.emplace_back(p + "k_gain", &tf[l].k_gain);
      out.emplace_back(p + "k_offset", &tf[l].k_offset);
      out.emplace_back(p + "mlp_gain", &tf[l].mlp_gain);
      out.emplace_back(p + "mlp_offset", &tf[l].mlp_offset);
      out.emplace_back(p + "w1", &tf[l].w1);
      out.emplace_back(p + "b1", &tf[l].b1);
      out.emplace_back(p + "w2", &tf[l].w2);
      out.emplace_back(p + "b2", &tf[l].b2);
    }
    out.emplace_back("unembed", &unembed);
    return out;
  }

  std::vector<NamedTensor> to_named_tensors() {
    std::vector<NamedTensor> out;
    for (auto& [name, mat] : named_params()) out.push_back({name, *mat});
    return out;
  }

  void load_named_tensors(const std::vector<NamedTensor>& tensors) {
    auto np = named_params();
    if (np.size() != tensors.size()) throw InvalidConfig("checkpoint: parameter count mismatch");
    for (size_t i = 0; i < np.size(); ++i) {
      if (np[i].first != tensors[i].name)
        throw InvalidConfig("checkpoint: expected " + np[i].first + ", got " + tensors[i].name);
      if (!np[i].second->same_shape(tensors[i].value))
        throw InvalidConfig("checkpoint: shape mismatch for " + np[i].first);
      *np[i].second = tensors[i].value;
    }
  }
};

namespace detail {

inline Mat trunc_normal_mat(int64_t r, int64_t c, double std_dev, RandomStream& rng) {
  Mat m(r, c);
  for (double& v : m.a) v = rng.truncated_normal(std_dev);
  return m;
}

}  // namespace detail

inline ParameterSet init_params(const PredictorConfig& cfg, RandomStream& rng) {
  cfg.validate();
  ParameterSet ps;
  ps.config = cfg;
  ps.embed = detail::trunc_normal_mat(cfg.input_dim, cfg.embed_dim,
                                      1.0 / std::sqrt(static_cast<double>(cfg.input_dim)), rng);
  if (cfg.arch == PredictorConfig::Arch::LSTM) {
    for (int64_t l = 0; l < cfg.layers; ++l) {
      const int64_t in = l == 0 ? cfg.embed_dim : cfg.width;
      LstmLayer layer;
      layer.w = detail::trunc_normal_mat(in + cfg.width, 4 * cfg.width,
                                         1.0 / std::sqrt(static_cast<double>(in + cfg.width)),
                                         rng);
      layer.b = Mat(1, 4 * cfg.width);
      for (int64_t j = 0; j < cfg.width; ++j) layer.b.a[cfg.width + j] = 1.0;  // forget gate
      ps.lstm.push_back(std::move(layer));
    }
  } else {
    const int64_t e = cfg.embed_dim;
    const int64_t m = cfg.mlp_widening * e;
    const double se = 1.0 / std::sqrt(static_cast<double>(e));
    for (int64_t l = 0; l < cfg.layers; ++l) {
      TransformerLayer layer;
      layer.wq = detail::trunc_normal_mat(e, e, se, rng);
      layer.wk = detail::trunc_normal_mat(e, e, se, rng);
      layer.wv = detail::trunc_normal_mat(e, e, se, rng);
      layer.wo = detail::trunc_normal_mat(e, e, se, rng);
      layer.q_gain = Mat(1, e);
      layer.q_gain.fill(1.0);
      layer.q_offset = Mat(1, e);
      layer.k_gain = Mat(1, e);
      layer.k_gain.fill(1.0);
      layer.k_offset = Mat(1, e);
      layer.mlp_gain = Mat(1, e);
      layer.mlp_gain.fill(1.0);
      layer.mlp_offset = Mat(1, e);
      layer.w1 = detail::trunc_normal_mat(e, m, se, rng);
      layer.b1 = Mat(1, m);
      layer.w2 = detail::trunc_normal_mat(m, e, 1.0 / std::sqrt(static_cast<double>(m)), rng);
      layer.b2 = Mat(1, e);
      ps.tf.push_back(std::move(layer));
    }
  }
  ps.unembed = detail::trunc_normal_mat(cfg.final_dim(), cfg.vocab,
                                        1.0 / std::sqrt(static_cast<double>(cfg.final_dim())),
                                        rng);
  return ps;
}

// Low-rank adapters on the attention projections: W' = W + B.A with
// A rank x embed, B embed x rank, B zero-initialized.
struct LoraFactors {
  struct Pair {
    Mat a, b;
  };
  int64_t rank = 4;
  std::vector<std::array<Pair, 4>> layers;  // q,k,v,o per transformer layer
};

inline LoraFactors init_lora(const PredictorConfig& cfg, int64_t rank, RandomStream& rng) {
  if (cfg.arch != PredictorConfig::Arch::Transformer)
    throw UnsupportedArchitecture("LoRA requires the Transformer");
  LoraFactors f;
  f.rank = rank;
  const int64_t e = cfg.embed_dim;
  const double se = 1.0 / std::sqrt(static_cast<double>(e));
  for (int64_t l = 0; l < cfg.layers; ++l) {
    std::array<LoraFactors::Pair, 4> layer;
    for (auto& p : layer) {
      p.a = detail::trunc_normal_mat(rank, e, se, rng);
      p.b = Mat(e, rank);
    }
    f.layers.push_back(std::move(layer));
  }
  return f;
}

// Tape bindings of a ParameterSet; `trainable` selects by canonical name.
struct BoundParams {
  Var embed, unembed;
  struct L {
    Var w, b;
  };
  struct T {
    Var wq, wk, wv, wo, q_gain, q_offset, k_gain, k_offset, mlp_gain, mlp_offset, w1, b1, w2, b2;
  };
  std::vector<L> lstm;
  std::vector<T> tf;
  struct LoraPair {
    Var a, b;
  };
  std::vector<std::array<LoraPair, 4>> lora;  // empty unless bound
};

template <typename TrainablePred>
BoundParams bind_params(Tape& tp, ParameterSet& ps, TrainablePred trainable) {
  BoundParams bp;
  auto bind_one = [&](const std::string& name, Mat& m) {
    return tp.leaf(m, trainable(name));
  };
  bp.embed = bind_one("embed", ps.embed);
  for (size_t l = 0; l < ps.lstm.size(); ++l) {
    const std::string p = "lstm" + std::to_string(l) + ".";
    bp.lstm.push_back({bind_one(p + "w", ps.lstm[l].w), bind_one(p + "b", ps.lstm[l].b)});
  }
  for (size_t l = 0; l < ps.tf.size(); ++l) {
    const std::string p = "tf" + std::to_string(l) + ".";
    TransformerLayer& t = ps.tf[l];
    bp.tf.push_back({bind_one(p + "wq", t.wq), bind_one(p + "wk", t.wk),
                     bind_one(p + "wv", t.wv), bind_one(p + "wo", t.wo),
                     bind_one(p + "q_gain", t.q_gain), bind_one(p + "q_offset", t.q_offset),
                     bind_one(p + "k_gain", t.k_gain), bind_one(p + "k_offset", t.k_offset),
                     bind_one(p + "mlp_gain", t.mlp_gain),
                     bind_one(p + "mlp_offset", t.mlp_offset), bind_one(p + "w1", t.w1),
                     bind_one(p + "b1", t.b1), bind_one(p + "w2", t.w2),
                     bind_one(p + "b2", t.b2)});
  }
  bp.unembed = bind_one("unembed", ps.unembed);
  return bp;
}

inline BoundParams bind_params(Tape& tp, ParameterSet& ps, bool trainable) {
  return bind_params(tp, ps, [trainable](const std::string&) { return trainable; });
}

// Bound leaves in the same order as ParameterSet::named_params.
inline std::vector<Var> bound_leaves(const BoundParams& bp) {
  std::vector<Var> out;
  out.push_back(bp.embed);
  for (const auto& l : bp.lstm) {
    out.push_back(l.w);
    out.push_back(l.b);
  }
  for (const auto& t : bp.tf) {
    out.push_back(t.wq);
    out.push_back(t.wk);
    out.push_back(t.wv);
    out.push_back(t.wo);
    out.push_back(t.q_gain);
    out.push_back(t.q_offset);
    out.push_back(t.k_gain);
    out.push_back(t.k_offset);
    out.push_back(t.mlp_gain);
    out.push_back(t.mlp_offset);
    out.push_back(t.w1);
    out.push_back(t.b1);
    out.push_back(t.w2);
    out.push_back(t.b2);
  }
  out.push_back(bp.unembed);
  return out;
}

inline void bind_lora(Tape& tp, BoundParams& bp, LoraFactors& lora, bool trainable) {
  for (auto& layer : lora.layers) {
    std::array<BoundParams::LoraPair, 4> bound;
    for (size_t i = 0; i < 4; ++i)
      bound[i] = {tp.leaf(layer[i].a, trainable), tp.leaf(layer[i].b, trainable)};
    bp.lora.push_back(bound);
  }
}

struct Forward {
  Var logits;  // (batch*t_total) x vocab
  Var states;  // per-position internal states, same row layout as logits
  bool time_major = false;
  int64_t batch = 0;
  int64_t t_total = 0;
  int64_t prefix_len = 0;
};

// prefix_embed: optional (L x embed) rows shared across the batch;
// obs_embed: (batch*n_obs x embed), sequence-major. Both already in
// embedding space; the leading zero vector is inserted here.
inline Forward forward_batch(Tape& tp, const BoundParams& bp, const PredictorConfig& cfg,
                             std::optional<Var> prefix_embed, Var obs_embed, int64_t batch,
                             int64_t n_obs) {
  cfg.validate();
  Forward f;
  f.batch = batch;
  f.prefix_len = prefix_embed ? tp.val(*prefix_embed).rows : 0;
  f.t_total = 1 + f.prefix_len + n_obs;
  if (cfg.arch == PredictorConfig::Arch::LSTM) {
    f.time_major = true;
    Var x = tp.assemble_batch(prefix_embed, obs_embed, batch, n_obs, true);
    const int64_t t_total = f.t_total;
    std::vector<Var> layer_in(static_cast<size_t>(t_total));
    for (int64_t t = 0; t < t_total; ++t)
      layer_in[t] = tp.slice_rows(x, t * batch, (t + 1) * batch);
    std::vector<Var> cells;
    for (size_t l = 0; l < bp.lstm.size(); ++l) {
      Var h = tp.zeros(batch, cfg.width);
      Var c = tp.zeros(batch, cfg.width);
      cells.clear();
      std::vector<Var> hs(static_cast<size_t>(t_total));
      for (int64_t t = 0; t < t_total; ++t) {
        Var hc = tp.lstm_cell(layer_in[t], h, c, bp.lstm[l].w, bp.lstm[l].b);
        h = tp.slice_cols(hc, 0, cfg.width);
        c = tp.slice_cols(hc, cfg.width, 2 * cfg.width);
        hs[t] = h;
        cells.push_back(c);
      }
      layer_in = std::move(hs);
    }
    Var hs_all = tp.concat_rows(layer_in);
    f.logits = tp.matmul(hs_all, bp.unembed);
    f.states = tp.concat_rows(cells);
    return f;
  }
  f.time_major = false;
  Var x = tp.assemble_batch(prefix_embed, obs_embed, batch, n_obs, false);
  Var pe = tp.constant(sincos_positional_encoding(f.t_total, cfg.embed_dim));
  x = tp.add_tiled(x, pe, batch);
  const int64_t t_total = f.t_total;
  const int64_t dh = cfg.embed_dim / cfg.heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Var attn_out{};
  for (size_t l = 0; l < bp.tf.size(); ++l) {
    const BoundParams::T& tl = bp.tf[l];
    Var wq = tl.wq, wk = tl.wk, wv = tl.wv, wo = tl.wo;
    if (!bp.lora.empty()) {
      const auto& lo = bp.lora[l];
      wq = tp.add(wq, tp.matmul(lo[0].b, lo[0].a));
      wk = tp.add(wk, tp.matmul(lo[1].b, lo[1].a));
      wv = tp.add(wv, tp.matmul(lo[2].b, lo[2].a));
      wo = tp.add(wo, tp.matmul(lo[3].b, lo[3].a));
    }
    Var q = tp.layer_norm(tp.matmul(x, wq), tl.q_gain, tl.q_offset);
    Var k = tp.layer_norm(tp.matmul(x, wk), tl.k_gain, tl.k_offset);
    Var v = tp.matmul(x, wv);
    Var qh = tp.split_heads(q, batch, t_total, cfg.heads);
    Var kh = tp.split_heads(k, batch, t_total, cfg.heads);
    Var vh = tp.split_heads(v, batch, t_total, cfg.heads);
    Var scores = tp.scale(tp.bmm_nt(qh, kh, batch * cfg.heads, t_total), att_scale);
    Var attn = tp.causal_softmax(scores, t_total);
    Var ctx = tp.bmm_nn(attn, vh, batch * cfg.heads, t_total);
    Var merged = tp.merge_heads(ctx, batch, t_total, cfg.heads);
    attn_out = tp.matmul(merged, wo);
    x = tp.add(x, attn_out);
    Var h = tp.layer_norm(x, tl.mlp_gain, tl.mlp_offset);
    h = tp.relu(tp.broadcast_add(tp.matmul(h, tl.w1), tl.b1));
    h = tp.broadcast_add(tp.matmul(h, tl.w2), tl.b2);
    x = tp.add(x, h);
  }
  f.logits = tp.matmul(x, bp.unembed);
  f.states = attn_out;
  return f;
}

// Per-sequence loss rows: entry (b, k) is the negative log probability the
// net assigns to observation k of sequence b.
inline Var batch_logloss(Tape& tp, const Forward& f, std::span<const int> tokens,
                         int64_t n_obs) {
  Var logp = tp.log_softmax(f.logits);
  return tp.gather_nll(logp, tokens, f.batch, n_obs, f.prefix_len, f.time_major);
}

inline Mat one_hot_rows(std::span<const int> tokens, int64_t vocab) {
  Mat m(static_cast<int64_t>(tokens.size()), vocab);
  for (size_t i = 0; i < tokens.size(); ++i) m.at(static_cast<int64_t>(i), tokens[i]) = 1.0;
  return m;
}

// Hard-token prefix and observations for a single sequence; returns the
// per-step losses of the net.
inline std::vector<double> sequence_logloss_net(ParameterSet& ps, const TokenSequence& prefix,
                                                const TokenSequence& seq) {
  Tape tp(false);
  BoundParams bp = bind_params(tp, ps, false);
  std::optional<Var> pre;
  if (!prefix.empty())
    pre = tp.matmul(tp.constant(one_hot_rows(prefix, ps.config.input_dim)), bp.embed);
  Var obs = tp.matmul(tp.constant(one_hot_rows(seq, ps.config.input_dim)), bp.embed);
  Forward f = forward_batch(tp, bp, ps.config, pre, obs, 1, static_cast<int64_t>(seq.size()));
  Var losses = batch_logloss(tp, f, seq, static_cast<int64_t>(seq.size()));
  const Mat& lv = tp.val(losses);
  return std::vector<double>(lv.a.begin(), lv.a.end());
}

// Per-position internal states of a single sequence as (t_total x state_dim).
inline Mat internal_states(ParameterSet& ps, const TokenSequence& prefix,
                           const TokenSequence& seq) {
  Tape tp(false);
  BoundParams bp = bind_params(tp, ps, false);
  std::optional<Var> pre;
  if (!prefix.empty())
    pre = tp.matmul(tp.constant(one_hot_rows(prefix, ps.config.input_dim)), bp.embed);
  Var obs = tp.matmul(tp.constant(one_hot_rows(seq, ps.config.input_dim)), bp.embed);
  Forward f = forward_batch(tp, bp, ps.config, pre, obs, 1, static_cast<int64_t>(seq.size()));
  return tp.val(f.states);  // batch 1: both layouts coincide
}

}  // namespace coinlab
