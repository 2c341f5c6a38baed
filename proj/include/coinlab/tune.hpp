#pragma once

// Prefix-tuning and weight-tuning methods plus the NoTuning/RandomPF
// baselines. Gradient methods minimize empirical log loss on fresh target
// samples; hard prompting searches all token prefixes on one shared sample
// set so the argmin is well-defined.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "coinlab/checkpoint.hpp"
#include "coinlab/csv.hpp"
#include "coinlab/data.hpp"
#include "coinlab/errors.hpp"
#include "coinlab/model.hpp"
#include "coinlab/optim.hpp"
#include "coinlab/pretrain.hpp"

namespace coinlab {

enum class Method {
  NoTuning,
  RandomPF,
  HardPT,
  SimplexPT,
  RealPT,
  SoftPT,
  EmbedWT,
  UnembedWT,
  UnAndEmbedWT,
  FullWT,
  LoRAWT,
};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::NoTuning: return "NoTuning";
    case Method::RandomPF: return "RandomPF";
    case Method::HardPT: return "HardPT";
    case Method::SimplexPT: return "SimplexPT";
    case Method::RealPT: return "RealPT";
    case Method::SoftPT: return "SoftPT";
    case Method::EmbedWT: return "EmbedWT";
    case Method::UnembedWT: return "UnembedWT";
    case Method::UnAndEmbedWT: return "Un+EmbedWT";
    case Method::FullWT: return "FullWT";
    case Method::LoRAWT: return "LoRAWT";
  }
  throw InvalidConfig("unknown method");
}

inline Method method_from_name(const std::string& s) {
  for (Method m : {Method::NoTuning, Method::RandomPF, Method::HardPT, Method::SimplexPT,
                   Method::RealPT, Method::SoftPT, Method::EmbedWT, Method::UnembedWT,
                   Method::UnAndEmbedWT, Method::FullWT, Method::LoRAWT})
    if (s == method_name(m)) return m;
  throw InvalidConfig("unknown method name: " + s);
}

inline bool is_prefix_method(Method m) {
  return m == Method::HardPT || m == Method::SimplexPT || m == Method::RealPT ||
         m == Method::SoftPT || m == Method::RandomPF;
}

inline bool is_gradient_method(Method m) {
  return m == Method::SimplexPT || m == Method::RealPT || m == Method::SoftPT ||
         m == Method::EmbedWT || m == Method::UnembedWT || m == Method::UnAndEmbedWT ||
         m == Method::FullWT || m == Method::LoRAWT;
}

struct Prefix {
  enum class Kind { Empty, Hard, Simplex, RealVec, SoftEmbed };
  Kind kind = Kind::Empty;
  TokenSequence tokens;  // Hard
  Mat values;            // Simplex logits, RealVec rows, or SoftEmbed rows

  int64_t length() const {
    if (kind == Kind::Empty) return 0;
    if (kind == Kind::Hard) return static_cast<int64_t>(tokens.size());
    return values.rows;
  }
};

struct TuneConfig {
  Method method = Method::SoftPT;
  int64_t steps = 1000;
  int64_t batch = 256;
  int64_t n_tune = 50;
  double lr = 5e-3;
  double clip = 1.0;
  int64_t prefix_len = 6;
  int64_t lora_rank = 4;
  int64_t hard_samples = 4096;
  uint64_t seed = 0;

  void validate(const PredictorConfig& mc) const {
    if (steps <= 0 || batch <= 0 || n_tune <= 0 || lr <= 0.0 || clip <= 0.0 ||
        prefix_len < 0 || lora_rank <= 0 || hard_samples <= 0)
      throw InvalidConfig("tune config fields must be positive");
    if (method == Method::LoRAWT && mc.arch != PredictorConfig::Arch::Transformer)
      throw UnsupportedArchitecture("LoRAWT requires the transformer");
  }
};

struct TunedArtifact {
  Method method = Method::NoTuning;
  Prefix prefix;
  uint64_t base_digest = 0;
  std::vector<NamedTensor> weight_deltas;  // replaced tensors, canonical order
  std::optional<LoraFactors> lora;
};

struct TuneResult {
  TunedArtifact artifact;
  std::vector<double> loss_curve;  // one mean loss per gradient step
};

// Row-wise softmax of prefix logits outside any tape.
inline Mat simplex_reparam(const Mat& logits) {
  Mat out(logits.rows, logits.cols);
  for (int64_t i = 0; i < logits.rows; ++i) {
    double mx = logits.at(i, 0);
    for (int64_t j = 1; j < logits.cols; ++j) mx = std::max(mx, logits.at(i, j));
    double sum = 0.0;
    for (int64_t j = 0; j < logits.cols; ++j) {
      out.at(i, j) = std::exp(logits.at(i, j) - mx);
      sum += out.at(i, j);
    }
    for (int64_t j = 0; j < logits.cols; ++j) out.at(i, j) /= sum;
  }
  return out;
}

inline Prefix init_prefix(Method method, int64_t prefix_len, const PredictorConfig& mc,
                          RandomStream& rng) {
  Prefix p;
  switch (method) {
    case Method::SimplexPT:
      p.kind = Prefix::Kind::Simplex;
      p.values = Mat(prefix_len, mc.input_dim);
      break;
    case Method::RealPT:
      p.kind = Prefix::Kind::RealVec;
      p.values = Mat(prefix_len, mc.input_dim);
      break;
    case Method::SoftPT:
      p.kind = Prefix::Kind::SoftEmbed;
      p.values = Mat(prefix_len, mc.embed_dim);
      break;
    default:
      return p;  // Empty; hard prefixes come from search or random draw
  }
  for (double& v : p.values.a) v = 0.1 * rng.normal();
  return p;
}

// Maps a fixed prefix into embedding space on the given tape. Returns the
// rows to prepend, or nothing when the prefix is empty.
inline std::optional<Var> prefix_embedding(Tape& tp, const Prefix& p, Var embed) {
  if (p.length() == 0) return std::nullopt;
  switch (p.kind) {
    case Prefix::Kind::Empty:
      return std::nullopt;
    case Prefix::Kind::Hard: {
      Mat one_hot = one_hot_rows(p.tokens, tp.val(embed).rows);
      return tp.matmul(tp.constant(std::move(one_hot)), embed);
    }
    case Prefix::Kind::Simplex:
      return tp.matmul(tp.softmax(tp.constant(p.values)), embed);
    case Prefix::Kind::RealVec:
      return tp.matmul(tp.constant(p.values), embed);
    case Prefix::Kind::SoftEmbed:
      return tp.constant(p.values);
  }
  return std::nullopt;
}

namespace detail {

// Same mapping with the prefix values as a trainable leaf.
inline std::optional<Var> prefix_embedding_trainable(Tape& tp, const Prefix& p, Var leaf,
                                                     Var embed) {
  if (p.length() == 0) return std::nullopt;
  switch (p.kind) {
    case Prefix::Kind::Simplex:
      return tp.matmul(tp.softmax(leaf), embed);
    case Prefix::Kind::RealVec:
      return tp.matmul(leaf, embed);
    case Prefix::Kind::SoftEmbed:
      return leaf;
    default:
      throw InvalidConfig("only simplex, real, and soft prefixes are trainable");
  }
}

inline bool weight_designated(Method m, const std::string& name) {
  switch (m) {
    case Method::EmbedWT: return name == "embed";
    case Method::UnembedWT: return name == "unembed";
    case Method::UnAndEmbedWT: return name == "embed" || name == "unembed";
    case Method::FullWT: return true;
    default: return false;
  }
}

inline std::vector<TokenSequence> sample_target_batch(const TaskDistribution& target,
                                                      int64_t count, int64_t n,
                                                      RandomStream& rs) {
  std::vector<TokenSequence> out;
  out.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    TaskParam task = sample_task(target, rs);
    out.push_back(sample_sequence(task, n, rs));
  }
  return out;
}

}  // namespace detail

inline Prefix hard_prefix_search(const ParameterSet& base, const TuneConfig& tc,
                                 const TaskDistribution& target) {
  if (tc.prefix_len > 20) throw SearchSpaceTooLarge("hard prefix search beyond L=20");
  Prefix best;
  best.kind = Prefix::Kind::Hard;
  if (tc.prefix_len == 0) return best;

  RandomStream root(tc.seed);
  RandomStream data = root.fork(1);
  const std::vector<TokenSequence> samples =
      detail::sample_target_batch(target, tc.hard_samples, tc.n_tune, data);

  ParameterSet work = base;
  double best_loss = 0.0;
  const int64_t total = int64_t{1} << tc.prefix_len;
  for (int64_t c = 0; c < total; ++c) {
    TokenSequence candidate(static_cast<size_t>(tc.prefix_len));
    for (int64_t i = 0; i < tc.prefix_len; ++i)
      candidate[static_cast<size_t>(i)] = static_cast<int>((c >> (tc.prefix_len - 1 - i)) & 1);
    const double loss = detail::mean_sequence_loss(work, samples, &candidate);
    if (c == 0 || loss < best_loss || (loss == best_loss && candidate < best.tokens)) {
      best_loss = loss;
      best.tokens = candidate;
    }
  }
  return best;
}

inline TuneResult tune(const ParameterSet& base, const TuneConfig& tc,
                       const TaskDistribution& target) {
  tc.validate(base.config);
  TuneResult res;
  res.artifact.method = tc.method;
  ParameterSet work = base;
  res.artifact.base_digest = checkpoint_digest(work.to_named_tensors());

  RandomStream root(tc.seed);
  RandomStream init_rng = root.fork(0);
  RandomStream data_root = root.fork(1);

  if (tc.method == Method::NoTuning) return res;
  if (tc.method == Method::RandomPF) {
    res.artifact.prefix.kind = Prefix::Kind::Hard;
    for (int64_t i = 0; i < tc.prefix_len; ++i)
      res.artifact.prefix.tokens.push_back(init_rng.bernoulli(0.5) ? 1 : 0);
    return res;
  }
  if (tc.method == Method::HardPT) {
    res.artifact.prefix = hard_prefix_search(base, tc, target);
    return res;
  }

  const bool prefix_method = is_prefix_method(tc.method);
  Prefix prefix = init_prefix(tc.method, tc.prefix_len, work.config, init_rng);
  LoraFactors lora;
  if (tc.method == Method::LoRAWT) lora = init_lora(work.config, tc.lora_rank, init_rng);

  AdamState adam(tc.lr);
  res.loss_curve.reserve(static_cast<size_t>(tc.steps));

  for (int64_t step = 1; step <= tc.steps; ++step) {
    RandomStream sr = data_root.fork(static_cast<uint64_t>(step));
    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(tc.batch) * tc.n_tune);
    for (int64_t b = 0; b < tc.batch; ++b) {
      TaskParam task = sample_task(target, sr);
      TokenSequence seq = sample_sequence(task, tc.n_tune, sr);
      flat.insert(flat.end(), seq.begin(), seq.end());
    }

    Tape tp(true);
    BoundParams bp = bind_params(
        tp, work, [&](const std::string& name) { return detail::weight_designated(tc.method, name); });
    if (tc.method == Method::LoRAWT) bind_lora(tp, bp, lora, true);

    std::optional<Var> pleaf;
    std::optional<Var> pembed;
    if (prefix_method && prefix.length() > 0) {
      pleaf = tp.leaf(prefix.values, true);
      pembed = detail::prefix_embedding_trainable(tp, prefix, *pleaf, bp.embed);
    }

    Var obs = tp.matmul(tp.constant(one_hot_rows(flat, work.config.input_dim)), bp.embed);
    Forward f = forward_batch(tp, bp, work.config, pembed, obs, tc.batch, tc.n_tune);
    Var nll = batch_logloss(tp, f, flat, tc.n_tune);
    Var loss = tp.scale(tp.sum(nll), 1.0 / static_cast<double>(tc.batch));
    const double loss_val = tp.val(loss).a[0];
    tp.backward(loss);

    // trainables in fixed order: prefix, designated weights, lora factors
    std::vector<Mat*> params, grads;
    if (pleaf) {
      params.push_back(&prefix.values);
      grads.push_back(&tp.grad(*pleaf));
    }
    {
      auto named = work.named_params();
      auto leaves = bound_leaves(bp);
      for (size_t i = 0; i < named.size(); ++i) {
        if (!detail::weight_designated(tc.method, named[i].first)) continue;
        params.push_back(named[i].second);
        grads.push_back(&tp.grad(leaves[i]));
      }
    }
    if (tc.method == Method::LoRAWT) {
      for (size_t l = 0; l < lora.layers.size(); ++l) {
        for (size_t i = 0; i < 4; ++i) {
          params.push_back(&lora.layers[l][i].a);
          grads.push_back(&tp.grad(bp.lora[l][i].a));
          params.push_back(&lora.layers[l][i].b);
          grads.push_back(&tp.grad(bp.lora[l][i].b));
        }
      }
    }

    const double gnorm = clip_by_global_norm(grads, tc.clip);
    if (!std::isfinite(loss_val) || !std::isfinite(gnorm))
      throw TrainingDiverged(static_cast<int>(step), gnorm,
                             "tuning diverged at step " + std::to_string(step));
    adam_step(params, grads, adam);
    res.loss_curve.push_back(loss_val);
  }

  if (prefix_method) {
    res.artifact.prefix = std::move(prefix);
  } else {
    auto named = work.named_params();
    for (auto& [name, m] : named)
      if (detail::weight_designated(tc.method, name)) res.artifact.weight_deltas.push_back({name, *m});
    if (tc.method == Method::LoRAWT) res.artifact.lora = std::move(lora);
  }
  return res;
}

// Effective parameters for evaluation: base with any replaced tensors applied.
// LoRA factors stay in the artifact and are bound at forward time.
inline ParameterSet apply_artifact(const ParameterSet& base, const TunedArtifact& art) {
  ParameterSet out = base;
  if (art.weight_deltas.empty()) return out;
  auto named = out.named_params();
  for (const auto& delta : art.weight_deltas) {
    bool found = false;
    for (auto& [name, m] : named) {
      if (name != delta.name) continue;
      if (!m->same_shape(delta.value)) throw InvalidConfig("artifact tensor shape mismatch: " + delta.name);
      *m = delta.value;
      found = true;
      break;
    }
    if (!found) throw InvalidConfig("artifact names unknown tensor: " + delta.name);
  }
  return out;
}

inline void write_tuning_curve(const std::string& path, const std::vector<double>& curve) {
  CsvWriter csv(path, {"step", "loss"});
  for (size_t i = 0; i < curve.size(); ++i) csv.row(static_cast<int64_t>(i) + 1, curve[i]);
}

namespace detail {

inline const char* prefix_kind_name(Prefix::Kind k) {
  switch (k) {
    case Prefix::Kind::Empty: return "empty";
    case Prefix::Kind::Hard: return "hard";
    case Prefix::Kind::Simplex: return "simplex";
    case Prefix::Kind::RealVec: return "real";
    case Prefix::Kind::SoftEmbed: return "soft";
  }
  throw InvalidConfig("unknown prefix kind");
}

inline Prefix::Kind prefix_kind_from_name(const std::string& s) {
  for (Prefix::Kind k : {Prefix::Kind::Empty, Prefix::Kind::Hard, Prefix::Kind::Simplex,
                         Prefix::Kind::RealVec, Prefix::Kind::SoftEmbed})
    if (s == prefix_kind_name(k)) return k;
  throw InvalidConfig("unknown prefix kind: " + s);
}

}  // namespace detail

// Two files per artifact: <stem>.json metadata and <stem>.ckpt tensors.
inline void save_artifact(const std::string& stem, const TunedArtifact& art) {
  nlohmann::json meta;
  meta["method"] = method_name(art.method);
  meta["prefix_kind"] = detail::prefix_kind_name(art.prefix.kind);
  meta["base_digest"] = hex64(art.base_digest);
  if (art.prefix.kind == Prefix::Kind::Hard) meta["prefix_tokens"] = art.prefix.tokens;
  std::vector<NamedTensor> tensors;
  if (art.prefix.kind != Prefix::Kind::Empty && art.prefix.kind != Prefix::Kind::Hard)
    tensors.push_back({"prefix_values", art.prefix.values});
  std::vector<std::string> delta_names;
  for (const auto& d : art.weight_deltas) {
    delta_names.push_back(d.name);
    tensors.push_back({"delta." + d.name, d.value});
  }
  meta["delta_names"] = delta_names;
  if (art.lora) {
    meta["lora_rank"] = art.lora->rank;
    meta["lora_layers"] = art.lora->layers.size();
    static const char* kProj[4] = {"q", "k", "v", "o"};
    for (size_t l = 0; l < art.lora->layers.size(); ++l) {
      for (size_t i = 0; i < 4; ++i) {
        const std::string p = "lora" + std::to_string(l) + "." + kProj[i] + ".";
        tensors.push_back({p + "a", art.lora->layers[l][i].a});
        tensors.push_back({p + "b", art.lora->layers[l][i].b});
      }
    }
  }
  save_checkpoint(stem + ".ckpt", tensors);
  std::ofstream out(stem + ".json");
  if (!out) throw InvalidConfig("cannot write artifact metadata: " + stem + ".json");
  out << meta.dump(2) << "\n";
}

inline TunedArtifact load_artifact(const std::string& stem) {
  std::ifstream in(stem + ".json");
  if (!in) throw InvalidConfig("cannot read artifact metadata: " + stem + ".json");
  nlohmann::json meta = nlohmann::json::parse(in);
  TunedArtifact art;
  art.method = method_from_name(meta.at("method").get<std::string>());
  art.prefix.kind = detail::prefix_kind_from_name(meta.at("prefix_kind").get<std::string>());
  art.base_digest = std::stoull(meta.at("base_digest").get<std::string>(), nullptr, 16);
  if (art.prefix.kind == Prefix::Kind::Hard)
    art.prefix.tokens = meta.at("prefix_tokens").get<TokenSequence>();

  std::vector<NamedTensor> tensors = load_checkpoint(stem + ".ckpt");
  size_t idx = 0;
  auto take = [&](const std::string& name) -> Mat {
    if (idx >= tensors.size() || tensors[idx].name != name)
      throw InvalidConfig("artifact tensor order mismatch at " + name);
    return std::move(tensors[idx++].value);
  };
  if (art.prefix.kind != Prefix::Kind::Empty && art.prefix.kind != Prefix::Kind::Hard)
    art.prefix.values = take("prefix_values");
  for (const auto& name : meta.at("delta_names").get<std::vector<std::string>>())
    art.weight_deltas.push_back({name, take("delta." + name)});
  if (meta.contains("lora_rank")) {
    LoraFactors lora;
    lora.rank = meta.at("lora_rank").get<int64_t>();
    static const char* kProj[4] = {"q", "k", "v", "o"};
    const size_t layers = meta.at("lora_layers").get<size_t>();
    for (size_t l = 0; l < layers; ++l) {
      std::array<LoraFactors::Pair, 4> layer;
      for (size_t i = 0; i < 4; ++i) {
        const std::string p = "lora" + std::to_string(l) + "." + kProj[i] + ".";
        layer[i] = {take(p + "a"), take(p + "b")};
      }
      lora.layers.push_back(layer);
    }
    art.lora = std::move(lora);
  }
  return art;
}

}  // namespace coinlab
