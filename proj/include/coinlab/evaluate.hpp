#pragma once

// Monte-Carlo expected cumulative regret against the ground-truth task
// parameter, plus quantile aggregation over repetitions. Chunked forward
// passes bound memory; aggregation is index-ordered so results do not
// depend on the number of worker threads.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "coinlab/bayes.hpp"
#include "coinlab/csv.hpp"
#include "coinlab/data.hpp"
#include "coinlab/errors.hpp"
#include "coinlab/model.hpp"
#include "coinlab/tune.hpp"

namespace coinlab {

struct RegretCurve {
  std::string method;
  int repetition = 0;
  std::vector<double> per_step;  // cumulative expected regret after each step
};

struct MethodSummary {
  std::vector<double> median, q25, q75;
};

struct EvalOptions {
  int64_t n_eval = 200;
  int64_t chunk = 64;
  int threads = 1;
};

inline uint64_t eval_set_digest(const std::vector<EvalSequence>& eval_set) {
  uint64_t h = 0xCBF29CE484222325ull;
  auto mix = [&](uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xFF;
      h *= 0x100000001B3ull;
    }
  };
  for (const auto& seq : eval_set) {
    uint64_t bits;
    static_assert(sizeof(double) == sizeof(uint64_t));
    std::memcpy(&bits, &seq.tau.bias, sizeof(bits));
    mix(bits);
    for (int t : seq.tokens) mix(static_cast<uint64_t>(t));
  }
  return h;
}

namespace detail {

// Mean cumulative sums over sequences of (per-step loss - truth loss).
inline std::vector<double> reduce_regret(const std::vector<double>& losses,
                                         const std::vector<EvalSequence>& eval_set,
                                         int64_t n_eval) {
  std::vector<double> cum(static_cast<size_t>(n_eval), 0.0);
  for (size_t s = 0; s < eval_set.size(); ++s) {
    TokenSequence head(eval_set[s].tokens.begin(), eval_set[s].tokens.begin() + n_eval);
    const std::vector<double> truth = ground_truth_logprob(eval_set[s].tau, head);
    double running = 0.0;
    for (int64_t t = 0; t < n_eval; ++t) {
      running += losses[s * static_cast<size_t>(n_eval) + static_cast<size_t>(t)] +
                 truth[static_cast<size_t>(t)];
      cum[static_cast<size_t>(t)] += running;
    }
  }
  for (double& v : cum) v /= static_cast<double>(eval_set.size());
  return cum;
}

}  // namespace detail

inline RegretCurve regret_curve_exact(const ExactPredictor& predictor,
                                      const std::vector<EvalSequence>& eval_set,
                                      const EvalOptions& opt = {}) {
  RegretCurve rc;
  std::vector<double> losses(eval_set.size() * static_cast<size_t>(opt.n_eval));
  for (size_t s = 0; s < eval_set.size(); ++s) {
    ExactPredictor p = predictor;
    TokenSequence head(eval_set[s].tokens.begin(),
                       eval_set[s].tokens.begin() + opt.n_eval);
    const std::vector<double> l = p.sequence_logloss(head);
    std::copy(l.begin(), l.end(), losses.begin() + s * static_cast<size_t>(opt.n_eval));
  }
  rc.per_step = detail::reduce_regret(losses, eval_set, opt.n_eval);
  return rc;
}

inline RegretCurve regret_curve_net(const ParameterSet& base, const TunedArtifact& art,
                                    const std::vector<EvalSequence>& eval_set,
                                    const EvalOptions& opt = {}) {
  ParameterSet effective = apply_artifact(base, art);
  {
    ParameterSet check = base;
    if (art.base_digest != checkpoint_digest(check.to_named_tensors()))
      throw InvalidConfig("artifact was tuned from a different base checkpoint");
  }
  LoraFactors lora_copy;
  if (art.lora) lora_copy = *art.lora;

  const int64_t n = opt.n_eval;
  std::vector<double> losses(eval_set.size() * static_cast<size_t>(n));

  std::vector<std::pair<size_t, size_t>> chunks;  // [begin, end) sequence index
  for (size_t begin = 0; begin < eval_set.size();) {
    const size_t end = std::min(eval_set.size(), begin + static_cast<size_t>(opt.chunk));
    chunks.push_back({begin, end});
    begin = end;
  }

  auto run_chunk = [&](size_t ci) {
    const auto [begin, end] = chunks[ci];
    const int64_t b = static_cast<int64_t>(end - begin);
    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(b * n));
    for (size_t s = begin; s < end; ++s)
      flat.insert(flat.end(), eval_set[s].tokens.begin(), eval_set[s].tokens.begin() + n);
    Tape tp(false);
    ParameterSet local = effective;
    BoundParams bp = bind_params(tp, local, false);
    if (art.lora) {
      LoraFactors ll = lora_copy;
      bind_lora(tp, bp, ll, false);
    }
    std::optional<Var> pe = prefix_embedding(tp, art.prefix, bp.embed);
    Var obs = tp.matmul(tp.constant(one_hot_rows(flat, local.config.input_dim)), bp.embed);
    Forward f = forward_batch(tp, bp, local.config, pe, obs, b, n);
    Var nll = batch_logloss(tp, f, flat, n);
    const Mat& lv = tp.val(nll);
    for (int64_t r = 0; r < b; ++r)
      for (int64_t t = 0; t < n; ++t)
        losses[(begin + static_cast<size_t>(r)) * static_cast<size_t>(n) +
               static_cast<size_t>(t)] = lv.at(r, t);
  };

  const int threads = std::max(1, opt.threads);
  if (threads == 1) {
    for (size_t ci = 0; ci < chunks.size(); ++ci) run_chunk(ci);
  } else {
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    for (int w = 0; w < threads; ++w)
      pool.emplace_back([&] {
        for (size_t ci = next.fetch_add(1); ci < chunks.size(); ci = next.fetch_add(1))
          run_chunk(ci);
      });
    for (auto& t : pool) t.join();
  }

  RegretCurve rc;
  rc.per_step = detail::reduce_regret(losses, eval_set, n);
  return rc;
}

// Linear-interpolation quantile of already sorted values.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.size() == 1) return sorted[0];
  const double h = static_cast<double>(sorted.size() - 1) * p;
  const size_t lo = static_cast<size_t>(h);
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

inline MethodSummary summarize(const std::vector<RegretCurve>& curves) {
  if (curves.empty()) throw InvalidConfig("summarize needs at least one curve");
  const size_t n = curves[0].per_step.size();
  for (const auto& c : curves)
    if (c.per_step.size() != n) throw InvalidConfig("summarize: curve lengths differ");
  MethodSummary s;
  s.median.resize(n);
  s.q25.resize(n);
  s.q75.resize(n);
  std::vector<double> col(curves.size());
  for (size_t t = 0; t < n; ++t) {
    for (size_t c = 0; c < curves.size(); ++c) col[c] = curves[c].per_step[t];
    std::sort(col.begin(), col.end());
    s.q25[t] = quantile_sorted(col, 0.25);
    s.median[t] = quantile_sorted(col, 0.5);
    s.q75[t] = quantile_sorted(col, 0.75);
  }
  return s;
}

inline void write_regret_csv(const std::string& path, const std::string& experiment,
                             const std::string& arch, const std::vector<RegretCurve>& curves) {
  CsvWriter csv(path, {"experiment", "arch", "method", "repetition", "step", "cum_regret"});
  for (const auto& c : curves)
    for (size_t t = 0; t < c.per_step.size(); ++t)
      csv.row(experiment, arch, c.method, c.repetition, static_cast<int64_t>(t), c.per_step[t]);
}

inline void write_summary_csv(const std::string& path, const std::string& experiment,
                              const std::string& arch,
                              const std::vector<std::pair<std::string, MethodSummary>>& rows) {
  CsvWriter csv(path, {"experiment", "arch", "method", "step", "median", "q25", "q75"});
  for (const auto& [method, s] : rows)
    for (size_t t = 0; t < s.median.size(); ++t)
      csv.row(experiment, arch, method, static_cast<int64_t>(t), s.median[t], s.q25[t], s.q75[t]);
}

}  // namespace coinlab
