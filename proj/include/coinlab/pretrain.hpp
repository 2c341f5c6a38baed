#pragma once

// Meta-training loop: each step samples a fresh batch of tasks, one sequence
// per task, and fits the network to the sequences by mean total log loss.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "coinlab/bayes.hpp"
#include "coinlab/csv.hpp"
#include "coinlab/data.hpp"
#include "coinlab/errors.hpp"
#include "coinlab/model.hpp"
#include "coinlab/optim.hpp"

namespace coinlab {

struct PretrainConfig {
  int64_t steps = 1000;
  int64_t batch = 256;
  int64_t seq_len = 100;
  double lr = 0.001;
  double clip = 1.0;
  uint64_t seed = 0;
  int64_t holdout_size = 512;
  int64_t holdout_every = 50;

  void validate() const {
    if (steps <= 0 || batch <= 0 || seq_len <= 0 || lr <= 0.0 || clip <= 0.0 ||
        holdout_size <= 0 || holdout_every <= 0)
      throw InvalidConfig("pretrain config fields must be positive");
  }
};

struct PretrainResult {
  ParameterSet params;
  std::vector<double> train_loss;                  // per step, mean total loss per sequence
  std::vector<std::pair<int64_t, double>> holdout; // (step, mean total loss per sequence)
  double holdout_exact = 0.0;                      // exact Bayes loss on the same holdout set
};

namespace detail {

// Mean per-sequence total log loss over token sequences, forward only, chunked.
inline double mean_sequence_loss(ParameterSet& ps, const std::vector<TokenSequence>& seqs,
                                 const TokenSequence* prefix = nullptr, int64_t chunk = 128) {
  if (seqs.empty()) return 0.0;
  const int64_t n = static_cast<int64_t>(seqs[0].size());
  double total = 0.0;
  for (size_t base = 0; base < seqs.size();) {
    const int64_t b = std::min<int64_t>(chunk, static_cast<int64_t>(seqs.size() - base));
    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(b) * n);
    for (int64_t i = 0; i < b; ++i)
      flat.insert(flat.end(), seqs[base + i].begin(), seqs[base + i].end());
    Tape tp(false);
    BoundParams bp = bind_params(tp, ps, false);
    std::optional<Var> pre;
    if (prefix != nullptr && !prefix->empty())
      pre = tp.matmul(tp.constant(one_hot_rows(*prefix, ps.config.input_dim)), bp.embed);
    Var obs = tp.matmul(tp.constant(one_hot_rows(flat, ps.config.input_dim)), bp.embed);
    Forward f = forward_batch(tp, bp, ps.config, pre, obs, b, n);
    Var nll = batch_logloss(tp, f, flat, n);
    for (double v : tp.val(nll).a) total += v;
    base += b;
  }
  return total / static_cast<double>(seqs.size());
}

inline double mean_exact_loss(const ExactPredictor& predictor,
                              const std::vector<TokenSequence>& seqs) {
  double total = 0.0;
  for (const auto& s : seqs) {
    ExactPredictor p = predictor;
    for (double l : p.sequence_logloss(s)) total += l;
  }
  return total / static_cast<double>(seqs.size());
}

}  // namespace detail

inline PretrainResult meta_train(const PretrainConfig& pc, const PredictorConfig& mc,
                                 const TaskDistribution& dist) {
  pc.validate();
  mc.validate();
  // stream labels: 0 init, 1 training data, 2 holdout data
  RandomStream root(pc.seed);
  RandomStream init_rng = root.fork(0);
  RandomStream data_root = root.fork(1);

  PretrainResult res{init_params(mc, init_rng), {}, {}, 0.0};
  res.train_loss.reserve(static_cast<size_t>(pc.steps));

  std::vector<TokenSequence> holdout_seqs;
  {
    RandomStream ho = root.fork(2);
    holdout_seqs.reserve(static_cast<size_t>(pc.holdout_size));
    for (int64_t i = 0; i < pc.holdout_size; ++i) {
      RandomStream rs = ho.fork(static_cast<uint64_t>(i));
      TaskParam task = sample_task(dist, rs);
      holdout_seqs.push_back(sample_sequence(task, pc.seq_len, rs));
    }
  }
  res.holdout_exact = detail::mean_exact_loss(bayes_for(dist), holdout_seqs);
  res.holdout.push_back({0, detail::mean_sequence_loss(res.params, holdout_seqs)});

  AdamState adam(pc.lr);
  std::vector<Mat*> params;
  for (auto& [name, m] : res.params.named_params()) params.push_back(m);

  for (int64_t step = 1; step <= pc.steps; ++step) {
    RandomStream sr = data_root.fork(static_cast<uint64_t>(step));
    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(pc.batch) * pc.seq_len);
    for (int64_t b = 0; b < pc.batch; ++b) {
      TaskParam task = sample_task(dist, sr);
      TokenSequence seq = sample_sequence(task, pc.seq_len, sr);
      flat.insert(flat.end(), seq.begin(), seq.end());
    }

    Tape tp(true);
    BoundParams bp = bind_params(tp, res.params, true);
    Var obs = tp.matmul(tp.constant(one_hot_rows(flat, mc.input_dim)), bp.embed);
    Forward f = forward_batch(tp, bp, mc, std::nullopt, obs, pc.batch, pc.seq_len);
    Var nll = batch_logloss(tp, f, flat, pc.seq_len);
    Var loss = tp.scale(tp.sum(nll), 1.0 / static_cast<double>(pc.batch));
    const double loss_val = tp.val(loss).a[0];
    tp.backward(loss);

    std::vector<Mat*> grads;
    grads.reserve(params.size());
    std::vector<Var> leaves = bound_leaves(bp);
    for (Var v : leaves) grads.push_back(&tp.grad(v));
    const double gnorm = clip_by_global_norm(grads, pc.clip);
    if (!std::isfinite(loss_val) || !std::isfinite(gnorm))
      throw TrainingDiverged(static_cast<int>(step), gnorm,
                             "loss or gradient diverged at step " + std::to_string(step) +
                                 " (grad norm " + std::to_string(gnorm) + ")");
    adam_step(params, grads, adam);

    res.train_loss.push_back(loss_val);
    if (step % pc.holdout_every == 0 || step == pc.steps) {
      double h = detail::mean_sequence_loss(res.params, holdout_seqs);
      if (res.holdout.empty() || res.holdout.back().first != step) res.holdout.push_back({step, h});
    }
  }
  return res;
}

inline void write_loss_curve(const std::string& path, const PretrainResult& res) {
  CsvWriter csv(path, {"step", "train_loss", "holdout_loss"});
  size_t hi = 0;
  for (size_t i = 0; i < res.train_loss.size(); ++i) {
    const int64_t step = static_cast<int64_t>(i) + 1;
    while (hi + 1 < res.holdout.size() && res.holdout[hi + 1].first <= step) ++hi;
    csv.row(step, res.train_loss[i], res.holdout[hi].second);
  }
}

}  // namespace coinlab
