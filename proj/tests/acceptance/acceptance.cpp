// Acceptance gate: runs the criteria requested on the command line and
// prints one PASS/FAIL line per criterion. Exit status is nonzero when any
// requested criterion fails. Expensive pretrained checkpoints are shared
// through the --work directory (written by A3, read by A4..A9).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "coinlab/experiment.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace coinlab;
using coinlab::testing::gradcheck;
using coinlab::testing::GraphBuilder;
using coinlab::testing::random_mat;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

// ---- shared reduced-scale configuration (documented reduced config:
// width 64, batch 128, 1500 pretraining steps) ----

PredictorConfig reduced_model(PredictorConfig::Arch arch) {
  PredictorConfig mc;
  mc.arch = arch;
  mc.embed_dim = 64;
  mc.width = 64;
  mc.heads = 4;
  return mc;
}

fs::path ckpt_path(const fs::path& work, PredictorConfig::Arch arch) {
  return work / (arch == PredictorConfig::Arch::LSTM ? "pretrained_lstm.ckpt"
                                                     : "pretrained_transformer.ckpt");
}

ParameterSet load_pretrained(const fs::path& work, PredictorConfig::Arch arch) {
  const fs::path p = ckpt_path(work, arch);
  if (!fs::exists(p))
    throw InvalidConfig("missing checkpoint " + p.string() + "; run criterion A3 first");
  RandomStream r(0);
  ParameterSet ps = init_params(reduced_model(arch), r);
  ps.load_named_tensors(load_checkpoint(p.string()));
  return ps;
}

TuneConfig acc_tune(Method m, uint64_t seed, int64_t steps = 400) {
  TuneConfig tc;
  tc.method = m;
  tc.steps = steps;
  tc.batch = 64;
  tc.n_tune = 50;
  tc.lr = 5e-3;
  tc.clip = 1.0;
  tc.prefix_len = 6;
  tc.lora_rank = 4;
  tc.hard_samples = 1024;
  tc.seed = seed;
  return tc;
}

const std::vector<EvalSequence>& r2s_eval() {
  static auto s = sample_eval_set(TaskDistribution::single_coin(0.2), 2048, 200, 9001);
  return s;
}

const std::vector<EvalSequence>& r2m_eval() {
  static auto s =
      sample_eval_set(TaskDistribution::two_coin_mixture({0.2, 0.8}, {0.5, 0.5}), 2048, 200, 9002);
  return s;
}

const std::vector<EvalSequence>& rc_eval() {
  static auto s = sample_eval_set(TaskDistribution::random_coins(1.0, 1.0), 2048, 100, 9003);
  return s;
}

RegretCurve net_regret(const ParameterSet& ps, const std::vector<EvalSequence>& eval_set,
                       int64_t n_eval) {
  TunedArtifact art;
  art.method = Method::NoTuning;
  ParameterSet copy = ps;
  art.base_digest = checkpoint_digest(copy.to_named_tensors());
  EvalOptions opt;
  opt.n_eval = n_eval;
  return regret_curve_net(ps, art, eval_set, opt);
}

std::vector<RegretCurve> run_reps(const ParameterSet& base, Method m,
                                  const TaskDistribution& target,
                                  const std::vector<EvalSequence>& eval_set, int reps,
                                  uint64_t salt, std::vector<TunedArtifact>* artifacts = nullptr,
                                  int64_t steps = 400) {
  EvalOptions opt;
  opt.n_eval = static_cast<int64_t>(eval_set[0].tokens.size());
  std::vector<RegretCurve> out;
  for (int r = 0; r < reps; ++r) {
    TuneConfig tc = acc_tune(m, coinlab::detail::mix_seed(salt, static_cast<uint64_t>(m),
                                                          static_cast<uint64_t>(r)),
                             steps);
    TuneResult tr = tune(base, tc, target);
    RegretCurve c = regret_curve_net(base, tr.artifact, eval_set, opt);
    c.method = method_name(m);
    c.repetition = r;
    if (artifacts) artifacts->push_back(std::move(tr.artifact));
    out.push_back(std::move(c));
  }
  return out;
}

double median_at(const std::vector<RegretCurve>& curves, int64_t step) {
  std::vector<double> v;
  for (const auto& c : curves) v.push_back(c.per_step[static_cast<size_t>(step)]);
  std::sort(v.begin(), v.end());
  return quantile_sorted(v, 0.5);
}

// ---- A1: gradient correctness ----

Outcome a1(const fs::path&) {
  const auto t0 = std::chrono::steady_clock::now();
  RandomStream rng(77);
  double worst = 0.0;
  std::string worst_op;
  auto record = [&](const std::string& name, const coinlab::testing::GradCheckResult& r) {
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      worst_op = name;
    }
  };
  // Reduces any op output to a scalar with fixed random weights so every
  // output entry influences the loss differently.
  auto weighted = [](Tape& tp, Var v, const Mat& w) { return tp.sum(tp.mul(v, tp.constant(w))); };
  auto w34 = random_mat(3, 4, rng), w43 = random_mat(4, 3, rng), w63 = random_mat(6, 3, rng),
       w64 = random_mat(6, 4, rng), w12_2 = random_mat(12, 2, rng), w22 = random_mat(2, 2, rng),
       w28 = random_mat(2, 8, rng), w82 = random_mat(8, 2, rng);

  auto check1 = [&](const std::string& name, std::vector<Mat> inputs, GraphBuilder b) {
    record(name, gradcheck(b, std::move(inputs)));
  };

  check1("add", {random_mat(3, 4, rng), random_mat(3, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) { return weighted(tp, tp.add(l[0], l[1]), w34); });
  check1("sub", {random_mat(3, 4, rng), random_mat(3, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) { return weighted(tp, tp.sub(l[0], l[1]), w34); });
  check1("mul", {random_mat(3, 4, rng), random_mat(3, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) { return weighted(tp, tp.mul(l[0], l[1]), w34); });
  check1("scale", {random_mat(3, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) { return weighted(tp, tp.scale(l[0], -1.7), w34); });
  check1("sigmoid", {random_mat(3, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) { return weighted(tp, tp.sigmoid(l[0]), w34); });
  check1("tanh", {random_mat(3, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) { return weighted(tp, tp.tanh(l[0]), w34); });
  {
    Mat m = random_mat(3, 4, rng);
    for (double& v : m.a) v += v >= 0.0 ? 0.25 : -0.25;  // keep clear of the relu kink
    check1("relu", {m},
           [&](Tape& tp, std::vector<Var>& l) { return weighted(tp, tp.relu(l[0]), w34); });
  }
  check1("softmax", {random_mat(3, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) { return weighted(tp, tp.softmax(l[0]), w34); });
  check1("log_softmax", {random_mat(3, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) { return weighted(tp, tp.log_softmax(l[0]), w34); });
  check1("causal_softmax", {random_mat(6, 3, rng)}, [&](Tape& tp, std::vector<Var>& l) {
    return weighted(tp, tp.causal_softmax(l[0], 3), w63);
  });
  check1("layer_norm", {random_mat(3, 4, rng), random_mat(1, 4, rng), random_mat(1, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) {
           return weighted(tp, tp.layer_norm(l[0], l[1], l[2]), w34);
         });
  auto w33 = random_mat(3, 3, rng);
  check1("matmul", {random_mat(3, 4, rng), random_mat(4, 3, rng)},
         [&](Tape& tp, std::vector<Var>& l) { return weighted(tp, tp.matmul(l[0], l[1]), w33); });
  check1("transpose", {random_mat(3, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) { return weighted(tp, tp.transpose(l[0]), w43); });
  check1("broadcast_add", {random_mat(3, 4, rng), random_mat(1, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) {
           return weighted(tp, tp.broadcast_add(l[0], l[1]), w34);
         });
  check1("bmm_nt", {random_mat(6, 4, rng), random_mat(6, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) {
           return weighted(tp, tp.bmm_nt(l[0], l[1], 2, 3), w63);
         });
  check1("bmm_nn", {random_mat(6, 3, rng), random_mat(6, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) {
           return weighted(tp, tp.bmm_nn(l[0], l[1], 2, 3), w64);
         });
  check1("concat_rows", {random_mat(2, 4, rng), random_mat(1, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) {
           return weighted(tp, tp.concat_rows({l[0], l[1]}), w34);
         });
  check1("concat_cols", {random_mat(3, 2, rng), random_mat(3, 2, rng)},
         [&](Tape& tp, std::vector<Var>& l) { return weighted(tp, tp.concat_cols(l[0], l[1]), w34); });
  check1("slice_rows", {random_mat(6, 4, rng)}, [&](Tape& tp, std::vector<Var>& l) {
    return weighted(tp, tp.slice_rows(l[0], 1, 4), w34);
  });
  check1("slice_cols", {random_mat(3, 6, rng)}, [&](Tape& tp, std::vector<Var>& l) {
    return weighted(tp, tp.slice_cols(l[0], 2, 6), w34);
  });
  check1("split_heads", {random_mat(6, 4, rng)}, [&](Tape& tp, std::vector<Var>& l) {
    return weighted(tp, tp.split_heads(l[0], 2, 3, 2), w12_2);
  });
  check1("merge_heads", {random_mat(12, 2, rng)}, [&](Tape& tp, std::vector<Var>& l) {
    return weighted(tp, tp.merge_heads(l[0], 2, 3, 2), w64);
  });
  check1("add_tiled", {random_mat(6, 4, rng), random_mat(3, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) { return weighted(tp, tp.add_tiled(l[0], l[1], 2), w64); });
  auto w10_4 = random_mat(10, 4, rng);
  for (bool time_major : {false, true})
    check1(time_major ? "assemble_batch/time" : "assemble_batch/batch",
           {random_mat(2, 4, rng), random_mat(4, 4, rng)}, [&, time_major](Tape& tp, std::vector<Var>& l) {
             return weighted(tp, tp.assemble_batch(l[0], l[1], 2, 2, time_major), w10_4);
           });
  for (bool time_major : {false, true})
    check1(time_major ? "gather_nll/time" : "gather_nll/batch", {random_mat(8, 2, rng)},
           [&, time_major](Tape& tp, std::vector<Var>& l) {
             const std::vector<int> toks = {0, 1, 1, 0};
             Var logp = tp.log_softmax(l[0]);
             return weighted(tp, tp.gather_nll(logp, toks, 2, 2, 1, time_major), w22);
           });
  check1("sum", {random_mat(3, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) { return tp.sum(tp.mul(l[0], l[0])); });
  check1("mean", {random_mat(3, 4, rng)},
         [&](Tape& tp, std::vector<Var>& l) { return tp.mean(tp.mul(l[0], l[0])); });
  check1("lstm_cell",
         {random_mat(2, 3, rng), random_mat(2, 4, rng), random_mat(2, 4, rng),
          random_mat(7, 16, rng, 0.4), random_mat(1, 16, rng, 0.4)},
         [&](Tape& tp, std::vector<Var>& l) {
           return weighted(tp, tp.lstm_cell(l[0], l[1], l[2], l[3], l[4]), w28);
         });
  check1("unembed_path", {random_mat(8, 2, rng)}, [&](Tape& tp, std::vector<Var>& l) {
    return weighted(tp, tp.log_softmax(tp.matmul(l[0], tp.constant(w22))), w82);
  });

  // Full LSTM and Transformer losses at width 8, embed 8, sequence length 5.
  for (auto arch : {PredictorConfig::Arch::LSTM, PredictorConfig::Arch::Transformer}) {
    PredictorConfig cfg;
    cfg.arch = arch;
    cfg.embed_dim = 8;
    cfg.width = 8;
    cfg.heads = 2;
    RandomStream prng(arch == PredictorConfig::Arch::LSTM ? 14 : 15);
    ParameterSet ps = init_params(cfg, prng);
    Mat soft_prefix = random_mat(2, 8, prng, 0.1);
    const std::vector<int> tokens = {1, 0, 1, 1, 0};
    std::vector<Mat> inputs;
    std::vector<std::pair<std::string, Mat*>> named = ps.named_params();
    for (auto& [name, m] : named) inputs.push_back(*m);
    inputs.push_back(soft_prefix);
    auto res = gradcheck(
        [&](Tape& tp, std::vector<Var>& leaves) {
          BoundParams bp;
          size_t i = 0;
          bp.embed = leaves[i++];
          if (cfg.arch == PredictorConfig::Arch::LSTM) {
            for (int64_t l = 0; l < cfg.layers; ++l)
              bp.lstm.push_back({leaves[i], leaves[i + 1]}), i += 2;
          } else {
            for (int64_t l = 0; l < cfg.layers; ++l) {
              BoundParams::T t;
              t.wq = leaves[i++];
              t.wk = leaves[i++];
              t.wv = leaves[i++];
              t.wo = leaves[i++];
              t.q_gain = leaves[i++];
              t.q_offset = leaves[i++];
              t.k_gain = leaves[i++];
              t.k_offset = leaves[i++];
              t.mlp_gain = leaves[i++];
              t.mlp_offset = leaves[i++];
              t.w1 = leaves[i++];
              t.b1 = leaves[i++];
              t.w2 = leaves[i++];
              t.b2 = leaves[i++];
              bp.tf.push_back(t);
            }
          }
          bp.unembed = leaves[i++];
          Var prefix = leaves.back();
          Var obs = tp.matmul(tp.constant(one_hot_rows(tokens, 2)), bp.embed);
          Forward f = forward_batch(tp, bp, cfg, prefix, obs, 1, 5);
          Var nll = batch_logloss(tp, f, tokens, 5);
          return tp.scale(tp.sum(nll), 0.2);
        },
        inputs);
    record(arch == PredictorConfig::Arch::LSTM ? "full_lstm_loss" : "full_transformer_loss", res);
  }

  const double elapsed = seconds_since(t0);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2e", worst);
  Outcome out;
  out.pass = worst < 1e-4 && elapsed < 60.0;
  out.detail = std::string("worst rel err ") + buf + " (" +
               (worst_op.empty() ? "all within tolerance" : worst_op) + "), " + fmt(elapsed) + "s";
  return out;
}

// ---- A2: Bayes oracle equivalence ----

Outcome a2(const fs::path&) {
  const auto t0 = std::chrono::steady_clock::now();
  RandomStream rng(177);
  double worst_laplace = 0.0;
  for (int i = 0; i < 100; ++i) {
    const int64_t n = static_cast<int64_t>(rng.uniform() * 300.0);
    const double bias = rng.uniform();
    ExactPredictor p = ExactPredictor::laplace();
    int64_t k = 0;
    for (int64_t t = 0; t < n; ++t) {
      const int tok = rng.bernoulli(bias) ? 1 : 0;
      k += tok;
      p = p.update(tok);
    }
    const double got = p.predict_next();
    const double want = coinlab::testing::quadrature_predictive(1.0, 1.0, k, n, 10000);
    worst_laplace = std::max(worst_laplace, std::abs(got - want));
  }

  double worst_mix = 0.0;
  for (int i = 0; i < 100; ++i) {
    const int j = 2 + static_cast<int>(rng.uniform() * 3.0);
    std::vector<double> biases, weights;
    double wsum = 0.0;
    for (int a = 0; a < j; ++a) {
      biases.push_back(0.05 + 0.9 * rng.uniform());
      weights.push_back(0.1 + rng.uniform());
      wsum += weights.back();
    }
    for (double& w : weights) w /= wsum;
    ExactPredictor p = ExactPredictor::finite_mixture(biases, weights);
    TokenSequence seq;
    const double bias = rng.uniform();
    for (int t = 0; t < 50; ++t) {
      const double got = p.predict_next();
      const double want = coinlab::testing::brute_force_mixture_predictive(biases, weights, seq);
      worst_mix = std::max(worst_mix, std::abs(got - want));
      const int tok = rng.bernoulli(bias) ? 1 : 0;
      seq.push_back(tok);
      p = p.update(tok);
    }
  }

  const double elapsed = seconds_since(t0);
  Outcome out;
  out.pass = worst_laplace < 1e-6 && worst_mix < 1e-10 && elapsed < 60.0;
  out.detail = "laplace vs quadrature " + fmt(worst_laplace * 1e6) + "e-6, mixture vs brute force " +
               fmt(worst_mix * 1e10) + "e-10, " + fmt(elapsed) + "s";
  return out;
}

// ---- A3: meta-training convergence (writes the shared checkpoints) ----

Outcome a3(const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(work);
  const TaskDistribution dist = TaskDistribution::random_coins(1.0, 1.0);
  const RegretCurve laplace = [&] {
    EvalOptions opt;
    opt.n_eval = 100;
    return regret_curve_exact(ExactPredictor::laplace(), rc_eval(), opt);
  }();

  Outcome out;
  out.pass = true;
  for (auto arch : {PredictorConfig::Arch::Transformer, PredictorConfig::Arch::LSTM}) {
    PretrainConfig pc;
    pc.steps = 1500;
    pc.batch = 128;
    pc.seq_len = 100;
    pc.lr = 1e-3;
    pc.clip = 1.0;
    pc.seed = arch == PredictorConfig::Arch::Transformer ? 101 : 102;
    pc.holdout_size = 128;
    pc.holdout_every = 500;
    PretrainResult pr = meta_train(pc, reduced_model(arch), dist);
    save_checkpoint(ckpt_path(work, arch).string(), pr.params.to_named_tensors());
    const RegretCurve net = net_regret(pr.params, rc_eval(), 100);
    const double gap = std::abs(net.per_step[99] - laplace.per_step[99]);
    out.detail += std::string(arch == PredictorConfig::Arch::Transformer ? "transformer" : "lstm") +
                  " gap@100 " + fmt(gap) + " ";
    if (gap > 0.25) out.pass = false;
  }
  out.detail += "(laplace regret@100 " + fmt(laplace.per_step[99]) + "), " +
                fmt(seconds_since(t0)) + "s";
  return out;
}

// ---- A4: positive result in R2S ----

Outcome a4(const fs::path& work) {
  const ParameterSet base = load_pretrained(work, PredictorConfig::Arch::Transformer);
  const TaskDistribution target = TaskDistribution::single_coin(0.2);
  EvalOptions opt;
  opt.n_eval = 200;
  const RegretCurve tb = regret_curve_exact(bayes_for(target), r2s_eval(), opt);
  const auto soft = run_reps(base, Method::SoftPT, target, r2s_eval(), 10, 40);
  const auto hard = run_reps(base, Method::HardPT, target, r2s_eval(), 10, 40);
  const double s49 = median_at(soft, 49), h49 = median_at(hard, 49), t49 = tb.per_step[49];
  Outcome out;
  out.pass = std::abs(s49 - t49) <= 0.10 && s49 < h49;
  out.detail = "SoftPT median@49 " + fmt(s49) + ", TargetBayes " + fmt(t49) + ", HardPT median@49 " +
               fmt(h49);
  return out;
}

// ---- A5: negative result in R2M ----

Outcome a5(const fs::path& work) {
  const TaskDistribution target = TaskDistribution::two_coin_mixture({0.2, 0.8}, {0.5, 0.5});
  EvalOptions opt;
  opt.n_eval = 200;
  const double t49 = regret_curve_exact(bayes_for(target), r2m_eval(), opt).per_step[49];

  Outcome out;
  out.pass = true;
  out.detail = "TargetBayes@49 " + fmt(t49) + "; ";
  for (auto arch : {PredictorConfig::Arch::Transformer, PredictorConfig::Arch::LSTM}) {
    const ParameterSet base = load_pretrained(work, arch);
    const std::string aname = arch == PredictorConfig::Arch::Transformer ? "tf" : "lstm";
    for (Method m : {Method::HardPT, Method::SimplexPT, Method::RealPT, Method::SoftPT}) {
      const double med = median_at(run_reps(base, m, target, r2m_eval(), 10, 50), 49);
      out.detail += aname + "/" + method_name(m) + " " + fmt(med - t49) + " ";
      if (med - t49 < 0.15) out.pass = false;
    }
    const double full = median_at(run_reps(base, Method::FullWT, target, r2m_eval(), 10, 50), 49);
    out.detail += aname + "/FullWT " + fmt(full - t49) + " ";
    if (std::abs(full - t49) > 0.15) out.pass = false;
    if (arch == PredictorConfig::Arch::Transformer) {
      const double lora = median_at(run_reps(base, Method::LoRAWT, target, r2m_eval(), 10, 50), 49);
      out.detail += "tf/LoRAWT " + fmt(lora - t49) + " ";
      if (std::abs(lora - t49) > 0.15) out.pass = false;
    }
  }
  return out;
}

// ---- A6: untrained-network result in U2M ----

Outcome a6(const fs::path&) {
  RandomStream init(321);
  ParameterSet base = init_params(reduced_model(PredictorConfig::Arch::Transformer), init);
  const TaskDistribution target = TaskDistribution::two_coin_mixture({0.2, 0.8}, {0.5, 0.5});
  const auto soft = run_reps(base, Method::SoftPT, target, r2m_eval(), 10, 60);
  const RegretCurve none = net_regret(base, r2m_eval(), 200);
  const double s49 = median_at(soft, 49), s199 = median_at(soft, 199);
  const double n49 = none.per_step[49];
  const double early_rate = s49 / 50.0;
  const double late_rate = (s199 - s49) / 150.0;
  Outcome out;
  out.pass = s49 <= 0.5 * n49 && late_rate > early_rate;
  out.detail = "SoftPT median@49 " + fmt(s49) + " vs NoTuning " + fmt(n49) + "; rate 0-49 " +
               fmt(early_rate) + " vs 50-199 " + fmt(late_rate);
  return out;
}

// ---- A7: hard prefix search oracle ----

Outcome a7(const fs::path& work) {
  ParameterSet base = load_pretrained(work, PredictorConfig::Arch::Transformer);
  const TaskDistribution target = TaskDistribution::single_coin(0.2);
  TuneConfig tc = acc_tune(Method::HardPT, 424242);
  tc.hard_samples = 4096;
  const Prefix found = hard_prefix_search(base, tc, target);

  // Independent re-scan: same common-random-numbers sample set, separately
  // written enumeration and loss computation.
  RandomStream data = RandomStream(tc.seed).fork(1);
  std::vector<TokenSequence> samples;
  for (int64_t i = 0; i < tc.hard_samples; ++i) {
    TaskParam tau = sample_task(target, data);
    samples.push_back(sample_sequence(tau, tc.n_tune, data));
  }
  auto candidate_loss = [&](const TokenSequence& prefix) {
    const int64_t n = tc.n_tune, chunk = 256;
    double total = 0.0;
    for (size_t begin = 0; begin < samples.size(); begin += chunk) {
      const size_t end = std::min(samples.size(), begin + chunk);
      const int64_t b = static_cast<int64_t>(end - begin);
      std::vector<int> flat;
      for (size_t s = begin; s < end; ++s)
        flat.insert(flat.end(), samples[s].begin(), samples[s].end());
      Tape tp(false);
      BoundParams bp = bind_params(tp, base, false);
      std::optional<Var> pre = tp.matmul(tp.constant(one_hot_rows(prefix, 2)), bp.embed);
      Var obs = tp.matmul(tp.constant(one_hot_rows(flat, 2)), bp.embed);
      Forward f = forward_batch(tp, bp, base.config, pre, obs, b, n);
      Var nll = batch_logloss(tp, f, flat, n);
      for (double v : tp.val(nll).a) total += v;
    }
    return total / static_cast<double>(samples.size());
  };
  double best_loss = 0.0, found_loss = 0.0;
  TokenSequence best;
  for (int64_t c = 0; c < 64; ++c) {
    TokenSequence cand(6);
    for (int64_t i = 0; i < 6; ++i) cand[static_cast<size_t>(i)] = static_cast<int>((c >> (5 - i)) & 1);
    const double loss = candidate_loss(cand);
    if (c == 0 || loss < best_loss) {
      best_loss = loss;
      best = cand;
    }
    if (cand == found.tokens) found_loss = loss;
  }

  const PrefixSearchResult exact =
      exhaustive_prefix_search(ExactPredictor::laplace(), target, 6, tc.n_tune);
  const TokenSequence oracle = {0, 0, 0, 0, 0, 1};

  auto tok_str = [](const TokenSequence& t) {
    std::string s;
    for (int v : t) s += static_cast<char>('0' + v);
    return s;
  };
  Outcome out;
  out.pass = found_loss == best_loss && found.tokens == exact.prefix && exact.prefix == oracle;
  out.detail = "net search " + tok_str(found.tokens) + " (loss " + fmt(found_loss) +
               ", re-scan min " + tok_str(best) + " " + fmt(best_loss) + "), exact search " +
               tok_str(exact.prefix);
  return out;
}

// ---- A9: frozen/designated-variable guarantees ----

Outcome a9(const fs::path& work) {
  ParameterSet base = load_pretrained(work, PredictorConfig::Arch::Transformer);
  const TaskDistribution target = TaskDistribution::single_coin(0.2);
  const uint64_t base_before = checkpoint_digest(base.to_named_tensors());

  std::vector<std::string> tensor_names;
  for (auto& [name, m] : base.named_params()) tensor_names.push_back(name);

  Outcome out;
  out.pass = true;
  for (Method m : coinlab::detail::all_methods()) {
    TuneConfig tc = acc_tune(m, coinlab::detail::mix_seed(90, static_cast<uint64_t>(m)), 120);
    tc.hard_samples = 256;
    const TuneResult tr = tune(base, tc, target);
    const TunedArtifact& art = tr.artifact;
    std::string bad;

    if (art.base_digest != base_before) bad = "base digest mismatch";
    ParameterSet effective = apply_artifact(base, art);
    auto bnamed = base.named_params();
    auto enamed = effective.named_params();
    for (size_t i = 0; i < bnamed.size() && bad.empty(); ++i) {
      const bool same = bnamed[i].second->a == enamed[i].second->a;
      const bool designated =
          is_gradient_method(m) && !is_prefix_method(m) && m != Method::LoRAWT &&
          coinlab::detail::weight_designated(m, bnamed[i].first);
      if (designated && same) bad = "designated tensor unchanged: " + bnamed[i].first;
      if (!designated && !same) bad = "frozen tensor changed: " + bnamed[i].first;
    }
    if (bad.empty() && is_prefix_method(m) &&
        (!art.weight_deltas.empty() || art.lora.has_value()))
      bad = "prefix method carries weight changes";
    if (bad.empty() && m == Method::LoRAWT && (!art.lora.has_value() || !art.weight_deltas.empty()))
      bad = "lora artifact malformed";
    if (!bad.empty()) {
      out.pass = false;
      out.detail += std::string(method_name(m)) + ": " + bad + "; ";
    }
  }
  if (checkpoint_digest(base.to_named_tensors()) != base_before) {
    out.pass = false;
    out.detail += "base parameters mutated by tuning; ";
  }
  if (out.pass) out.detail = "all " + std::to_string(coinlab::detail::all_methods().size()) +
                             " methods leave frozen tensors bit-identical";
  return out;
}

// ---- A10: end-to-end determinism across worker-pool sizes ----

Outcome a10(const fs::path& work) {
  auto mini = [&](const std::string& out_dir, int pool) {
    ExperimentSpec spec;
    spec.name = ExperimentName::R2S;
    spec.arch = PredictorConfig::Arch::Transformer;
    spec.seed = 2024;
    spec.out_dir = out_dir;
    spec.override_embed = 32;
    spec.override_width = 32;
    spec.pretrain.steps = 200;
    spec.pretrain.batch = 32;
    spec.pretrain.seq_len = 50;
    spec.pretrain.holdout_size = 32;
    spec.pretrain.holdout_every = 100;
    spec.tune.steps = 60;
    spec.tune.batch = 16;
    spec.tune.n_tune = 25;
    spec.tune.prefix_len = 4;
    spec.tune.hard_samples = 128;
    spec.eval_count = 256;
    spec.n_eval = 100;
    spec.repetitions = 3;
    spec.pool_size = pool;
    return run_experiment(spec);
  };
  const fs::path d1 = work / "a10_pool1", d4 = work / "a10_pool4";
  fs::remove_all(d1);
  fs::remove_all(d4);
  mini(d1.string(), 1);
  mini(d4.string(), 4);

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  const bool summary_same = slurp(d1 / "curves" / "summary.csv") ==
                            slurp(d4 / "curves" / "summary.csv");
  const bool regret_same = slurp(d1 / "curves" / "regret.csv") == slurp(d4 / "curves" / "regret.csv");
  const bool nonempty = !slurp(d1 / "curves" / "summary.csv").empty();
  Outcome out;
  out.pass = summary_same && regret_same && nonempty;
  out.detail = std::string("summary csv ") + (summary_same ? "identical" : "DIFFERS") +
               ", regret csv " + (regret_same ? "identical" : "DIFFERS") +
               " across pool sizes 1 and 4";
  return out;
}

// ---- A8: appendix theory suite ----

Outcome a8(const fs::path&) {
  const auto t0 = std::chrono::steady_clock::now();
  RandomStream rng(888);
  Outcome out;
  out.pass = true;

  // Posterior variance bound 1/(4n).
  double worst_margin = 1.0;
  for (int s = 0; s < 100; ++s) {
    const double bias = rng.uniform();
    TokenSequence seq;
    for (int t = 0; t < 1000; ++t) seq.push_back(rng.bernoulli(bias) ? 1 : 0);
    const auto trace = posterior_collapse_trace(BetaPosterior{1.0, 1.0}, seq);
    for (int64_t n = 1; n <= 1000; ++n) {
      const double bound = 1.0 / (4.0 * static_cast<double>(n));
      worst_margin = std::min(worst_margin, bound - trace[static_cast<size_t>(n)]);
      if (trace[static_cast<size_t>(n)] > bound) out.pass = false;
    }
  }
  if (worst_margin < 0.0) out.detail += "variance bound violated; ";

  // Uniform prior posteriors unimodal on random contexts.
  const std::vector<double> uniform(1001, 1.0);
  int multimodal = 0;
  for (int c = 0; c < 1000; ++c) {
    const int n = static_cast<int>(rng.uniform() * 200.0);
    const double bias = rng.uniform();
    TokenSequence seq;
    for (int t = 0; t < n; ++t) seq.push_back(rng.bernoulli(bias) ? 1 : 0);
    if (!unimodality_check(uniform, seq).unimodal) ++multimodal;
  }
  if (multimodal > 0) {
    out.pass = false;
    out.detail += std::to_string(multimodal) + " uniform-prior contexts multimodal; ";
  }

  // Gap prior turns bimodal at k = n/2.
  std::vector<double> gap(1001, 0.0);
  for (size_t i = 0; i < gap.size(); ++i) {
    const double theta = static_cast<double>(i) / 1000.0;
    if (theta <= 1.0 / 3.0 || theta >= 2.0 / 3.0) gap[i] = 1.5;
  }
  TokenSequence half;
  for (int t = 0; t < 20; ++t) half.push_back(t < 10 ? 1 : 0);
  if (unimodality_check(gap, half).unimodal) {
    out.pass = false;
    out.detail += "gap prior posterior not bimodal; ";
  }

  // Two-atom entropy rises then falls with the maximum near 6.6.
  TwoAtomPrior prior;
  const auto trace = entropy_trace(prior, 80);
  int64_t argmax = 0;
  for (size_t i = 0; i < trace.size(); ++i)
    if (trace[i] > trace[static_cast<size_t>(argmax)]) argmax = static_cast<int64_t>(i);
  const double lstar = std::log2(99.0);
  const bool rises = trace[static_cast<size_t>(argmax)] > trace[0];
  const bool falls = trace.back() < trace[static_cast<size_t>(argmax)];
  if (!(rises && falls && std::abs(static_cast<double>(argmax) - lstar) <= 1.0)) {
    out.pass = false;
    out.detail += "entropy trace shape wrong (argmax " + std::to_string(argmax) + "); ";
  }

  const double elapsed = seconds_since(t0);
  if (elapsed >= 60.0) out.pass = false;
  out.detail += "variance margin " + fmt(worst_margin) + ", entropy argmax " +
                std::to_string(argmax) + " (l* " + fmt(lstar) + "), " + fmt(elapsed) + "s";
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  std::string criteria_arg, work_arg = "acceptance_work";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--criteria" && i + 1 < argc)
      criteria_arg = argv[++i];
    else if (a == "--work" && i + 1 < argc)
      work_arg = argv[++i];
    else {
      std::fprintf(stderr, "usage: acceptance --criteria A1,A2,... [--work DIR]\n");
      return 2;
    }
  }
  const std::map<std::string, Outcome (*)(const fs::path&)> criteria = {
      {"A1", a1}, {"A2", a2}, {"A3", a3}, {"A4", a4}, {"A5", a5},
      {"A6", a6}, {"A7", a7}, {"A8", a8}, {"A9", a9}, {"A10", a10}};

  std::vector<std::string> wanted;
  if (criteria_arg.empty()) {
    for (const auto& [name, fn] : criteria) wanted.push_back(name);
  } else {
    std::string cur;
    for (char c : criteria_arg + ",") {
      if (c == ',') {
        if (!cur.empty()) wanted.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
  }

  const fs::path work(work_arg);
  fs::create_directories(work);
  bool all_pass = true;
  for (const auto& name : wanted) {
    auto it = criteria.find(name);
    if (it == criteria.end()) {
      std::printf("%s FAIL (unknown criterion)\n", name.c_str());
      all_pass = false;
      continue;
    }
    Outcome out;
    try {
      out = it->second(work);
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("exception: ") + e.what();
    }
    std::printf("%s %s (%s)\n", name.c_str(), out.pass ? "PASS" : "FAIL", out.detail.c_str());
    std::fflush(stdout);
    if (!out.pass) all_pass = false;
  }
  return all_pass ? 0 : 1;
}
