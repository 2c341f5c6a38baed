#pragma once

// Task distributions over Bernoulli coins and sequence sampling. Token 1 is
// heads and occurs with probability bias. Eval-set sampling forks one random
// stream per sequence index so batching order cannot change the data.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "coinlab/errors.hpp"
#include "coinlab/random.hpp"

namespace coinlab {

struct TaskParam {
  double bias = 0.5;
};

using TokenSequence = std::vector<int>;

struct TaskDistribution {
  enum class Kind { RandomCoins, SingleCoin, TwoCoinMixture };
  Kind kind = Kind::SingleCoin;
  double alpha = 1.0;
  double beta = 1.0;
  double bias = 0.5;
  std::vector<double> biases;
  std::vector<double> weights;

  static TaskDistribution random_coins(double alpha, double beta) {
    if (alpha <= 0.0 || beta <= 0.0) throw InvalidConfig("random_coins: nonpositive shape");
    TaskDistribution d;
    d.kind = Kind::RandomCoins;
    d.alpha = alpha;
    d.beta = beta;
    return d;
  }

  static TaskDistribution single_coin(double bias) {
    if (bias < 0.0 || bias > 1.0) throw InvalidConfig("single_coin: bias outside [0,1]");
    TaskDistribution d;
    d.kind = Kind::SingleCoin;
    d.bias = bias;
    return d;
  }

  static TaskDistribution two_coin_mixture(std::vector<double> biases,
                                           std::vector<double> weights) {
    if (biases.empty() || biases.size() != weights.size())
      throw InvalidConfig("two_coin_mixture: biases/weights length mismatch");
    double sum = 0.0;
    for (double w : weights) {
      if (w < 0.0) throw InvalidConfig("two_coin_mixture: negative weight");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-12) throw InvalidConfig("two_coin_mixture: weights sum != 1");
    for (double b : biases)
      if (b < 0.0 || b > 1.0) throw InvalidConfig("two_coin_mixture: bias outside [0,1]");
    TaskDistribution d;
    d.kind = Kind::TwoCoinMixture;
    d.biases = std::move(biases);
    d.weights = std::move(weights);
    return d;
  }
};

inline TaskParam sample_task(const TaskDistribution& dist, RandomStream& rng) {
  switch (dist.kind) {
    case TaskDistribution::Kind::RandomCoins:
      return TaskParam{rng.beta(dist.alpha, dist.beta)};
    case TaskDistribution::Kind::SingleCoin:
      return TaskParam{dist.bias};
    case TaskDistribution::Kind::TwoCoinMixture:
      return TaskParam{dist.biases[rng.categorical(dist.weights)]};
  }
  throw InvalidConfig("sample_task: bad kind");
}

inline TokenSequence sample_sequence(TaskParam tau, int64_t n, RandomStream& rng) {
  TokenSequence seq(static_cast<size_t>(n));
  for (auto& t : seq) t = rng.bernoulli(tau.bias) ? 1 : 0;
  return seq;
}

inline std::vector<double> ground_truth_logprob(TaskParam tau, const TokenSequence& seq) {
  std::vector<double> out(seq.size());
  for (size_t i = 0; i < seq.size(); ++i) {
    const double p = seq[i] == 1 ? tau.bias : 1.0 - tau.bias;
    if (p <= 0.0)
      throw InfiniteLogProb("token " + std::to_string(seq[i]) + " impossible under bias " +
                            std::to_string(tau.bias));
    out[i] = std::log(p);
  }
  return out;
}

struct EvalSequence {
  TokenSequence tokens;
  TaskParam tau;
};

inline std::vector<EvalSequence> sample_eval_set(const TaskDistribution& dist, int64_t count,
                                                 int64_t n, uint64_t seed) {
  const RandomStream root(seed);
  std::vector<EvalSequence> out(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    RandomStream rs = root.fork(static_cast<uint64_t>(i));
    const TaskParam tau = sample_task(dist, rs);
    out[i] = EvalSequence{sample_sequence(tau, n, rs), tau};
  }
  return out;
}

}  // namespace coinlab
