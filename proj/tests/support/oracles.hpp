#pragma once

// Independent slow oracles the fast implementations are tested against:
// grid quadrature over the Beta posterior, brute-force Bayes rule for finite
// mixtures, and exhaustive sequence enumeration for expected losses.

#include <cmath>
#include <cstdint>
#include <vector>

#include "coinlab/bayes.hpp"
#include "coinlab/data.hpp"

namespace coinlab::testing {

// P(next = 1 | k heads in n flips) under Beta(a0, b0) prior via midpoint
// quadrature on a grid of `points` cells.
inline double quadrature_predictive(double a0, double b0, int64_t k, int64_t n,
                                    int64_t points = 10000) {
  double num = 0.0, den = 0.0;
  for (int64_t i = 0; i < points; ++i) {
    const double theta = (i + 0.5) / points;
    // unnormalized posterior density; the prior normalizer cancels
    const double log_post = (a0 - 1.0 + k) * std::log(theta) +
                            (b0 - 1.0 + (n - k)) * std::log(1.0 - theta);
    const double w = std::exp(log_post);
    num += w * theta;
    den += w;
  }
  return num / den;
}

// P(next = 1 | seq) for a finite mixture of Bernoulli coins by direct Bayes
// rule in plain arithmetic; usable for short sequences only.
inline double brute_force_mixture_predictive(const std::vector<double>& biases,
                                             const std::vector<double>& weights,
                                             const TokenSequence& seq) {
  double num = 0.0, den = 0.0;
  for (size_t j = 0; j < biases.size(); ++j) {
    double lik = weights[j];
    for (int t : seq) lik *= t == 1 ? biases[j] : 1.0 - biases[j];
    den += lik;
    num += lik * biases[j];
  }
  return num / den;
}

// P_target(specific sequence) by direct computation, independent of the
// log-space implementation.
inline double target_sequence_prob(const TaskDistribution& t, const TokenSequence& seq,
                                   int64_t points = 20000) {
  int64_t h = 0;
  for (int tok : seq) h += tok;
  const int64_t n = static_cast<int64_t>(seq.size());
  switch (t.kind) {
    case TaskDistribution::Kind::SingleCoin:
      return std::pow(t.bias, static_cast<double>(h)) *
             std::pow(1.0 - t.bias, static_cast<double>(n - h));
    case TaskDistribution::Kind::TwoCoinMixture: {
      double p = 0.0;
      for (size_t j = 0; j < t.biases.size(); ++j)
        p += t.weights[j] * std::pow(t.biases[j], static_cast<double>(h)) *
             std::pow(1.0 - t.biases[j], static_cast<double>(n - h));
      return p;
    }
    case TaskDistribution::Kind::RandomCoins: {
      // quadrature over theta of theta^h (1-theta)^(n-h) Beta(theta; a, b)
      double num = 0.0, den = 0.0;
      for (int64_t i = 0; i < points; ++i) {
        const double theta = (i + 0.5) / points;
        const double prior = std::pow(theta, t.alpha - 1.0) * std::pow(1.0 - theta, t.beta - 1.0);
        num += prior * std::pow(theta, static_cast<double>(h)) *
               std::pow(1.0 - theta, static_cast<double>(n - h));
        den += prior;
      }
      return num / den;
    }
  }
  return 0.0;
}

// Expected cumulative log loss of predictor p on length-n sequences from
// target, by enumerating all 2^n sequences. Exponential; keep n small.
inline double enumerate_expected_loss(const ExactPredictor& p, const TaskDistribution& target,
                                      int64_t n) {
  double total = 0.0;
  for (uint64_t c = 0; c < (1ull << n); ++c) {
    TokenSequence seq(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) seq[i] = static_cast<int>((c >> i) & 1ull);
    const double prob = target_sequence_prob(target, seq);
    if (prob == 0.0) continue;
    ExactPredictor q = p;
    double loss = 0.0;
    for (double v : q.sequence_logloss(seq)) loss += v;
    total += prob * loss;
  }
  return total;
}

}  // namespace coinlab::testing
