#pragma once

// Closed-form Bayesian predictors for the three task distributions, prefix
// conditioning, and exhaustive hard-prefix search with exact expected loss.
// Mixture weights live in log space; predictors are immutable values.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "coinlab/data.hpp"
#include "coinlab/errors.hpp"

namespace coinlab {

struct BetaPosterior {
  double alpha = 1.0;
  double beta = 1.0;

  double mean() const { return alpha / (alpha + beta); }
  double variance() const {
    const double s = alpha + beta;
    return alpha * beta / (s * s * (s + 1.0));
  }
};

struct MixturePosterior {
  std::vector<double> biases;
  std::vector<double> log_weights;  // normalized so logsumexp = 0
};

inline double logsumexp(const std::vector<double>& xs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : xs) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

class ExactPredictor {
 public:
  enum class Kind { LaplaceStyle, Constant, FiniteMixture };

  static ExactPredictor laplace(double alpha = 1.0, double beta = 1.0) {
    ExactPredictor p;
    p.kind_ = Kind::LaplaceStyle;
    p.beta_ = BetaPosterior{alpha, beta};
    return p;
  }

  static ExactPredictor constant(double bias) {
    ExactPredictor p;
    p.kind_ = Kind::Constant;
    p.bias_ = bias;
    return p;
  }

  static ExactPredictor finite_mixture(std::vector<double> biases,
                                       std::vector<double> weights) {
    if (biases.empty() || biases.size() != weights.size())
      throw InvalidConfig("finite_mixture: biases/weights length mismatch");
    ExactPredictor p;
    p.kind_ = Kind::FiniteMixture;
    p.mix_.biases = std::move(biases);
    p.mix_.log_weights.resize(p.mix_.biases.size());
    for (size_t i = 0; i < weights.size(); ++i)
      p.mix_.log_weights[i] =
          weights[i] > 0.0 ? std::log(weights[i]) : -std::numeric_limits<double>::infinity();
    p.renormalize();
    return p;
  }

  Kind kind() const { return kind_; }
  const BetaPosterior& beta_posterior() const { return beta_; }
  const MixturePosterior& mixture_posterior() const { return mix_; }

  double predict_next() const {
    switch (kind_) {
      case Kind::LaplaceStyle:
        return beta_.mean();
      case Kind::Constant:
        return bias_;
      case Kind::FiniteMixture: {
        double p = 0.0;
        for (size_t i = 0; i < mix_.biases.size(); ++i)
          p += std::exp(mix_.log_weights[i]) * mix_.biases[i];
        return p;
      }
    }
    return 0.5;
  }

  ExactPredictor update(int token) const {
    ExactPredictor p = *this;
    switch (kind_) {
      case Kind::LaplaceStyle:
        if (token == 1)
          p.beta_.alpha += 1.0;
        else
          p.beta_.beta += 1.0;
        break;
      case Kind::Constant:
        break;
      case Kind::FiniteMixture: {
        for (size_t i = 0; i < p.mix_.biases.size(); ++i) {
          const double b = p.mix_.biases[i];
          const double lik = token == 1 ? b : 1.0 - b;
          p.mix_.log_weights[i] +=
              lik > 0.0 ? std::log(lik) : -std::numeric_limits<double>::infinity();
        }
        p.renormalize();
        break;
      }
    }
    return p;
  }

  // Folds update over seq, leaving *this at the final state; element i is
  // -log P(x_i | x_{<i}).
  std::vector<double> sequence_logloss(const TokenSequence& seq) {
    std::vector<double> out(seq.size());
    for (size_t i = 0; i < seq.size(); ++i) {
      const double p1 = predict_next();
      const double p = seq[i] == 1 ? p1 : 1.0 - p1;
      if (p <= 0.0)
        throw InfiniteLogProb("predictor assigns zero probability to token " +
                              std::to_string(seq[i]));
      out[i] = -std::log(p);
      *this = update(seq[i]);
    }
    return out;
  }

  ExactPredictor condition_on_prefix(const TokenSequence& prefix) const {
    ExactPredictor p = *this;
    for (int t : prefix) p = p.update(t);
    return p;
  }

 private:
  void renormalize() {
    const double lse = logsumexp(mix_.log_weights);
    if (!std::isfinite(lse))
      throw InfiniteLogProb("mixture posterior has no surviving component");
    for (double& lw : mix_.log_weights) lw -= lse;
  }

  Kind kind_ = Kind::Constant;
  BetaPosterior beta_{1.0, 1.0};
  double bias_ = 0.5;
  MixturePosterior mix_;
};

// Exact Bayesian predictor for sequences drawn from dist.
inline ExactPredictor bayes_for(const TaskDistribution& dist) {
  switch (dist.kind) {
    case TaskDistribution::Kind::RandomCoins:
      return ExactPredictor::laplace(dist.alpha, dist.beta);
    case TaskDistribution::Kind::SingleCoin:
      return ExactPredictor::constant(dist.bias);
    case TaskDistribution::Kind::TwoCoinMixture:
      return ExactPredictor::finite_mixture(dist.biases, dist.weights);
  }
  throw InvalidConfig("bayes_for: bad kind");
}

namespace detail {

inline double log_beta_fn(double a, double b) {
  return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

// log P_target(specific pattern with h heads among k flips) for exchangeable
// targets; -inf when impossible.
inline double log_pattern_prob(const TaskDistribution& t, int64_t h, int64_t k) {
  auto mix_term = [&](const std::vector<double>& biases, const std::vector<double>& weights) {
    std::vector<double> terms;
    terms.reserve(biases.size());
    for (size_t j = 0; j < biases.size(); ++j) {
      if (weights[j] <= 0.0) continue;
      const double b = biases[j];
      double lt = std::log(weights[j]);
      if (h > 0) {
        if (b <= 0.0) continue;
        lt += h * std::log(b);
      }
      if (k - h > 0) {
        if (b >= 1.0) continue;
        lt += (k - h) * std::log(1.0 - b);
      }
      terms.push_back(lt);
    }
    return terms.empty() ? -std::numeric_limits<double>::infinity() : logsumexp(terms);
  };
  switch (t.kind) {
    case TaskDistribution::Kind::RandomCoins:
      return log_beta_fn(t.alpha + h, t.beta + (k - h)) - log_beta_fn(t.alpha, t.beta);
    case TaskDistribution::Kind::SingleCoin:
      return mix_term({t.bias}, {1.0});
    case TaskDistribution::Kind::TwoCoinMixture:
      return mix_term(t.biases, t.weights);
  }
  throw InvalidConfig("log_pattern_prob: bad kind");
}

inline double log_binomial(int64_t k, int64_t h) {
  return std::lgamma(static_cast<double>(k) + 1.0) - std::lgamma(static_cast<double>(h) + 1.0) -
         std::lgamma(static_cast<double>(k - h) + 1.0);
}

}  // namespace detail

// Exact expected cumulative log loss of predictor p on length-n_tune
// sequences from target, by dynamic programming over head counts. Relies on
// exchangeability of both the predictor and the target.
inline double exact_expected_loss(const ExactPredictor& p, const TaskDistribution& target,
                                  int64_t n_tune) {
  double total = 0.0;
  // Predictive probability given h heads in k observations, reached by
  // count-based updates from p.
  std::vector<ExactPredictor> prev_row{p};
  for (int64_t k = 0; k < n_tune; ++k) {
    for (int64_t h = 0; h <= k; ++h) {
      const double q = prev_row[h].predict_next();
      const double lcomb = detail::log_binomial(k, h);
      const double la = detail::log_pattern_prob(target, h + 1, k + 1);
      const double lb = detail::log_pattern_prob(target, h, k + 1);
      if (std::isfinite(la)) {
        if (q <= 0.0) throw InfiniteLogProb("expected loss diverges: token 1 has probability 0");
        total += std::exp(lcomb + la) * -std::log(q);
      }
      if (std::isfinite(lb)) {
        if (q >= 1.0) throw InfiniteLogProb("expected loss diverges: token 0 has probability 0");
        total += std::exp(lcomb + lb) * -std::log(1.0 - q);
      }
    }
    // Row k+1: state after h heads of k+1 observations.
    std::vector<ExactPredictor> next_row;
    next_row.reserve(static_cast<size_t>(k) + 2);
    next_row.push_back(prev_row[0].update(0));
    for (int64_t h = 0; h <= k; ++h) next_row.push_back(prev_row[h].update(1));
    prev_row = std::move(next_row);
  }
  return total;
}

struct PrefixSearchResult {
  TokenSequence prefix;
  double expected_loss = 0.0;
};

// Argmin over all |A|^L hard prefixes of exact_expected_loss of the
// conditioned predictor; ties break to the lexicographically smallest
// prefix. Enumerates every candidate; the per-candidate loss is memoized by
// prefix head count since the predictors are exchangeable.
inline PrefixSearchResult exhaustive_prefix_search(const ExactPredictor& p,
                                                   const TaskDistribution& target, int64_t L,
                                                   int64_t n_tune) {
  if (L < 0 || L > 20)
    throw SearchSpaceTooLarge("prefix length " + std::to_string(L) + " exceeds limit 20");
  const uint64_t count = 1ull << L;
  std::vector<double> loss_by_heads(static_cast<size_t>(L) + 1,
                                    std::numeric_limits<double>::quiet_NaN());
  PrefixSearchResult best;
  bool have_best = false;
  for (uint64_t c = 0; c < count; ++c) {
    TokenSequence prefix(static_cast<size_t>(L));
    int64_t heads = 0;
    for (int64_t i = 0; i < L; ++i) {
      prefix[i] = static_cast<int>((c >> (L - 1 - i)) & 1ull);
      heads += prefix[i];
    }
    double loss = loss_by_heads[heads];
    if (std::isnan(loss)) {
      loss = exact_expected_loss(p.condition_on_prefix(prefix), target, n_tune);
      loss_by_heads[heads] = loss;
    }
    if (!have_best || loss < best.expected_loss ||
        (loss == best.expected_loss && prefix < best.prefix)) {
      best = PrefixSearchResult{std::move(prefix), loss};
      have_best = true;
    }
  }
  return best;
}

}  // namespace coinlab
