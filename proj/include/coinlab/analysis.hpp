#pragma once

// Internal-state PCA and the appendix theory checks: posterior variance
// collapse, gridded-posterior unimodality, and the two-atom entropy trace
// for the atypical all-zeros prompt.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "coinlab/bayes.hpp"
#include "coinlab/csv.hpp"
#include "coinlab/data.hpp"
#include "coinlab/errors.hpp"
#include "coinlab/mat.hpp"

namespace coinlab {

struct PCAProjection {
  Mat components;  // 2 x dim, orthonormal rows
  Mat projected;   // n x 2
  double explained[2] = {0.0, 0.0};
};

namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Columns of vecs
// are eigenvectors of the input.
inline void jacobi_eigen(Mat a, Mat& vecs, std::vector<double>& vals) {
  const int64_t d = a.rows;
  vecs = Mat(d, d);
  for (int64_t i = 0; i < d; ++i) vecs.at(i, i) = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int64_t p = 0; p < d; ++p)
      for (int64_t q = p + 1; q < d; ++q) off += a.at(p, q) * a.at(p, q);
    if (off < 1e-30) break;
    for (int64_t p = 0; p < d; ++p) {
      for (int64_t q = p + 1; q < d; ++q) {
        const double apq = a.at(p, q);
        if (apq == 0.0) continue;
        const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int64_t k = 0; k < d; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (int64_t k = 0; k < d; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
        for (int64_t k = 0; k < d; ++k) {
          const double vkp = vecs.at(k, p), vkq = vecs.at(k, q);
          vecs.at(k, p) = c * vkp - s * vkq;
          vecs.at(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  vals.resize(static_cast<size_t>(d));
  for (int64_t i = 0; i < d; ++i) vals[static_cast<size_t>(i)] = a.at(i, i);
}

}  // namespace detail

inline PCAProjection pca_2d(const Mat& states) {
  if (states.rows < 3) throw InvalidConfig("pca needs at least 3 rows");
  const int64_t n = states.rows, d = states.cols;
  Mat centered = states;
  for (int64_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int64_t i = 0; i < n; ++i) mean += states.at(i, j);
    mean /= static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) centered.at(i, j) -= mean;
  }
  Mat cov(d, d);
  matmul_tn_acc(cov, centered, centered);
  for (double& v : cov.a) v /= static_cast<double>(n - 1);

  double total = 0.0;
  for (int64_t i = 0; i < d; ++i) total += cov.at(i, i);
  if (!(total > 0.0)) throw DegenerateStates("states carry no variance");

  Mat vecs;
  std::vector<double> vals;
  detail::jacobi_eigen(cov, vecs, vals);
  std::vector<int64_t> order(static_cast<size_t>(d));
  for (int64_t i = 0; i < d; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (vals[static_cast<size_t>(a)] != vals[static_cast<size_t>(b)])
      return vals[static_cast<size_t>(a)] > vals[static_cast<size_t>(b)];
    return a < b;
  });
  const double l1 = vals[static_cast<size_t>(order[0])];
  const double l2 = d > 1 ? vals[static_cast<size_t>(order[1])] : 0.0;
  if (d < 2 || l2 <= 1e-12 * l1) throw DegenerateStates("state cloud has rank below 2");

  PCAProjection out;
  out.components = Mat(2, d);
  for (int c = 0; c < 2; ++c) {
    int64_t arg = 0;
    double best = -1.0;
    for (int64_t j = 0; j < d; ++j) {
      const double v = std::abs(vecs.at(j, order[c]));
      if (v > best) {
        best = v;
        arg = j;
      }
    }
    const double sign = vecs.at(arg, order[c]) < 0.0 ? -1.0 : 1.0;
    for (int64_t j = 0; j < d; ++j) out.components.at(c, j) = sign * vecs.at(j, order[c]);
  }
  out.projected = Mat(n, 2);
  for (int64_t i = 0; i < n; ++i)
    for (int c = 0; c < 2; ++c)
      out.projected.at(i, c) = dot(std::span<const double>(centered.row(i), size_t(d)),
                                   std::span<const double>(out.components.row(c), size_t(d)));
  out.explained[0] = l1 / total;
  out.explained[1] = l2 / total;
  return out;
}

// Beta posterior variance after each observation; index 0 is the prior.
inline std::vector<double> posterior_collapse_trace(BetaPosterior prior,
                                                    const TokenSequence& seq) {
  std::vector<double> out;
  out.reserve(seq.size() + 1);
  out.push_back(prior.variance());
  for (int token : seq) {
    if (token == 1)
      prior.alpha += 1.0;
    else
      prior.beta += 1.0;
    out.push_back(prior.variance());
  }
  return out;
}

struct GriddedPosterior {
  bool unimodal = false;
  std::vector<double> posterior;  // density on the uniform grid over [0,1]
  double cell_width = 0.0;
};

// Posterior over theta on a uniform grid, prior given as density values on
// the same grid. Unimodality means no strict rise after a strict fall,
// with plateaus tolerated.
inline GriddedPosterior unimodality_check(const std::vector<double>& prior_density,
                                          const TokenSequence& seq) {
  if (prior_density.size() < 1001) throw InvalidConfig("unimodality grid needs >= 1001 points");
  const size_t g = prior_density.size();
  GriddedPosterior out;
  out.cell_width = 1.0 / static_cast<double>(g - 1);
  int64_t k = 0;
  for (int t : seq) k += t;
  const int64_t n = static_cast<int64_t>(seq.size());

  out.posterior.resize(g);
  for (size_t i = 0; i < g; ++i) {
    const double theta = static_cast<double>(i) * out.cell_width;
    out.posterior[i] = std::pow(theta, static_cast<double>(k)) *
                       std::pow(1.0 - theta, static_cast<double>(n - k)) * prior_density[i];
  }
  double z = 0.0;
  for (size_t i = 0; i + 1 < g; ++i) z += 0.5 * (out.posterior[i] + out.posterior[i + 1]);
  z *= out.cell_width;
  if (!(z > 0.0)) throw DegenerateStates("posterior mass vanished on the grid");
  for (double& v : out.posterior) v /= z;

  double peak = 0.0;
  for (double v : out.posterior) peak = std::max(peak, v);
  const double tol = 1e-12 * peak;
  bool fallen = false;
  out.unimodal = true;
  for (size_t i = 0; i + 1 < g; ++i) {
    const double d = out.posterior[i + 1] - out.posterior[i];
    if (d > tol && fallen) {
      out.unimodal = false;
      break;
    }
    if (d < -tol) fallen = true;
  }
  return out;
}

struct TwoAtomPrior {
  double atoms[2] = {0.0, 0.5};
  double eps = 0.01;  // prior weight on atoms[0]

  void validate() const {
    if (!(eps > 0.0 && eps < 1.0)) throw InvalidConfig("two-atom weight must lie in (0,1)");
    if (atoms[0] < 0.0 || atoms[0] > 1.0 || atoms[1] < 0.0 || atoms[1] > 1.0)
      throw InvalidConfig("atoms must lie in [0,1]");
  }
};

// Posterior entropy (nats) after observing 0..steps zeros.
inline std::vector<double> entropy_trace(const TwoAtomPrior& prior, int64_t steps) {
  prior.validate();
  std::vector<double> out;
  out.reserve(static_cast<size_t>(steps) + 1);
  double log_w0 = std::log(prior.eps);
  double log_w1 = std::log(1.0 - prior.eps);
  auto entropy = [&]() {
    const double mx = std::max(log_w0, log_w1);
    const double z = mx + std::log(std::exp(log_w0 - mx) + std::exp(log_w1 - mx));
    const double w0 = std::exp(log_w0 - z), w1 = std::exp(log_w1 - z);
    double h = 0.0;
    if (w0 > 0.0) h -= w0 * std::log(w0);
    if (w1 > 0.0) h -= w1 * std::log(w1);
    return h;
  };
  out.push_back(entropy());
  for (int64_t i = 0; i < steps; ++i) {
    log_w0 += std::log(1.0 - prior.atoms[0]);  // likelihood of token 0
    log_w1 += std::log(1.0 - prior.atoms[1]);
    out.push_back(entropy());
  }
  return out;
}

struct PcaCsvRow {
  int64_t sequence_id = 0;
  int64_t step = 0;
  double pc1 = 0.0;
  double pc2 = 0.0;
  std::string source;  // "target" or "pretrain"
};

inline void write_pca_csv(const std::string& path, const std::vector<PcaCsvRow>& rows) {
  CsvWriter csv(path, {"sequence_id", "step", "pc1", "pc2", "source"});
  for (const auto& r : rows) csv.row(r.sequence_id, r.step, r.pc1, r.pc2, r.source);
}

inline void write_trace_csv(const std::string& path, const std::string& column,
                            const std::vector<double>& trace) {
  CsvWriter csv(path, {"step", column});
  for (size_t i = 0; i < trace.size(); ++i) csv.row(static_cast<int64_t>(i), trace[i]);
}

}  // namespace coinlab
