#pragma once

// Adam with bias correction and global-norm gradient clipping.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "coinlab/errors.hpp"
#include "coinlab/mat.hpp"

namespace coinlab {

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step_count = 0;
  std::vector<Mat> first_moment;
  std::vector<Mat> second_moment;

  explicit AdamState(double learning_rate = 1e-3) : lr(learning_rate) {}

  void ensure_moments(std::span<Mat* const> params) {
    if (!first_moment.empty()) return;
    for (const Mat* p : params) {
      first_moment.emplace_back(p->rows, p->cols);
      second_moment.emplace_back(p->rows, p->cols);
    }
  }
};

// Returns the global L2 norm; if it is >= threshold, scales grads in place
// so the norm equals the threshold.
inline double clip_by_global_norm(std::span<Mat* const> grads, double threshold) {
  double sq = 0.0;
  for (const Mat* g : grads)
    for (double v : g->a) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm >= threshold && norm > 0.0) {
    const double s = threshold / norm;
    for (Mat* g : grads)
      for (double& v : g->a) v *= s;
  }
  return norm;
}

inline void adam_step(std::span<Mat* const> params, std::span<Mat* const> grads,
                      AdamState& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: param/grad count mismatch");
  state.ensure_moments(params);
  state.step_count += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
  for (size_t k = 0; k < params.size(); ++k) {
    Mat& p = *params[k];
    const Mat& g = *grads[k];
    Mat& m = state.first_moment[k];
    Mat& v = state.second_moment[k];
    require_same_shape(p, g, "adam_step");
    for (int64_t i = 0; i < p.size(); ++i) {
      m.a[i] = b1 * m.a[i] + (1.0 - b1) * g.a[i];
      v.a[i] = b2 * v.a[i] + (1.0 - b2) * g.a[i] * g.a[i];
      const double mhat = m.a[i] / bc1;
      const double vhat = v.a[i] / bc2;
      p.a[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace coinlab
