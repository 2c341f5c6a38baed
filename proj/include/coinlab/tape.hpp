#pragma once

// Tape-based reverse-mode autodiff over Mat. A Var indexes a node on the
// tape; ops append nodes and record backward closures over node indices.
// Tapes are rebuilt every forward pass and are single-threaded; a tape
// constructed with grad_enabled=false records values only.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "coinlab/errors.hpp"
#include "coinlab/mat.hpp"

namespace coinlab {

struct Var {
  int32_t idx = -1;
  bool valid() const { return idx >= 0; }
};

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  size_t size() const { return nodes_.size(); }

  const Mat& val(Var v) const { return nodes_[v.idx].val; }
  Mat& grad(Var v) { return nodes_[v.idx].grad; }
  bool requires_grad(Var v) const { return nodes_[v.idx].rg; }

  Var leaf(Mat m, bool requires_grad) {
    return push(std::move(m), grad_enabled_ && requires_grad, nullptr);
  }
  Var constant(Mat m) { return leaf(std::move(m), false); }
  Var zeros(int64_t r, int64_t c) { return constant(Mat(r, c)); }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    require_same_shape(val(a), val(b), "add");
    Mat out = val(a);
    const Mat& bv = val(b);
    for (int64_t i = 0; i < out.size(); ++i) out.a[i] += bv.a[i];
    return binary(std::move(out), a, b, [](Tape& tp, int32_t o, int32_t ia, int32_t ib) {
      const Mat& g = tp.nodes_[o].grad;
      if (tp.nodes_[ia].rg) {
        Mat& da = tp.nodes_[ia].grad;
        for (int64_t i = 0; i < g.size(); ++i) da.a[i] += g.a[i];
      }
      if (tp.nodes_[ib].rg) {
        Mat& db = tp.nodes_[ib].grad;
        for (int64_t i = 0; i < g.size(); ++i) db.a[i] += g.a[i];
      }
    });
  }

  Var sub(Var a, Var b) {
    require_same_shape(val(a), val(b), "sub");
    Mat out = val(a);
    const Mat& bv = val(b);
    for (int64_t i = 0; i < out.size(); ++i) out.a[i] -= bv.a[i];
    return binary(std::move(out), a, b, [](Tape& tp, int32_t o, int32_t ia, int32_t ib) {
      const Mat& g = tp.nodes_[o].grad;
      if (tp.nodes_[ia].rg) {
        Mat& da = tp.nodes_[ia].grad;
        for (int64_t i = 0; i < g.size(); ++i) da.a[i] += g.a[i];
      }
      if (tp.nodes_[ib].rg) {
        Mat& db = tp.nodes_[ib].grad;
        for (int64_t i = 0; i < g.size(); ++i) db.a[i] -= g.a[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    require_same_shape(val(a), val(b), "mul");
    Mat out = val(a);
    const Mat& bv = val(b);
    for (int64_t i = 0; i < out.size(); ++i) out.a[i] *= bv.a[i];
    return binary(std::move(out), a, b, [](Tape& tp, int32_t o, int32_t ia, int32_t ib) {
      const Mat& g = tp.nodes_[o].grad;
      if (tp.nodes_[ia].rg) {
        Mat& da = tp.nodes_[ia].grad;
        const Mat& bv = tp.nodes_[ib].val;
        for (int64_t i = 0; i < g.size(); ++i) da.a[i] += g.a[i] * bv.a[i];
      }
      if (tp.nodes_[ib].rg) {
        Mat& db = tp.nodes_[ib].grad;
        const Mat& av = tp.nodes_[ia].val;
        for (int64_t i = 0; i < g.size(); ++i) db.a[i] += g.a[i] * av.a[i];
      }
    });
  }

  Var scale(Var a, double s) {
    Mat out = val(a);
    for (double& v : out.a) v *= s;
    return unary(std::move(out), a, [s](Tape& tp, int32_t o, int32_t ia) {
      const Mat& g = tp.nodes_[o].grad;
      Mat& da = tp.nodes_[ia].grad;
      for (int64_t i = 0; i < g.size(); ++i) da.a[i] += s * g.a[i];
    });
  }

  Var sigmoid(Var a) {
    Mat out = val(a);
    for (double& v : out.a) v = 1.0 / (1.0 + std::exp(-v));
    return unary(std::move(out), a, [](Tape& tp, int32_t o, int32_t ia) {
      const Mat& g = tp.nodes_[o].grad;
      const Mat& y = tp.nodes_[o].val;
      Mat& da = tp.nodes_[ia].grad;
      for (int64_t i = 0; i < g.size(); ++i) da.a[i] += g.a[i] * y.a[i] * (1.0 - y.a[i]);
    });
  }

  Var tanh(Var a) {
    Mat out = val(a);
    for (double& v : out.a) v = std::tanh(v);
    return unary(std::move(out), a, [](Tape& tp, int32_t o, int32_t ia) {
      const Mat& g = tp.nodes_[o].grad;
      const Mat& y = tp.nodes_[o].val;
      Mat& da = tp.nodes_[ia].grad;
      for (int64_t i = 0; i < g.size(); ++i) da.a[i] += g.a[i] * (1.0 - y.a[i] * y.a[i]);
    });
  }

  Var relu(Var a) {
    Mat out = val(a);
    for (double& v : out.a) v = v > 0.0 ? v : 0.0;
    return unary(std::move(out), a, [](Tape& tp, int32_t o, int32_t ia) {
      const Mat& g = tp.nodes_[o].grad;
      const Mat& x = tp.nodes_[ia].val;
      Mat& da = tp.nodes_[ia].grad;
      for (int64_t i = 0; i < g.size(); ++i)
        if (x.a[i] > 0.0) da.a[i] += g.a[i];
    });
  }

  // ---- row-wise ----

  Var softmax(Var a) {
    Mat out = val(a);
    for (int64_t i = 0; i < out.rows; ++i) softmax_row(out.row(i), out.cols);
    return unary(std::move(out), a, [](Tape& tp, int32_t o, int32_t ia) {
      const Mat& g = tp.nodes_[o].grad;
      const Mat& y = tp.nodes_[o].val;
      Mat& da = tp.nodes_[ia].grad;
      for (int64_t i = 0; i < y.rows; ++i) {
        const double* yr = y.row(i);
        const double* gr = g.row(i);
        double* dr = da.row(i);
        double s = 0.0;
        for (int64_t j = 0; j < y.cols; ++j) s += yr[j] * gr[j];
        for (int64_t j = 0; j < y.cols; ++j) dr[j] += yr[j] * (gr[j] - s);
      }
    });
  }

  Var log_softmax(Var a) {
    Mat out = val(a);
    for (int64_t i = 0; i < out.rows; ++i) {
      double* r = out.row(i);
      double mx = r[0];
      for (int64_t j = 1; j < out.cols; ++j) mx = std::max(mx, r[j]);
      double s = 0.0;
      for (int64_t j = 0; j < out.cols; ++j) s += std::exp(r[j] - mx);
      const double lse = mx + std::log(s);
      for (int64_t j = 0; j < out.cols; ++j) r[j] -= lse;
    }
    return unary(std::move(out), a, [](Tape& tp, int32_t o, int32_t ia) {
      const Mat& g = tp.nodes_[o].grad;
      const Mat& y = tp.nodes_[o].val;
      Mat& da = tp.nodes_[ia].grad;
      for (int64_t i = 0; i < y.rows; ++i) {
        const double* yr = y.row(i);
        const double* gr = g.row(i);
        double* dr = da.row(i);
        double s = 0.0;
        for (int64_t j = 0; j < y.cols; ++j) s += gr[j];
        for (int64_t j = 0; j < y.cols; ++j) dr[j] += gr[j] - std::exp(yr[j]) * s;
      }
    });
  }

  // Softmax over blocks of block_rows rows; row t within a block attends to
  // columns 0..t only, masked columns output exactly 0.
  Var causal_softmax(Var a, int64_t block_rows) {
    const Mat& x = val(a);
    if (x.cols != block_rows || x.rows % block_rows != 0)
      throw ShapeError("causal_softmax: " + shape_str(x) + " with block " +
                       std::to_string(block_rows));
    Mat out = x;
    for (int64_t i = 0; i < out.rows; ++i) {
      const int64_t t = i % block_rows;
      double* r = out.row(i);
      softmax_row(r, t + 1);
      for (int64_t j = t + 1; j < out.cols; ++j) r[j] = 0.0;
    }
    return unary(std::move(out), a, [](Tape& tp, int32_t o, int32_t ia) {
      const Mat& g = tp.nodes_[o].grad;
      const Mat& y = tp.nodes_[o].val;
      Mat& da = tp.nodes_[ia].grad;
      for (int64_t i = 0; i < y.rows; ++i) {
        const double* yr = y.row(i);
        const double* gr = g.row(i);
        double* dr = da.row(i);
        double s = 0.0;
        for (int64_t j = 0; j < y.cols; ++j) s += yr[j] * gr[j];
        for (int64_t j = 0; j < y.cols; ++j) dr[j] += yr[j] * (gr[j] - s);
      }
    });
  }

  static constexpr double kLayerNormEps = 1e-6;

  // Per-row normalization with learnable gain and offset (each 1 x n).
  Var layer_norm(Var a, Var gain, Var offset) {
    const Mat& x = val(a);
    const Mat& gv = val(gain);
    const Mat& ov = val(offset);
    if (gv.rows != 1 || gv.cols != x.cols || ov.rows != 1 || ov.cols != x.cols)
      throw ShapeError("layer_norm: params " + shape_str(gv) + "," + shape_str(ov) +
                       " vs input " + shape_str(x));
    Mat out(x.rows, x.cols);
    Mat xhat(x.rows, x.cols);
    std::vector<double> inv(x.rows);
    const int64_t n = x.cols;
    for (int64_t i = 0; i < x.rows; ++i) {
      const double* xr = x.row(i);
      double mu = 0.0;
      for (int64_t j = 0; j < n; ++j) mu += xr[j];
      mu /= n;
      double var = 0.0;
      for (int64_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= n;
      const double iv = 1.0 / std::sqrt(var + kLayerNormEps);
      inv[i] = iv;
      double* hr = xhat.row(i);
      double* yr = out.row(i);
      for (int64_t j = 0; j < n; ++j) {
        hr[j] = (xr[j] - mu) * iv;
        yr[j] = gv.a[j] * hr[j] + ov.a[j];
      }
    }
    bool rg = grad_enabled_ && (requires_grad(a) || requires_grad(gain) || requires_grad(offset));
    if (!rg) return push(std::move(out), false, nullptr);
    const int32_t ia = a.idx, ig = gain.idx, io = offset.idx;
    auto xh = std::make_shared<Mat>(std::move(xhat));
    auto ivs = std::make_shared<std::vector<double>>(std::move(inv));
    return push(std::move(out), true, [ia, ig, io, xh, ivs](Tape& tp, int32_t o) {
      const Mat& g = tp.nodes_[o].grad;
      const Mat& gv = tp.nodes_[ig].val;
      const int64_t n = g.cols;
      if (tp.nodes_[ig].rg) {
        Mat& dg = tp.nodes_[ig].grad;
        for (int64_t i = 0; i < g.rows; ++i) {
          const double* gr = g.row(i);
          const double* hr = xh->row(i);
          for (int64_t j = 0; j < n; ++j) dg.a[j] += gr[j] * hr[j];
        }
      }
      if (tp.nodes_[io].rg) {
        Mat& dof = tp.nodes_[io].grad;
        for (int64_t i = 0; i < g.rows; ++i) {
          const double* gr = g.row(i);
          for (int64_t j = 0; j < n; ++j) dof.a[j] += gr[j];
        }
      }
      if (tp.nodes_[ia].rg) {
        Mat& da = tp.nodes_[ia].grad;
        for (int64_t i = 0; i < g.rows; ++i) {
          const double* gr = g.row(i);
          const double* hr = xh->row(i);
          double* dr = da.row(i);
          double m1 = 0.0, m2 = 0.0;
          for (int64_t j = 0; j < n; ++j) {
            const double dh = gr[j] * gv.a[j];
            m1 += dh;
            m2 += dh * hr[j];
          }
          m1 /= n;
          m2 /= n;
          const double iv = (*ivs)[i];
          for (int64_t j = 0; j < n; ++j)
            dr[j] += iv * (gr[j] * gv.a[j] - m1 - hr[j] * m2);
        }
      }
    });
  }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) {
    Mat out;
    matmul_nn(out, val(a), val(b));
    return binary(std::move(out), a, b, [](Tape& tp, int32_t o, int32_t ia, int32_t ib) {
      const Mat& g = tp.nodes_[o].grad;
      if (tp.nodes_[ia].rg) matmul_nt_acc(tp.nodes_[ia].grad, g, tp.nodes_[ib].val);
      if (tp.nodes_[ib].rg) matmul_tn_acc(tp.nodes_[ib].grad, tp.nodes_[ia].val, g);
    });
  }

  Var transpose(Var a) {
    const Mat& x = val(a);
    Mat out(x.cols, x.rows);
    for (int64_t i = 0; i < x.rows; ++i)
      for (int64_t j = 0; j < x.cols; ++j) out.at(j, i) = x.at(i, j);
    return unary(std::move(out), a, [](Tape& tp, int32_t o, int32_t ia) {
      const Mat& g = tp.nodes_[o].grad;
      Mat& da = tp.nodes_[ia].grad;
      for (int64_t i = 0; i < g.rows; ++i)
        for (int64_t j = 0; j < g.cols; ++j) da.at(j, i) += g.at(i, j);
    });
  }

  // Adds row vector b (1 x n) to every row of a (m x n).
  Var broadcast_add(Var a, Var b) {
    const Mat& x = val(a);
    const Mat& bv = val(b);
    if (bv.rows != 1 || bv.cols != x.cols)
      throw ShapeError("broadcast_add: " + shape_str(x) + " vs " + shape_str(bv));
    Mat out = x;
    for (int64_t i = 0; i < out.rows; ++i) {
      double* r = out.row(i);
      for (int64_t j = 0; j < out.cols; ++j) r[j] += bv.a[j];
    }
    return binary(std::move(out), a, b, [](Tape& tp, int32_t o, int32_t ia, int32_t ib) {
      const Mat& g = tp.nodes_[o].grad;
      if (tp.nodes_[ia].rg) {
        Mat& da = tp.nodes_[ia].grad;
        for (int64_t i = 0; i < g.size(); ++i) da.a[i] += g.a[i];
      }
      if (tp.nodes_[ib].rg) {
        Mat& db = tp.nodes_[ib].grad;
        for (int64_t i = 0; i < g.rows; ++i) {
          const double* gr = g.row(i);
          for (int64_t j = 0; j < g.cols; ++j) db.a[j] += gr[j];
        }
      }
    });
  }

  // Block matmuls over `blocks` stacked row-blocks of `rows` rows each.
  // bmm_nt: out block = A_i (rows x d) * B_i^T (d x rows).
  Var bmm_nt(Var a, Var b, int64_t blocks, int64_t rows) {
    const Mat& av = val(a);
    const Mat& bv = val(b);
    require_same_shape(av, bv, "bmm_nt");
    if (av.rows != blocks * rows)
      throw ShapeError("bmm_nt: rows " + shape_str(av) + " vs blocks " + std::to_string(blocks));
    Mat out(av.rows, rows);
    const int64_t d = av.cols;
    for (int64_t blk = 0; blk < blocks; ++blk) {
      const int64_t r0 = blk * rows;
      for (int64_t i = 0; i < rows; ++i) {
        const double* ai = av.row(r0 + i);
        double* oi = out.row(r0 + i);
        for (int64_t j = 0; j < rows; ++j) oi[j] = dot_unrolled(ai, bv.row(r0 + j), d);
      }
    }
    return binary(std::move(out), a, b,
                  [blocks, rows](Tape& tp, int32_t o, int32_t ia, int32_t ib) {
      const Mat& g = tp.nodes_[o].grad;
      const Mat& av = tp.nodes_[ia].val;
      const Mat& bv = tp.nodes_[ib].val;
      const int64_t d = av.cols;
      if (tp.nodes_[ia].rg) {
        Mat& da = tp.nodes_[ia].grad;
        for (int64_t blk = 0; blk < blocks; ++blk) {
          const int64_t r0 = blk * rows;
          for (int64_t i = 0; i < rows; ++i) {
            const double* gi = g.row(r0 + i);
            double* dai = da.row(r0 + i);
            for (int64_t j = 0; j < rows; ++j) {
              const double gv = gi[j];
              if (gv == 0.0) continue;
              const double* bj = bv.row(r0 + j);
              for (int64_t p = 0; p < d; ++p) dai[p] += gv * bj[p];
            }
          }
        }
      }
      if (tp.nodes_[ib].rg) {
        Mat& db = tp.nodes_[ib].grad;
        for (int64_t blk = 0; blk < blocks; ++blk) {
          const int64_t r0 = blk * rows;
          for (int64_t i = 0; i < rows; ++i) {
            const double* gi = g.row(r0 + i);
            const double* ai = av.row(r0 + i);
            for (int64_t j = 0; j < rows; ++j) {
              const double gv = gi[j];
              if (gv == 0.0) continue;
              double* dbj = db.row(r0 + j);
              for (int64_t p = 0; p < d; ++p) dbj[p] += gv * ai[p];
            }
          }
        }
      }
    });
  }

  // bmm_nn: out block = A_i (rows x rows) * B_i (rows x d).
  Var bmm_nn(Var a, Var b, int64_t blocks, int64_t rows) {
    const Mat& av = val(a);
    const Mat& bv = val(b);
    if (av.rows != blocks * rows || av.cols != rows || bv.rows != blocks * rows)
      throw ShapeError("bmm_nn: " + shape_str(av) + " vs " + shape_str(bv));
    Mat out(bv.rows, bv.cols);
    const int64_t d = bv.cols;
    for (int64_t blk = 0; blk < blocks; ++blk) {
      const int64_t r0 = blk * rows;
      for (int64_t i = 0; i < rows; ++i) {
        const double* ai = av.row(r0 + i);
        double* oi = out.row(r0 + i);
        for (int64_t j = 0; j < rows; ++j) {
          const double w = ai[j];
          if (w == 0.0) continue;
          const double* bj = bv.row(r0 + j);
          for (int64_t p = 0; p < d; ++p) oi[p] += w * bj[p];
        }
      }
    }
    return binary(std::move(out), a, b,
                  [blocks, rows](Tape& tp, int32_t o, int32_t ia, int32_t ib) {
      const Mat& g = tp.nodes_[o].grad;
      const Mat& av = tp.nodes_[ia].val;
      const Mat& bv = tp.nodes_[ib].val;
      const int64_t d = bv.cols;
      if (tp.nodes_[ia].rg) {
        Mat& da = tp.nodes_[ia].grad;
        for (int64_t blk = 0; blk < blocks; ++blk) {
          const int64_t r0 = blk * rows;
          for (int64_t i = 0; i < rows; ++i) {
            const double* gi = g.row(r0 + i);
            double* dai = da.row(r0 + i);
            for (int64_t j = 0; j < rows; ++j) dai[j] += dot_unrolled(gi, bv.row(r0 + j), d);
          }
        }
      }
      if (tp.nodes_[ib].rg) {
        Mat& db = tp.nodes_[ib].grad;
        for (int64_t blk = 0; blk < blocks; ++blk) {
          const int64_t r0 = blk * rows;
          for (int64_t i = 0; i < rows; ++i) {
            const double* ai = av.row(r0 + i);
            const double* gi = g.row(r0 + i);
            for (int64_t j = 0; j < rows; ++j) {
              const double w = ai[j];
              if (w == 0.0) continue;
              double* dbj = db.row(r0 + j);
              for (int64_t p = 0; p < d; ++p) dbj[p] += w * gi[p];
            }
          }
        }
      }
    });
  }

  // ---- shape ----

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty");
    const int64_t cols = val(parts[0]).cols;
    int64_t rows = 0;
    for (Var p : parts) {
      if (val(p).cols != cols) throw ShapeError("concat_rows: column mismatch");
      rows += val(p).rows;
    }
    Mat out(rows, cols);
    int64_t r = 0;
    for (Var p : parts) {
      const Mat& pv = val(p);
      std::copy(pv.a.begin(), pv.a.end(), out.row(r));
      r += pv.rows;
    }
    bool rg = false;
    std::vector<int32_t> idxs(parts.size());
    for (size_t i = 0; i < parts.size(); ++i) {
      idxs[i] = parts[i].idx;
      rg = rg || requires_grad(parts[i]);
    }
    rg = rg && grad_enabled_;
    if (!rg) return push(std::move(out), false, nullptr);
    return push(std::move(out), true, [idxs](Tape& tp, int32_t o) {
      const Mat& g = tp.nodes_[o].grad;
      int64_t r = 0;
      for (int32_t i : idxs) {
        Mat& d = tp.nodes_[i].grad;
        const int64_t n = tp.nodes_[i].val.size();
        if (tp.nodes_[i].rg) {
          const double* src = g.row(r);
          for (int64_t k = 0; k < n; ++k) d.a[k] += src[k];
        }
        r += tp.nodes_[i].val.rows;
      }
    });
  }

  Var concat_cols(Var a, Var b) {
    const Mat& av = val(a);
    const Mat& bv = val(b);
    if (av.rows != bv.rows) throw ShapeError("concat_cols: row mismatch");
    Mat out(av.rows, av.cols + bv.cols);
    for (int64_t i = 0; i < av.rows; ++i) {
      std::copy(av.row(i), av.row(i) + av.cols, out.row(i));
      std::copy(bv.row(i), bv.row(i) + bv.cols, out.row(i) + av.cols);
    }
    return binary(std::move(out), a, b, [](Tape& tp, int32_t o, int32_t ia, int32_t ib) {
      const Mat& g = tp.nodes_[o].grad;
      const int64_t ca = tp.nodes_[ia].val.cols;
      const int64_t cb = tp.nodes_[ib].val.cols;
      if (tp.nodes_[ia].rg) {
        Mat& da = tp.nodes_[ia].grad;
        for (int64_t i = 0; i < g.rows; ++i) {
          const double* gr = g.row(i);
          double* dr = da.row(i);
          for (int64_t j = 0; j < ca; ++j) dr[j] += gr[j];
        }
      }
      if (tp.nodes_[ib].rg) {
        Mat& db = tp.nodes_[ib].grad;
        for (int64_t i = 0; i < g.rows; ++i) {
          const double* gr = g.row(i) + ca;
          double* dr = db.row(i);
          for (int64_t j = 0; j < cb; ++j) dr[j] += gr[j];
        }
      }
    });
  }

  Var slice_rows(Var a, int64_t r0, int64_t r1) {
    const Mat& x = val(a);
    if (r0 < 0 || r1 > x.rows || r0 >= r1)
      throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) +
                       ") of " + shape_str(x));
    Mat out(r1 - r0, x.cols);
    std::copy(x.row(r0), x.row(r1 - 1) + x.cols, out.data());
    return unary(std::move(out), a, [r0](Tape& tp, int32_t o, int32_t ia) {
      const Mat& g = tp.nodes_[o].grad;
      Mat& da = tp.nodes_[ia].grad;
      double* dst = da.row(r0);
      for (int64_t k = 0; k < g.size(); ++k) dst[k] += g.a[k];
    });
  }

  Var slice_cols(Var a, int64_t c0, int64_t c1) {
    const Mat& x = val(a);
    if (c0 < 0 || c1 > x.cols || c0 >= c1)
      throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                       ") of " + shape_str(x));
    Mat out(x.rows, c1 - c0);
    for (int64_t i = 0; i < x.rows; ++i)
      std::copy(x.row(i) + c0, x.row(i) + c1, out.row(i));
    return unary(std::move(out), a, [c0](Tape& tp, int32_t o, int32_t ia) {
      const Mat& g = tp.nodes_[o].grad;
      Mat& da = tp.nodes_[ia].grad;
      for (int64_t i = 0; i < g.rows; ++i) {
        const double* gr = g.row(i);
        double* dr = da.row(i) + c0;
        for (int64_t j = 0; j < g.cols; ++j) dr[j] += gr[j];
      }
    });
  }

  // (B*T x E) -> ((B*H)*T x E/H): block b*H+h, row t = cols [h*dh,(h+1)*dh)
  // of input row b*T+t.
  Var split_heads(Var a, int64_t batch, int64_t block_rows, int64_t heads) {
    const Mat& x = val(a);
    if (x.rows != batch * block_rows || x.cols % heads != 0)
      throw ShapeError("split_heads: " + shape_str(x));
    const int64_t dh = x.cols / heads;
    Mat out(batch * heads * block_rows, dh);
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t t = 0; t < block_rows; ++t) {
          const double* src = x.row(b * block_rows + t) + h * dh;
          double* dst = out.row((b * heads + h) * block_rows + t);
          std::copy(src, src + dh, dst);
        }
    return unary(std::move(out), a,
                 [batch, block_rows, heads, dh](Tape& tp, int32_t o, int32_t ia) {
      const Mat& g = tp.nodes_[o].grad;
      Mat& da = tp.nodes_[ia].grad;
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t t = 0; t < block_rows; ++t) {
            const double* src = g.row((b * heads + h) * block_rows + t);
            double* dst = da.row(b * block_rows + t) + h * dh;
            for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
          }
    });
  }

  Var merge_heads(Var a, int64_t batch, int64_t block_rows, int64_t heads) {
    const Mat& x = val(a);
    if (x.rows != batch * heads * block_rows)
      throw ShapeError("merge_heads: " + shape_str(x));
    const int64_t dh = x.cols;
    Mat out(batch * block_rows, heads * dh);
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t t = 0; t < block_rows; ++t) {
          const double* src = x.row((b * heads + h) * block_rows + t);
          double* dst = out.row(b * block_rows + t) + h * dh;
          std::copy(src, src + dh, dst);
        }
    return unary(std::move(out), a,
                 [batch, block_rows, heads, dh](Tape& tp, int32_t o, int32_t ia) {
      const Mat& g = tp.nodes_[o].grad;
      Mat& da = tp.nodes_[ia].grad;
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t t = 0; t < block_rows; ++t) {
            const double* src = g.row(b * block_rows + t) + h * dh;
            double* dst = da.row((b * heads + h) * block_rows + t);
            for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
          }
    });
  }

  // Adds pe (T x E) to each of `blocks` stacked (T x E) blocks.
  Var add_tiled(Var a, Var pe, int64_t blocks) {
    const Mat& x = val(a);
    const Mat& pv = val(pe);
    if (x.rows != blocks * pv.rows || x.cols != pv.cols)
      throw ShapeError("add_tiled: " + shape_str(x) + " vs " + shape_str(pv));
    Mat out = x;
    for (int64_t b = 0; b < blocks; ++b)
      for (int64_t t = 0; t < pv.rows; ++t) {
        double* r = out.row(b * pv.rows + t);
        const double* p = pv.row(t);
        for (int64_t j = 0; j < pv.cols; ++j) r[j] += p[j];
      }
    return binary(std::move(out), a, pe,
                  [blocks](Tape& tp, int32_t o, int32_t ia, int32_t ib) {
      const Mat& g = tp.nodes_[o].grad;
      if (tp.nodes_[ia].rg) {
        Mat& da = tp.nodes_[ia].grad;
        for (int64_t i = 0; i < g.size(); ++i) da.a[i] += g.a[i];
      }
      if (tp.nodes_[ib].rg) {
        Mat& db = tp.nodes_[ib].grad;
        const int64_t tr = db.rows;
        for (int64_t b = 0; b < blocks; ++b)
          for (int64_t t = 0; t < tr; ++t) {
            const double* gr = g.row(b * tr + t);
            double* dr = db.row(t);
            for (int64_t j = 0; j < g.cols; ++j) dr[j] += gr[j];
          }
      }
    });
  }

  // ---- sequence assembly ----
  // Builds the embedded model input [zero vector] ++ prefix ++ observations
  // for a flattened batch. prefix is (L x E) shared across the batch (pass
  // an invalid Var for L=0); obs is (B*N x E), sequence-major. Layouts:
  // batch-major row(b,t) = b*T+t, time-major row(b,t) = t*B+b, T = 1+L+N.

  Var assemble_batch(std::optional<Var> prefix, Var obs, int64_t batch, int64_t n_obs,
                     bool time_major) {
    const Mat& ov = val(obs);
    const int64_t e = ov.cols;
    const int64_t l = prefix ? val(*prefix).rows : 0;
    if (prefix && val(*prefix).cols != e)
      throw ShapeError("assemble_batch: prefix cols " + shape_str(val(*prefix)));
    if (ov.rows != batch * n_obs) throw ShapeError("assemble_batch: obs " + shape_str(ov));
    const int64_t t_total = 1 + l + n_obs;
    Mat out(batch * t_total, e);
    auto row_of = [batch, t_total, time_major](int64_t b, int64_t t) {
      return time_major ? t * batch + b : b * t_total + t;
    };
    for (int64_t b = 0; b < batch; ++b) {
      if (prefix) {
        const Mat& pv = val(*prefix);
        for (int64_t i = 0; i < l; ++i)
          std::copy(pv.row(i), pv.row(i) + e, out.row(row_of(b, 1 + i)));
      }
      for (int64_t k = 0; k < n_obs; ++k)
        std::copy(ov.row(b * n_obs + k), ov.row(b * n_obs + k) + e,
                  out.row(row_of(b, 1 + l + k)));
    }
    bool rg = grad_enabled_ &&
              (requires_grad(obs) || (prefix && requires_grad(*prefix)));
    if (!rg) return push(std::move(out), false, nullptr);
    const int32_t ip = prefix ? prefix->idx : -1;
    const int32_t io = obs.idx;
    return push(std::move(out), true,
                [ip, io, batch, n_obs, l, t_total, time_major](Tape& tp, int32_t o) {
      const Mat& g = tp.nodes_[o].grad;
      const int64_t e = g.cols;
      auto row_of = [batch, t_total, time_major](int64_t b, int64_t t) {
        return time_major ? t * batch + b : b * t_total + t;
      };
      if (ip >= 0 && tp.nodes_[ip].rg) {
        Mat& dp = tp.nodes_[ip].grad;
        for (int64_t b = 0; b < batch; ++b)
          for (int64_t i = 0; i < l; ++i) {
            const double* gr = g.row(row_of(b, 1 + i));
            double* dr = dp.row(i);
            for (int64_t j = 0; j < e; ++j) dr[j] += gr[j];
          }
      }
      if (tp.nodes_[io].rg) {
        Mat& dobs = tp.nodes_[io].grad;
        for (int64_t b = 0; b < batch; ++b)
          for (int64_t k = 0; k < n_obs; ++k) {
            const double* gr = g.row(row_of(b, 1 + l + k));
            double* dr = dobs.row(b * n_obs + k);
            for (int64_t j = 0; j < e; ++j) dr[j] += gr[j];
          }
      }
    });
  }

  // Per-token negative log likelihood. logp holds log-probabilities laid out
  // as the assembled sequence; returns (B x N) where entry (b,k) is
  // -logp[row(b, l+k), tokens[b*N+k]]: the prediction row for observation k
  // is the one just before it in the sequence.
  Var gather_nll(Var logp, std::span<const int> tokens, int64_t batch, int64_t n_obs,
                 int64_t prefix_len, bool time_major) {
    const Mat& lp = val(logp);
    const int64_t t_total = 1 + prefix_len + n_obs;
    if (lp.rows != batch * t_total || static_cast<int64_t>(tokens.size()) != batch * n_obs)
      throw ShapeError("gather_nll: " + shape_str(lp));
    auto row_of = [batch, t_total, time_major](int64_t b, int64_t t) {
      return time_major ? t * batch + b : b * t_total + t;
    };
    Mat out(batch, n_obs);
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t k = 0; k < n_obs; ++k)
        out.at(b, k) = -lp.at(row_of(b, prefix_len + k), tokens[b * n_obs + k]);
    if (!(grad_enabled_ && requires_grad(logp))) return push(std::move(out), false, nullptr);
    const int32_t il = logp.idx;
    std::vector<int> toks(tokens.begin(), tokens.end());
    return push(std::move(out), true,
                [il, toks = std::move(toks), batch, n_obs, prefix_len, t_total,
                 time_major](Tape& tp, int32_t o) {
      const Mat& g = tp.nodes_[o].grad;
      Mat& dl = tp.nodes_[il].grad;
      auto row_of = [batch, t_total, time_major](int64_t b, int64_t t) {
        return time_major ? t * batch + b : b * t_total + t;
      };
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t k = 0; k < n_obs; ++k)
          dl.at(row_of(b, prefix_len + k), toks[b * n_obs + k]) -= g.at(b, k);
    });
  }

  Var sum(Var a) {
    const Mat& x = val(a);
    Mat out(1, 1);
    double s = 0.0;
    for (double v : x.a) s += v;
    out.a[0] = s;
    return unary(std::move(out), a, [](Tape& tp, int32_t o, int32_t ia) {
      const double g = tp.nodes_[o].grad.a[0];
      Mat& da = tp.nodes_[ia].grad;
      for (double& v : da.a) v += g;
    });
  }

  Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(val(a).size())); }

  // Fused LSTM cell. Gate order i,f,g,o packed in w ((E+H) x 4H) and
  // b (1 x 4H); returns (B x 2H) with new h in columns [0,H) and new cell
  // state in [H,2H).
  Var lstm_cell(Var x_t, Var h_prev, Var c_prev, Var w, Var b) {
    const Mat& xv = val(x_t);
    const Mat& hv = val(h_prev);
    const Mat& cv = val(c_prev);
    const Mat& wv = val(w);
    const Mat& bv = val(b);
    const int64_t bs = xv.rows, e = xv.cols, hd = hv.cols;
    if (hv.rows != bs || cv.rows != bs || cv.cols != hd || wv.rows != e + hd ||
        wv.cols != 4 * hd || bv.rows != 1 || bv.cols != 4 * hd)
      throw ShapeError("lstm_cell: x " + shape_str(xv) + " h " + shape_str(hv) + " w " +
                       shape_str(wv));
    Mat xh(bs, e + hd);
    for (int64_t i = 0; i < bs; ++i) {
      std::copy(xv.row(i), xv.row(i) + e, xh.row(i));
      std::copy(hv.row(i), hv.row(i) + hd, xh.row(i) + e);
    }
    Mat z;
    matmul_nn(z, xh, wv);
    for (int64_t i = 0; i < bs; ++i) {
      double* r = z.row(i);
      for (int64_t j = 0; j < 4 * hd; ++j) r[j] += bv.a[j];
    }
    Mat gates = z;  // i,f,g,o after activations
    Mat out(bs, 2 * hd);
    Mat tanh_c(bs, hd);
    for (int64_t i = 0; i < bs; ++i) {
      double* gr = gates.row(i);
      const double* cp = cv.row(i);
      double* ho = out.row(i);
      double* co = out.row(i) + hd;
      double* tc = tanh_c.row(i);
      for (int64_t j = 0; j < hd; ++j) {
        const double gi = 1.0 / (1.0 + std::exp(-gr[j]));
        const double gf = 1.0 / (1.0 + std::exp(-gr[hd + j]));
        const double gg = std::tanh(gr[2 * hd + j]);
        const double go = 1.0 / (1.0 + std::exp(-gr[3 * hd + j]));
        gr[j] = gi;
        gr[hd + j] = gf;
        gr[2 * hd + j] = gg;
        gr[3 * hd + j] = go;
        const double c_new = gf * cp[j] + gi * gg;
        co[j] = c_new;
        tc[j] = std::tanh(c_new);
        ho[j] = go * tc[j];
      }
    }
    bool rg = grad_enabled_ && (requires_grad(x_t) || requires_grad(h_prev) ||
                                requires_grad(c_prev) || requires_grad(w) || requires_grad(b));
    if (!rg) return push(std::move(out), false, nullptr);
    const int32_t ix = x_t.idx, ih = h_prev.idx, ic = c_prev.idx, iw = w.idx, ib = b.idx;
    auto s_xh = std::make_shared<Mat>(std::move(xh));
    auto s_gates = std::make_shared<Mat>(std::move(gates));
    auto s_tc = std::make_shared<Mat>(std::move(tanh_c));
    return push(std::move(out), true,
                [ix, ih, ic, iw, ib, s_xh, s_gates, s_tc, bs, e, hd](Tape& tp, int32_t o) {
      const Mat& g = tp.nodes_[o].grad;
      const Mat& cv = tp.nodes_[ic].val;
      Mat dz(bs, 4 * hd);
      for (int64_t i = 0; i < bs; ++i) {
        const double* gr = g.row(i);
        const double* gates = s_gates->row(i);
        const double* tc = s_tc->row(i);
        const double* cp = cv.row(i);
        double* dzr = dz.row(i);
        for (int64_t j = 0; j < hd; ++j) {
          const double gi = gates[j], gf = gates[hd + j], gg = gates[2 * hd + j],
                       go = gates[3 * hd + j];
          const double dh = gr[j];
          double dc = gr[hd + j] + dh * go * (1.0 - tc[j] * tc[j]);
          const double d_go = dh * tc[j];
          const double d_gf = dc * cp[j];
          const double d_gi = dc * gg;
          const double d_gg = dc * gi;
          dzr[j] = d_gi * gi * (1.0 - gi);
          dzr[hd + j] = d_gf * gf * (1.0 - gf);
          dzr[2 * hd + j] = d_gg * (1.0 - gg * gg);
          dzr[3 * hd + j] = d_go * go * (1.0 - go);
        }
      }
      if (tp.nodes_[ic].rg) {
        Mat& dcp = tp.nodes_[ic].grad;
        for (int64_t i = 0; i < bs; ++i) {
          const double* gr = g.row(i);
          const double* gates = s_gates->row(i);
          const double* tc = s_tc->row(i);
          double* dr = dcp.row(i);
          for (int64_t j = 0; j < hd; ++j) {
            const double dc = gr[hd + j] + gr[j] * gates[3 * hd + j] * (1.0 - tc[j] * tc[j]);
            dr[j] += dc * gates[hd + j];
          }
        }
      }
      if (tp.nodes_[ib].rg) {
        Mat& db = tp.nodes_[ib].grad;
        for (int64_t i = 0; i < bs; ++i) {
          const double* dzr = dz.row(i);
          for (int64_t j = 0; j < 4 * hd; ++j) db.a[j] += dzr[j];
        }
      }
      if (tp.nodes_[iw].rg) matmul_tn_acc(tp.nodes_[iw].grad, *s_xh, dz);
      const bool need_x = tp.nodes_[ix].rg, need_h = tp.nodes_[ih].rg;
      if (need_x || need_h) {
        Mat dxh(bs, e + hd);
        matmul_nt_acc(dxh, dz, tp.nodes_[iw].val);
        if (need_x) {
          Mat& dx = tp.nodes_[ix].grad;
          for (int64_t i = 0; i < bs; ++i) {
            const double* sr = dxh.row(i);
            double* dr = dx.row(i);
            for (int64_t j = 0; j < e; ++j) dr[j] += sr[j];
          }
        }
        if (need_h) {
          Mat& dh = tp.nodes_[ih].grad;
          for (int64_t i = 0; i < bs; ++i) {
            const double* sr = dxh.row(i) + e;
            double* dr = dh.row(i);
            for (int64_t j = 0; j < hd; ++j) dr[j] += sr[j];
          }
        }
      }
    });
  }

  void backward(Var loss) {
    const Mat& lv = val(loss);
    if (lv.rows != 1 || lv.cols != 1)
      throw NonScalarLoss("backward on " + shape_str(lv) + " tensor");
    for (auto& n : nodes_)
      if (n.rg) {
        n.grad.rows = n.val.rows;
        n.grad.cols = n.val.cols;
        n.grad.a.assign(n.val.a.size(), 0.0);
      }
    if (!requires_grad(loss)) return;
    nodes_[loss.idx].grad.a[0] = 1.0;
    for (int32_t i = loss.idx; i >= 0; --i)
      if (nodes_[i].back) nodes_[i].back(*this, i);
  }

 private:
  struct Node {
    Mat val;
    Mat grad;
    bool rg = false;
    std::function<void(Tape&, int32_t)> back;
  };

  static void softmax_row(double* r, int64_t n) {
    double mx = r[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, r[j]);
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      r[j] = std::exp(r[j] - mx);
      s += r[j];
    }
    for (int64_t j = 0; j < n; ++j) r[j] /= s;
  }

  Var push(Mat val, bool rg, std::function<void(Tape&, int32_t)> back) {
    nodes_.push_back(Node{std::move(val), Mat(), rg, rg ? std::move(back) : nullptr});
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
  }

  template <typename F>
  Var unary(Mat out, Var a, F&& back) {
    const bool rg = grad_enabled_ && requires_grad(a);
    if (!rg) return push(std::move(out), false, nullptr);
    const int32_t ia = a.idx;
    return push(std::move(out), true,
                [ia, back = std::forward<F>(back)](Tape& tp, int32_t o) { back(tp, o, ia); });
  }

  template <typename F>
  Var binary(Mat out, Var a, Var b, F&& back) {
    const bool rg = grad_enabled_ && (requires_grad(a) || requires_grad(b));
    if (!rg) return push(std::move(out), false, nullptr);
    const int32_t ia = a.idx, ib = b.idx;
    return push(std::move(out), true, [ia, ib, back = std::forward<F>(back)](
                                          Tape& tp, int32_t o) { back(tp, o, ia, ib); });
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

// pe[pos, 2i] = sin(pos / 10000^(2i/d)), pe[pos, 2i+1] = cos of the same.
inline Mat sincos_positional_encoding(int64_t n, int64_t d) {
  Mat pe(n, d);
  for (int64_t pos = 0; pos < n; ++pos)
    for (int64_t j = 0; j < d; ++j) {
      const int64_t i = j / 2;
      const double angle = pos * std::pow(10000.0, -2.0 * i / d);
      pe.at(pos, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

}  // namespace coinlab
