// Minimal dense-prediction layers with hand-written backward passes. Feature
// tensors use the FeatureMap layout: MatrixXd of shape (channels, h*w),
// column j = r*w + c. Everything is double precision; the training loop is
// small enough that exactness beats speed, and the finite-difference gradient
// checks in the test suite rely on it.
//
// Convolution weights are stored as (out_ch, in_ch*k*k); the (ky, kx) kernel
// tap is the out_ch x in_ch block at column offset (ky*k + kx)*in_ch. Both
// conv and transposed conv iterate over taps and issue one GEMM per output
// row, so no im2col buffer is ever materialized.

#pragma once

#include "fmosd/core.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace fmosd {

namespace detail {
inline void check_tensor(const MatrixXd& t, int ch, int h, int w, const char* what) {
  if (t.rows() != ch || t.cols() != static_cast<Eigen::Index>(h) * w)
    throw Error("tensor-shape-mismatch",
                std::string(what) + ": expected " + std::to_string(ch) + "x" +
                    std::to_string(h) + "*" + std::to_string(w) + ", got " +
                    std::to_string(t.rows()) + "x" + std::to_string(t.cols()));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: stride 1, "same" padding (k odd, p = (k-1)/2)
// ---------------------------------------------------------------------------

inline MatrixXd conv2d_forward(const MatrixXd& in, int h, int w, const MatrixXd& weight,
                               const VectorXd& bias, int k) {
  const int out_ch = static_cast<int>(weight.rows());
  const int in_ch = static_cast<int>(weight.cols()) / (k * k);
  detail::check_tensor(in, in_ch, h, w, "conv2d input");
  const int p = (k - 1) / 2;
  MatrixXd out = bias.replicate(1, static_cast<Eigen::Index>(h) * w);
  for (int ky = 0; ky < k; ++ky)
    for (int kx = 0; kx < k; ++kx) {
      const auto wslice = weight.middleCols((ky * k + kx) * in_ch, in_ch);
      const int dy = ky - p, dx = kx - p;
      const int c0 = std::max(0, -dx), c1 = std::min(w, w - dx);
      if (c0 >= c1) continue;
      for (int r = 0; r < h; ++r) {
        const int rr = r + dy;
        if (rr < 0 || rr >= h) continue;
        out.middleCols(r * w + c0, c1 - c0).noalias() +=
            wslice * in.middleCols(rr * w + c0 + dx, c1 - c0);
      }
    }
  (void)out_ch;
  return out;
}

inline void conv2d_backward(const MatrixXd& in, int h, int w, const MatrixXd& weight, int k,
                            const MatrixXd& d_out, MatrixXd& d_weight, VectorXd& d_bias,
                            MatrixXd& d_in) {
  const int in_ch = static_cast<int>(weight.cols()) / (k * k);
  const int p = (k - 1) / 2;
  d_weight.setZero(weight.rows(), weight.cols());
  d_bias = d_out.rowwise().sum();
  d_in.setZero(in.rows(), in.cols());
  for (int ky = 0; ky < k; ++ky)
    for (int kx = 0; kx < k; ++kx) {
      const auto wslice = weight.middleCols((ky * k + kx) * in_ch, in_ch);
      auto dwslice = d_weight.middleCols((ky * k + kx) * in_ch, in_ch);
      const int dy = ky - p, dx = kx - p;
      const int c0 = std::max(0, -dx), c1 = std::min(w, w - dx);
      if (c0 >= c1) continue;
      for (int r = 0; r < h; ++r) {
        const int rr = r + dy;
        if (rr < 0 || rr >= h) continue;
        const auto dout_blk = d_out.middleCols(r * w + c0, c1 - c0);
        const auto in_blk = in.middleCols(rr * w + c0 + dx, c1 - c0);
        dwslice.noalias() += dout_blk * in_blk.transpose();
        d_in.middleCols(rr * w + c0 + dx, c1 - c0).noalias() += wslice.transpose() * dout_blk;
      }
    }
}

// ---------------------------------------------------------------------------
// conv_transpose2d: output spatial size s*(n-1) + k - 2p per axis
// ---------------------------------------------------------------------------

inline int conv_transpose_out_size(int n, int k, int s, int p) { return s * (n - 1) + k - 2 * p; }

namespace detail {
using StridedCols = Eigen::Map<MatrixXd, 0, Eigen::OuterStride<>>;
using ConstStridedCols = Eigen::Map<const MatrixXd, 0, Eigen::OuterStride<>>;

/// Valid input-column range [c_lo, c_hi] for tap offset kx under stride s and
/// padding p so that the output column c*s + kx - p lies in [0, out_w).
inline bool transpose_col_range(int w, int out_w, int kx, int s, int p, int& c_lo, int& c_hi) {
  c_lo = (p - kx <= 0) ? 0 : (p - kx + s - 1) / s;
  const int m = out_w - 1 - kx + p;
  if (m < 0) return false;
  c_hi = std::min(w - 1, m / s);
  return c_lo <= c_hi;
}
}  // namespace detail

inline MatrixXd conv_transpose2d_forward(const MatrixXd& in, int h, int w,
                                         const MatrixXd& weight, const VectorXd& bias, int k,
                                         int s, int p) {
  const int out_ch = static_cast<int>(weight.rows());
  const int in_ch = static_cast<int>(weight.cols()) / (k * k);
  detail::check_tensor(in, in_ch, h, w, "conv_transpose2d input");
  const int out_h = conv_transpose_out_size(h, k, s, p);
  const int out_w = conv_transpose_out_size(w, k, s, p);
  MatrixXd out = bias.replicate(1, static_cast<Eigen::Index>(out_h) * out_w);
  for (int ky = 0; ky < k; ++ky)
    for (int kx = 0; kx < k; ++kx) {
      const auto wslice = weight.middleCols((ky * k + kx) * in_ch, in_ch);
      int c_lo, c_hi;
      if (!detail::transpose_col_range(w, out_w, kx, s, p, c_lo, c_hi)) continue;
      const int n = c_hi - c_lo + 1;
      for (int r = 0; r < h; ++r) {
        const int orow = r * s + ky - p;
        if (orow < 0 || orow >= out_h) continue;
        const int ocol = c_lo * s + kx - p;
        detail::StridedCols blk(out.data() + (static_cast<Eigen::Index>(orow) * out_w + ocol) * out_ch,
                                out_ch, n, Eigen::OuterStride<>(static_cast<Eigen::Index>(out_ch) * s));
        blk.noalias() += wslice * in.middleCols(r * w + c_lo, n);
      }
    }
  return out;
}

inline void conv_transpose2d_backward(const MatrixXd& in, int h, int w, const MatrixXd& weight,
                                      int k, int s, int p, const MatrixXd& d_out,
                                      MatrixXd& d_weight, VectorXd& d_bias, MatrixXd& d_in) {
  const int out_ch = static_cast<int>(weight.rows());
  const int in_ch = static_cast<int>(weight.cols()) / (k * k);
  const int out_h = conv_transpose_out_size(h, k, s, p);
  const int out_w = conv_transpose_out_size(w, k, s, p);
  detail::check_tensor(d_out, out_ch, out_h, out_w, "conv_transpose2d d_out");
  d_weight.setZero(weight.rows(), weight.cols());
  d_bias = d_out.rowwise().sum();
  d_in.setZero(in.rows(), in.cols());
  for (int ky = 0; ky < k; ++ky)
    for (int kx = 0; kx < k; ++kx) {
      const auto wslice = weight.middleCols((ky * k + kx) * in_ch, in_ch);
      auto dwslice = d_weight.middleCols((ky * k + kx) * in_ch, in_ch);
      int c_lo, c_hi;
      if (!detail::transpose_col_range(w, out_w, kx, s, p, c_lo, c_hi)) continue;
      const int n = c_hi - c_lo + 1;
      for (int r = 0; r < h; ++r) {
        const int orow = r * s + ky - p;
        if (orow < 0 || orow >= out_h) continue;
        const int ocol = c_lo * s + kx - p;
        detail::ConstStridedCols dout_blk(
            d_out.data() + (static_cast<Eigen::Index>(orow) * out_w + ocol) * out_ch, out_ch, n,
            Eigen::OuterStride<>(static_cast<Eigen::Index>(out_ch) * s));
        const auto in_blk = in.middleCols(r * w + c_lo, n);
        dwslice.noalias() += dout_blk * in_blk.transpose();
        d_in.middleCols(r * w + c_lo, n).noalias() += wslice.transpose() * dout_blk;
      }
    }
}

// ---------------------------------------------------------------------------
// Bilinear resize, half-pixel centers, clamp-to-edge. The backward pass is the
// exact adjoint and needs only the shapes (sampling weights are re-derived).
// ---------------------------------------------------------------------------

namespace detail {
struct LinearSampleTable {
  std::vector<int> lo, hi;
  std::vector<double> frac;  // weight of hi; lo gets 1 - frac
};

inline LinearSampleTable make_linear_table(int src, int dst) {
  LinearSampleTable t;
  t.lo.resize(dst);
  t.hi.resize(dst);
  t.frac.resize(dst);
  const double ratio = double(src) / dst;
  for (int i = 0; i < dst; ++i) {
    double x = std::clamp((i + 0.5) * ratio - 0.5, 0.0, double(src - 1));
    const int lo = static_cast<int>(std::floor(x));
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, src - 1);
    t.frac[i] = x - lo;
  }
  return t;
}
}  // namespace detail

inline MatrixXd resize_bilinear(const MatrixXd& in, int h, int w, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw Error("invalid-upsample-target", "non-positive resize target");
  if (h == out_h && w == out_w) return in;
  const auto ty = detail::make_linear_table(h, out_h);
  const auto tx = detail::make_linear_table(w, out_w);
  const int ch = static_cast<int>(in.rows());
  MatrixXd out(ch, static_cast<Eigen::Index>(out_h) * out_w);
  MatrixXd rowmix(ch, w);
  for (int i = 0; i < out_h; ++i) {
    const double fy = ty.frac[i];
    rowmix = (1.0 - fy) * in.middleCols(ty.lo[i] * w, w) + fy * in.middleCols(ty.hi[i] * w, w);
    for (int j = 0; j < out_w; ++j) {
      const double fx = tx.frac[j];
      out.col(static_cast<Eigen::Index>(i) * out_w + j) =
          (1.0 - fx) * rowmix.col(tx.lo[j]) + fx * rowmix.col(tx.hi[j]);
    }
  }
  return out;
}

inline MatrixXd resize_bilinear_backward(const MatrixXd& d_out, int out_h, int out_w, int h,
                                         int w) {
  if (h == out_h && w == out_w) return d_out;
  const auto ty = detail::make_linear_table(h, out_h);
  const auto tx = detail::make_linear_table(w, out_w);
  const int ch = static_cast<int>(d_out.rows());
  MatrixXd d_in = MatrixXd::Zero(ch, static_cast<Eigen::Index>(h) * w);
  MatrixXd rowacc(ch, w);
  for (int i = 0; i < out_h; ++i) {
    rowacc.setZero();
    for (int j = 0; j < out_w; ++j) {
      const double fx = tx.frac[j];
      const auto g = d_out.col(static_cast<Eigen::Index>(i) * out_w + j);
      rowacc.col(tx.lo[j]) += (1.0 - fx) * g;
      rowacc.col(tx.hi[j]) += fx * g;
    }
    const double fy = ty.frac[i];
    d_in.middleCols(ty.lo[i] * w, w) += (1.0 - fy) * rowacc;
    d_in.middleCols(ty.hi[i] * w, w) += fy * rowacc;
  }
  return d_in;
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

inline MatrixXd relu_forward(const MatrixXd& in) { return in.cwiseMax(0.0); }

/// d_in = d_out where the *forward input* was strictly positive, else 0.
inline MatrixXd relu_backward(const MatrixXd& in, const MatrixXd& d_out) {
  return (in.array() > 0.0).cast<double>() * d_out.array();
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Mat>
struct AdamState {
  Mat m, v;
  bool ready = false;

  /// t is the 1-based step count shared by all tensors of one optimizer.
  void step(Mat& param, const Mat& grad, long t, const AdamConfig& cfg) {
    if (!ready) {
      m = Mat::Zero(param.rows(), param.cols());
      v = m;
      ready = true;
    }
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
    param.array() -= cfg.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
  }
};

}  // namespace fmosd
