// Cosine similarity maps, Gaussian similarity targets, and the losses that
// train the decoders: the distance-aware MSE objective plus the one-hot-MSE
// and contrastive baselines used for ablation. Forward operations work on
// SimilarityMap (h x w values); the gradient entry points work on flattened
// cell vectors aligned with the FeatureMap column layout (cell j = r*w + c)
// and accumulate into a dL/dFeatures matrix.

#pragma once

#include "fmosd/core.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace fmosd {

inline constexpr double kNormFloor = 1e-8;

struct GaussianTargetSpec {
  double sigma = 0.0;   // in units of the target grid
  Point center;         // continuous; snapped to the nearest cell before use

  void validate() const {
    if (!(sigma > 0.0)) throw Error("invalid-sigma", "sigma must be > 0");
  }
};

inline VectorXd flatten_cells(const SimilarityMap& m) {
  VectorXd v(static_cast<Eigen::Index>(m.h) * m.w);
  for (int r = 0; r < m.h; ++r)
    for (int c = 0; c < m.w; ++c) v[static_cast<Eigen::Index>(r) * m.w + c] = m.values(r, c);
  return v;
}

inline SimilarityMap similarity_from_cells(int h, int w, const VectorXd& cells,
                                           int anchor = -1) {
  SimilarityMap m = SimilarityMap::zeros(h, w);
  m.anchor = anchor;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) m.values(r, c) = cells[static_cast<Eigen::Index>(r) * w + c];
  return m;
}

// ---------------------------------------------------------------------------
// Cosine similarity
// ---------------------------------------------------------------------------

/// Similarity of every cell against an arbitrary anchor vector. Cells whose
/// descriptor is exactly zero read as similarity 0.
inline SimilarityMap cosine_similarity_map(const FeatureMap& f, const VectorXd& anchor) {
  if (anchor.size() != f.dim)
    throw Error("tensor-shape-mismatch", "anchor dim does not match feature dim");
  const double na = anchor.norm();
  if (na == 0.0) throw Error("zero-anchor", "anchor vector has zero norm");
  const double na_f = std::max(na, kNormFloor);
  SimilarityMap m = SimilarityMap::zeros(f.h, f.w);
  for (int r = 0; r < f.h; ++r)
    for (int c = 0; c < f.w; ++c) {
      const auto col = f.data.col(f.index(r, c));
      const double n = col.norm();
      m.values(r, c) = (n == 0.0) ? 0.0 : col.dot(anchor) / (std::max(n, kNormFloor) * na_f);
    }
  return m;
}

// ---------------------------------------------------------------------------
// Gaussian target
// ---------------------------------------------------------------------------

/// Y(r, c) = exp(-((c-cx)^2 + (r-cy)^2) / (2 sigma^2)) around the snapped
/// center, so the peak value is exactly 1 at one cell.
inline SimilarityMap gaussian_target_map(int h, int w, const GaussianTargetSpec& spec) {
  spec.validate();
  const GridPoint c0 = snap_point(spec.center);
  if (c0.x < 0 || c0.x >= w || c0.y < 0 || c0.y >= h)
    throw Error("center-out-of-bounds", "target center (" + std::to_string(spec.center.x) +
                                            ", " + std::to_string(spec.center.y) +
                                            ") snaps outside " + std::to_string(h) + "x" +
                                            std::to_string(w));
  SimilarityMap m = SimilarityMap::zeros(h, w);
  const double inv = 1.0 / (2.0 * spec.sigma * spec.sigma);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double dx = c - c0.x, dy = r - c0.y;
      m.values(r, c) = std::exp(-(dx * dx + dy * dy) * inv);
    }
  return m;
}

/// Same closed form, flattened to cell order (j = r*w + c) for the training
/// loops; center is already snapped.
inline VectorXd gaussian_cells(int h, int w, GridPoint center, double sigma) {
  if (!(sigma > 0.0)) throw Error("invalid-sigma", "sigma must be > 0");
  if (center.x < 0 || center.x >= w || center.y < 0 || center.y >= h)
    throw Error("center-out-of-bounds", "target center outside grid");
  VectorXd y(static_cast<Eigen::Index>(h) * w);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double dx = c - center.x, dy = r - center.y;
      y[static_cast<Eigen::Index>(r) * w + c] = std::exp(-(dx * dx + dy * dy) * inv);
    }
  return y;
}

// ---------------------------------------------------------------------------
// Losses (forward only; the list-based API mirrors the training objective:
// mean over landmarks of global-map MSE + local-map MSE)
// ---------------------------------------------------------------------------

namespace detail {
inline void check_same_shape(const SimilarityMap& a, const SimilarityMap& b) {
  if (a.h != b.h || a.w != b.w)
    throw Error("map-shape-mismatch", std::to_string(a.h) + "x" + std::to_string(a.w) +
                                          " vs " + std::to_string(b.h) + "x" +
                                          std::to_string(b.w));
}

inline double mse(const SimilarityMap& s, const SimilarityMap& y) {
  check_same_shape(s, y);
  return (s.values - y.values).squaredNorm() / (double(s.h) * s.w);
}
}  // namespace detail

using MapPair = std::pair<SimilarityMap, SimilarityMap>;  // (global, local)

inline double distance_aware_loss(const std::vector<MapPair>& preds,
                                  const std::vector<MapPair>& targets) {
  if (preds.empty() || preds.size() != targets.size())
    throw Error("map-shape-mismatch", "prediction/target lists differ in length");
  double total = 0.0;
  for (size_t i = 0; i < preds.size(); ++i)
    total += detail::mse(preds[i].first, targets[i].first) +
             detail::mse(preds[i].second, targets[i].second);
  return total / double(preds.size());
}

inline double onehot_mse_loss_baseline(const SimilarityMap& s, GridPoint target) {
  if (target.x < 0 || target.x >= s.w || target.y < 0 || target.y >= s.h)
    throw Error("center-out-of-bounds", "one-hot target outside map");
  double acc = 0.0;
  for (int r = 0; r < s.h; ++r)
    for (int c = 0; c < s.w; ++c) {
      const double y = (r == target.y && c == target.x) ? 1.0 : 0.0;
      const double d = s.values(r, c) - y;
      acc += d * d;
    }
  return acc / (double(s.h) * s.w);
}

/// Negative log-softmax of the target cell's self-anchored similarity over all
/// cells, at the given temperature.
inline double contrastive_loss_baseline(const FeatureMap& f, GridPoint target,
                                        double temperature) {
  if (target.x < 0 || target.x >= f.w || target.y < 0 || target.y >= f.h)
    throw Error("center-out-of-bounds", "contrastive target outside map");
  if (!(temperature > 0.0)) throw Error("invalid-temperature", "temperature must be > 0");
  VectorXd anchor = f.descriptor(target.y, target.x);
  SimilarityMap s = cosine_similarity_map(f, anchor);
  const double zt = s.values(target.y, target.x) / temperature;
  double zmax = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < s.h; ++r)
    for (int c = 0; c < s.w; ++c) zmax = std::max(zmax, s.values(r, c) / temperature);
  double sum = 0.0;
  for (int r = 0; r < s.h; ++r)
    for (int c = 0; c < s.w; ++c) sum += std::exp(s.values(r, c) / temperature - zmax);
  return zmax + std::log(sum) - zt;
}

// ---------------------------------------------------------------------------
// Gradient entry points for training. F is a decoded feature matrix
// (dim x cells); the anchor is F's own column at the snapped landmark cell.
// Both losses differentiate through the cosine normalization; gradients
// accumulate into d_F (+=), scaled by `scale` (e.g. 1/batch).
// ---------------------------------------------------------------------------

namespace detail {
/// Per-cell cosine similarity against column `anchor`. norms[j] is the raw
/// column norm (0 for zero cells, which read as similarity 0).
inline VectorXd cosine_cells(const MatrixXd& F, int anchor, VectorXd& norms) {
  const Eigen::Index m = F.cols();
  norms = F.colwise().norm();
  const double na = norms[anchor];
  if (na == 0.0) throw Error("zero-anchor", "anchor cell has zero descriptor");
  const double na_f = std::max(na, kNormFloor);
  VectorXd s = F.transpose() * F.col(anchor);
  for (Eigen::Index j = 0; j < m; ++j)
    s[j] = (norms[j] == 0.0) ? 0.0 : s[j] / (std::max(norms[j], kNormFloor) * na_f);
  return s;
}

/// Given dL/ds = g, accumulates dL/dF. The anchor column receives gradient
/// both as a map cell and through every cell's normalization against it.
inline void cosine_cells_backward(const MatrixXd& F, int anchor, const VectorXd& norms,
                                  const VectorXd& s, const VectorXd& g, MatrixXd& d_F) {
  const Eigen::Index m = F.cols();
  const double na_f = std::max(norms[anchor], kNormFloor);
  VectorXd coef_a(m);   // weight of the anchor vector in d f_j
  VectorXd coef_f(m);   // weight of f_j itself in d f_j
  VectorXd coef_fa(m);  // weight of f_j in d anchor
  double coef_aa = 0.0; // weight of anchor in d anchor
  for (Eigen::Index j = 0; j < m; ++j) {
    if (norms[j] == 0.0) {
      coef_a[j] = coef_f[j] = coef_fa[j] = 0.0;
      continue;
    }
    const double nj = std::max(norms[j], kNormFloor);
    coef_a[j] = g[j] / (nj * na_f);
    coef_f[j] = -g[j] * s[j] / (nj * nj);
    coef_fa[j] = g[j] / (nj * na_f);
    coef_aa -= g[j] * s[j] / (na_f * na_f);
  }
  d_F.noalias() += F.col(anchor) * coef_a.transpose();
  d_F += F * coef_f.asDiagonal();
  VectorXd d_anchor = F * coef_fa + coef_aa * F.col(anchor);
  d_F.col(anchor) += d_anchor;
}
}  // namespace detail

/// MSE between the anchored similarity map and `target` (flattened cells).
/// Returns the loss term; adds scale * dL/dF into d_F.
inline double cosine_mse_loss_grad(const MatrixXd& F, int anchor, const VectorXd& target,
                                   double scale, MatrixXd& d_F) {
  if (target.size() != F.cols())
    throw Error("map-shape-mismatch", "target cells do not match feature cells");
  VectorXd norms;
  VectorXd s = detail::cosine_cells(F, anchor, norms);
  VectorXd diff = s - target;
  const double inv_m = 1.0 / double(F.cols());
  VectorXd g = (2.0 * inv_m * scale) * diff;
  detail::cosine_cells_backward(F, anchor, norms, s, g, d_F);
  return diff.squaredNorm() * inv_m;
}

/// Contrastive: -log softmax(s / temperature) at target_idx, anchored at the
/// target cell itself. Returns the loss; adds scale * dL/dF into d_F.
inline double contrastive_loss_grad(const MatrixXd& F, int target_idx, double temperature,
                                    double scale, MatrixXd& d_F) {
  if (!(temperature > 0.0)) throw Error("invalid-temperature", "temperature must be > 0");
  VectorXd norms;
  VectorXd s = detail::cosine_cells(F, target_idx, norms);
  VectorXd z = s / temperature;
  const double zmax = z.maxCoeff();
  VectorXd p = (z.array() - zmax).exp();
  const double sum = p.sum();
  p /= sum;
  const double loss = zmax + std::log(sum) - z[target_idx];
  VectorXd g = p;
  g[target_idx] -= 1.0;
  g *= scale / temperature;
  detail::cosine_cells_backward(F, target_idx, norms, s, g, d_F);
  return loss;
}

/// One-hot-MSE baseline gradient: same anchored similarity map, target is the
/// indicator of target_idx.
inline double onehot_mse_loss_grad(const MatrixXd& F, int target_idx, double scale,
                                   MatrixXd& d_F) {
  VectorXd target = VectorXd::Zero(F.cols());
  target[target_idx] = 1.0;
  return cosine_mse_loss_grad(F, target_idx, target, scale, d_F);
}

}  // namespace fmosd
