// Core domain types shared by every module: images, landmarks, feature maps,
// similarity maps, and the coordinate transforms that tie them together.
//
// Conventions (used consistently across the whole library):
//   - origin at the top-left pixel center, x rightward (column), y downward (row)
//   - linear cell index j = row * width + col
//   - continuous coordinates snap to grid indices with round-half-up per axis

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fmosd {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Error with a stable machine-readable code ("zero-anchor", "k-too-large", ...)
/// in addition to the human-readable message.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

/// 2D point, continuous coordinates. x is the column axis, y the row axis.
struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Integer grid cell. x is the column index, y the row index.
struct GridPoint {
  int x = 0;
  int y = 0;

  friend bool operator==(const GridPoint&, const GridPoint&) = default;
};

inline double euclidean_dist(Point a, Point b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

inline double euclidean_dist(GridPoint a, GridPoint b) {
  return std::hypot(double(a.x - b.x), double(a.y - b.y));
}

/// Round-half-up snap used whenever a continuous coordinate has to address a
/// discrete grid cell.
inline int snap_index(double v) { return static_cast<int>(std::floor(v + 0.5)); }

inline GridPoint snap_point(Point p) { return GridPoint{snap_index(p.x), snap_index(p.y)}; }

inline int clamp_index(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

/// Affine scale-plus-offset map from a feature grid into the coordinate frame
/// of its source image: image = feature * scale + offset.
struct CoordTransform {
  double scale = 1.0;
  double dx = 0.0;
  double dy = 0.0;

  Point to_image(Point p) const { return Point{p.x * scale + dx, p.y * scale + dy}; }
  Point to_feature(Point p) const { return Point{(p.x - dx) / scale, (p.y - dy) / scale}; }

  /// outer(inner(p)) as a single transform.
  CoordTransform compose(const CoordTransform& inner) const {
    return CoordTransform{scale * inner.scale, inner.dx * scale + dx, inner.dy * scale + dy};
  }
};

inline Point to_feature_coords(Point p, const CoordTransform& t) { return t.to_feature(p); }
inline Point to_image_coords(Point p, const CoordTransform& t) { return t.to_image(p); }

/// Single-channel raster with intensities in [0,1] and optional isotropic
/// pixel spacing. pixels(r, c) is the intensity at row r, column c.
struct ImageGrid {
  int height = 0;
  int width = 0;
  MatrixXd pixels;  // height x width
  std::optional<double> spacing_mm;

  static ImageGrid zeros(int h, int w) {
    ImageGrid g;
    g.height = h;
    g.width = w;
    g.pixels = MatrixXd::Zero(h, w);
    return g;
  }

  double at(int r, int c) const { return pixels(r, c); }

  void validate() const {
    if (height < 1 || width < 1) throw Error("invalid-image", "image must be at least 1x1");
    if (pixels.rows() != height || pixels.cols() != width)
      throw Error("invalid-image", "pixel buffer does not match declared size");
    if (!pixels.allFinite()) throw Error("invalid-image", "non-finite intensity");
    if (spacing_mm && *spacing_mm <= 0.0)
      throw Error("invalid-image", "spacing_mm must be positive");
  }

  /// Bilinear sample at a continuous position; zero outside the raster.
  double sample(double x, double y) const {
    if (x < 0.0 || y < 0.0 || x > width - 1.0 || y > height - 1.0) return 0.0;
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    int x1 = x0 + 1 < width ? x0 + 1 : x0;
    int y1 = y0 + 1 < height ? y0 + 1 : y0;
    double tx = x - x0;
    double ty = y - y0;
    double top = pixels(y0, x0) * (1.0 - tx) + pixels(y0, x1) * tx;
    double bot = pixels(y1, x0) * (1.0 - tx) + pixels(y1, x1) * tx;
    return top * (1.0 - ty) + bot * ty;
  }
};

/// Ordered list of named-by-index 2D landmarks in image pixel coordinates.
struct LandmarkSet {
  std::vector<Point> points;

  int count() const { return static_cast<int>(points.size()); }

  void validate_within(int height, int width) const {
    if (points.empty()) throw Error("invalid-landmarks", "landmark set must not be empty");
    for (size_t i = 0; i < points.size(); ++i) {
      const Point& p = points[i];
      if (!std::isfinite(p.x) || !std::isfinite(p.y))
        throw Error("invalid-landmarks", "non-finite coordinate at index " + std::to_string(i));
      if (p.x < 0.0 || p.y < 0.0 || p.x > width - 1.0 || p.y > height - 1.0)
        throw Error("invalid-landmarks",
                    "landmark " + std::to_string(i) + " outside image bounds");
    }
  }

  void validate_within(const ImageGrid& img) const { validate_within(img.height, img.width); }
};

/// Dense grid of D-dimensional descriptors plus the transform into the source
/// image frame. Storage is one column per cell: data.col(r * w + c) is the
/// descriptor of cell (r, c); this keeps descriptors contiguous and makes
/// per-row blocks of cells addressable as contiguous column ranges.
struct FeatureMap {
  int h = 0;
  int w = 0;
  int dim = 0;
  MatrixXd data;  // dim x (h*w)
  CoordTransform transform;

  static FeatureMap zeros(int h, int w, int dim) {
    FeatureMap f;
    f.h = h;
    f.w = w;
    f.dim = dim;
    f.data = MatrixXd::Zero(dim, static_cast<Eigen::Index>(h) * w);
    return f;
  }

  int cells() const { return h * w; }
  int index(int r, int c) const { return r * w + c; }

  Eigen::Ref<const VectorXd> descriptor(int r, int c) const { return data.col(index(r, c)); }
  Eigen::Ref<const VectorXd> descriptor(GridPoint p) const { return data.col(index(p.y, p.x)); }

  bool contains(GridPoint p) const { return p.x >= 0 && p.y >= 0 && p.x < w && p.y < h; }
};

/// Scalar grid associated with one anchor landmark: either a cosine similarity
/// map (values in [-1,1]) or a Gaussian target map (values in (0,1]).
struct SimilarityMap {
  int h = 0;
  int w = 0;
  MatrixXd values;  // h x w
  int anchor = -1;  // landmark index this map belongs to, -1 if unbound

  static SimilarityMap zeros(int h, int w) {
    SimilarityMap s;
    s.h = h;
    s.w = w;
    s.values = MatrixXd::Zero(h, w);
    return s;
  }

  double at(int r, int c) const { return values(r, c); }
};

}  // namespace fmosd
