// End-to-end orchestration: template augmentation, decoder training, and the
// coarse-to-fine detector.
//
// Training sees exactly one labeled image. It is augmented aug_count times by
// random affines; the frozen backbone features of every augmented sample are
// precomputed once. The global decoder trains on whole (downsampled) samples;
// the local decoder trains on fixed-size crops around jittered landmark
// positions so it learns off-center matching, mirroring inference where the
// coarse stage's guess is imperfect.
//
// Detection: downsample the query, decode global features, run bidirectional
// matching per landmark against the cached template features (coarse stage);
// then crop the full-resolution query around each coarse point, decode local
// features, fuse them with the geometrically corresponding global region, and
// re-match inside the crop (fine stage). All grid results are carried back to
// original-resolution pixels through the recorded transforms and clamped to
// the image bounds.

#pragma once

#include "fmosd/backbone.hpp"
#include "fmosd/core.hpp"
#include "fmosd/decoders.hpp"
#include "fmosd/matching.hpp"
#include "fmosd/nn.hpp"
#include "fmosd/rng.hpp"
#include "fmosd/serial.hpp"
#include "fmosd/simloss.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <utility>
#include <vector>

namespace fmosd {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct AugRanges {
  double shift_frac = 0.10;  // +- fraction of each image side
  double scale_min = 0.9;
  double scale_max = 1.1;
  double rotate_deg = 10.0;  // +- degrees about the image center
};

enum class LossKind { distance_aware, onehot_mse, contrastive };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::distance_aware: return "distance-aware";
    case LossKind::onehot_mse: return "onehot-mse";
    case LossKind::contrastive: return "contrastive";
  }
  return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "distance-aware") return LossKind::distance_aware;
  if (s == "onehot-mse") return LossKind::onehot_mse;
  if (s == "contrastive") return LossKind::contrastive;
  throw Error("parse-error", "unknown loss kind '" + s + "'");
}

struct TrainConfig {
  double lr = 2e-4;
  int batch = 4;
  int iters_global = 20000;
  int iters_local = 1000;
  double sigma_global = 5.0;
  double sigma_local = 2.0;
  int aug_count = 500;
  AugRanges aug_ranges;
  std::uint64_t seed = 0;
  int downsample_target = 224;
  int crop_size = 224;
  int decoder_dim = kDefaultDecoderDim;
  int local_jitter_px = 16;
  LossKind loss = LossKind::distance_aware;
  double temperature = 0.07;  // contrastive baseline only

  void validate() const {
    if (!(lr > 0.0)) throw Error("invalid-train-config", "lr must be > 0");
    if (batch < 1 || aug_count < 1)
      throw Error("invalid-train-config", "batch and aug_count must be >= 1");
    if (iters_global < 0 || iters_local < 0)
      throw Error("invalid-train-config", "iteration counts must be >= 0");
    if (!(sigma_global > 0.0) || !(sigma_local > 0.0))
      throw Error("invalid-train-config", "sigma values must be > 0");
    if (downsample_target < 1 || crop_size < 1 || decoder_dim < 1)
      throw Error("invalid-train-config", "sizes must be >= 1");
    if (local_jitter_px < 0)
      throw Error("invalid-train-config", "local_jitter_px must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Affine warps
// ---------------------------------------------------------------------------

/// p' = A p + b on image points.
struct Affine2D {
  double a00 = 1, a01 = 0, a10 = 0, a11 = 1;
  double tx = 0, ty = 0;

  Point apply(Point p) const {
    return Point{a00 * p.x + a01 * p.y + tx, a10 * p.x + a11 * p.y + ty};
  }

  Affine2D inverse() const {
    const double det = a00 * a11 - a01 * a10;
    if (std::abs(det) < 1e-12) throw Error("augmentation-degenerate", "singular affine");
    Affine2D inv;
    inv.a00 = a11 / det;
    inv.a01 = -a01 / det;
    inv.a10 = -a10 / det;
    inv.a11 = a00 / det;
    inv.tx = -(inv.a00 * tx + inv.a01 * ty);
    inv.ty = -(inv.a10 * tx + inv.a11 * ty);
    return inv;
  }

  /// Rotate (counter-clockwise in x-right/y-down index coordinates) and scale
  /// about `center`, then translate by (shift_x, shift_y).
  static Affine2D shift_scale_rotate(double shift_x, double shift_y, double scale,
                                     double rot_deg, Point center) {
    const double th = rot_deg * std::numbers::pi / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    Affine2D a;
    a.a00 = scale * c;
    a.a01 = -scale * s;
    a.a10 = scale * s;
    a.a11 = scale * c;
    a.tx = center.x - (a.a00 * center.x + a.a01 * center.y) + shift_x;
    a.ty = center.y - (a.a10 * center.x + a.a11 * center.y) + shift_y;
    return a;
  }
};

/// Backward warp with bilinear sampling; out-of-source pixels read as 0.
inline ImageGrid warp_affine(const ImageGrid& img, const Affine2D& fwd) {
  const Affine2D inv = fwd.inverse();
  ImageGrid out = ImageGrid::zeros(img.height, img.width);
  out.spacing_mm = img.spacing_mm;
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) {
      const Point src = inv.apply(Point{double(c), double(r)});
      out.pixels(r, c) = img.sample(src.x, src.y);
    }
  return out;
}

/// One random augmentation affine. Draw order is fixed (shift_x, shift_y,
/// scale, rotation) so seeded streams replay identically.
inline Affine2D make_augment_affine(Rng& rng, const AugRanges& ranges, int width,
                                    int height) {
  const double sx = rng.uniform(-ranges.shift_frac, ranges.shift_frac) * width;
  const double sy = rng.uniform(-ranges.shift_frac, ranges.shift_frac) * height;
  const double sc = rng.uniform(ranges.scale_min, ranges.scale_max);
  const double rot = rng.uniform(-ranges.rotate_deg, ranges.rotate_deg);
  const Point center{(width - 1) / 2.0, (height - 1) / 2.0};
  return Affine2D::shift_scale_rotate(sx, sy, sc, rot, center);
}

inline std::vector<std::pair<ImageGrid, LandmarkSet>> augment_template(
    const ImageGrid& img, const LandmarkSet& lms, const TrainConfig& cfg) {
  cfg.validate();
  lms.validate_within(img);
  Rng rng(mix_seed(cfg.seed, 0xA46ull));
  std::vector<std::pair<ImageGrid, LandmarkSet>> out;
  out.reserve(static_cast<size_t>(cfg.aug_count));
  for (int i = 0; i < cfg.aug_count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const Affine2D a = make_augment_affine(rng, cfg.aug_ranges, img.width, img.height);
      LandmarkSet moved;
      moved.points.reserve(lms.points.size());
      bool ok = true;
      for (const Point& p : lms.points) {
        const Point q = a.apply(p);
        if (q.x < 0.0 || q.x > img.width - 1 || q.y < 0.0 || q.y > img.height - 1) {
          ok = false;
          break;
        }
        moved.points.push_back(q);
      }
      if (!ok) continue;
      out.emplace_back(warp_affine(img, a), std::move(moved));
      placed = true;
    }
    if (!placed)
      throw Error("augmentation-degenerate",
                  "sample " + std::to_string(i) + ": landmarks leave the image in all retries");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Geometry helpers shared by training and inference
// ---------------------------------------------------------------------------

/// Separable bilinear image resize (half-pixel centers, clamp-to-edge).
inline ImageGrid resize_image(const ImageGrid& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw Error("invalid-upsample-target", "bad resize target");
  if (out_h == img.height && out_w == img.width) return img;
  const auto ty = detail::make_linear_table(img.height, out_h);
  const auto tx = detail::make_linear_table(img.width, out_w);
  ImageGrid out = ImageGrid::zeros(out_h, out_w);
  out.spacing_mm = img.spacing_mm;
  for (int r = 0; r < out_h; ++r) {
    const double fy = ty.frac[r];
    for (int c = 0; c < out_w; ++c) {
      const double fx = tx.frac[c];
      const double top = (1.0 - fx) * img.pixels(ty.lo[r], tx.lo[c]) +
                         fx * img.pixels(ty.lo[r], tx.hi[c]);
      const double bot = (1.0 - fx) * img.pixels(ty.hi[r], tx.lo[c]) +
                         fx * img.pixels(ty.hi[r], tx.hi[c]);
      out.pixels(r, c) = (1.0 - fy) * top + fy * bot;
    }
  }
  return out;
}

/// Aspect-preserving resize so the short side equals `target`; the long side
/// rounds to the nearest integer. Returns the image and the transform from
/// downsampled to original coordinates (scalar scale = short side ratio).
inline std::pair<ImageGrid, CoordTransform> downsample_short_side(const ImageGrid& img,
                                                                  int target = 224) {
  if (target < 1) throw Error("invalid-train-config", "downsample target must be >= 1");
  const int short_side = std::min(img.height, img.width);
  const double s = double(short_side) / target;
  int out_h, out_w;
  if (img.height <= img.width) {
    out_h = target;
    out_w = snap_index(double(img.width) * target / short_side);
  } else {
    out_w = target;
    out_h = snap_index(double(img.height) * target / short_side);
  }
  CoordTransform t{s, (s - 1.0) / 2.0, (s - 1.0) / 2.0};
  return {resize_image(img, out_h, out_w), t};
}

/// Fixed-size window centered (after clamping) on `center`; zero-padded when
/// the image is smaller than the window. Transform maps crop -> original.
///
/// `lattice` > 1 snaps the crop origin to that pixel lattice. The pipeline
/// passes the backbone stride so template and query crops sample the same
/// patch grid: their origins then differ by whole grid steps and a cell's
/// receptive field covers identical source pixels in both crops, instead of
/// being bilinearly out of phase by the sub-stride part of the offset.
inline std::pair<ImageGrid, CoordTransform> crop_local_region(const ImageGrid& img,
                                                              Point center, int size = 224,
                                                              int lattice = 1) {
  if (size < 1) throw Error("invalid-train-config", "crop size must be >= 1");
  if (lattice < 1) throw Error("invalid-train-config", "lattice must be >= 1");
  const int max_x = std::max(0, img.width - size);
  const int max_y = std::max(0, img.height - size);
  auto snap_to_lattice = [lattice](double v) {
    const int raw = snap_index(v);
    if (lattice == 1) return raw;
    return lattice * snap_index(double(raw) / lattice);
  };
  const int off_x = std::clamp(snap_to_lattice(center.x - (size - 1) / 2.0), 0, max_x);
  const int off_y = std::clamp(snap_to_lattice(center.y - (size - 1) / 2.0), 0, max_y);
  ImageGrid crop = ImageGrid::zeros(size, size);
  crop.spacing_mm = img.spacing_mm;
  const int copy_h = std::min(size, img.height - off_y);
  const int copy_w = std::min(size, img.width - off_x);
  crop.pixels.topLeftCorner(copy_h, copy_w) = img.pixels.block(off_y, off_x, copy_h, copy_w);
  return {std::move(crop), CoordTransform{1.0, double(off_x), double(off_y)}};
}

/// Bilinear sample of a feature grid at a continuous grid position,
/// clamp-to-edge.
inline VectorXd bilinear_feature_sample(const FeatureMap& f, double x, double y) {
  const double cx = std::clamp(x, 0.0, double(f.w - 1));
  const double cy = std::clamp(y, 0.0, double(f.h - 1));
  const int x0 = static_cast<int>(std::floor(cx));
  const int y0 = static_cast<int>(std::floor(cy));
  const int x1 = std::min(x0 + 1, f.w - 1);
  const int y1 = std::min(y0 + 1, f.h - 1);
  const double fx = cx - x0, fy = cy - y0;
  return (1.0 - fy) * ((1.0 - fx) * f.data.col(f.index(y0, x0)) +
                       fx * f.data.col(f.index(y0, x1))) +
         fy * ((1.0 - fx) * f.data.col(f.index(y1, x0)) +
               fx * f.data.col(f.index(y1, x1)));
}

/// The sub-window of a feature map geometrically corresponding to a crop,
/// resampled to size x size. `crop_to_orig` maps crop px -> original px;
/// `map_to_orig` maps the feature map's own frame -> original px.
inline FeatureMap global_region_for_crop(const FeatureMap& f, const CoordTransform& crop_to_orig,
                                         const CoordTransform& map_to_orig, int size) {
  FeatureMap out;
  out.h = size;
  out.w = size;
  out.dim = f.dim;
  out.data.resize(f.dim, static_cast<Eigen::Index>(size) * size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      const Point orig = crop_to_orig.to_image(Point{double(c), double(r)});
      const Point g = map_to_orig.to_feature(orig);
      out.data.col(out.index(r, c)) = bilinear_feature_sample(f, g.x, g.y);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One augmented training sample with its frozen backbone features.
struct AugSample {
  ImageGrid image;               // augmented, original resolution
  LandmarkSet lms;               // in augmented-image px
  ImageGrid down;                // short-side-downsampled
  CoordTransform down_to_orig;
  FeatureMap feats;              // backbone features of `down`
  std::vector<Point> lm_down;    // landmarks in downsampled px
};

inline std::vector<AugSample> prepare_training_set(const ImageGrid& tmpl,
                                                   const LandmarkSet& lms,
                                                   const BackboneSpec& backbone,
                                                   const TrainConfig& cfg) {
  auto augmented = augment_template(tmpl, lms, cfg);
  std::vector<AugSample> out;
  out.reserve(augmented.size());
  for (auto& [img, moved] : augmented) {
    AugSample s;
    auto [down, t] = downsample_short_side(img, cfg.downsample_target);
    s.down = std::move(down);
    s.down_to_orig = t;
    s.feats = extract_features(s.down, backbone);
    s.lm_down.reserve(moved.points.size());
    for (const Point& p : moved.points) s.lm_down.push_back(t.to_feature(p));
    s.image = std::move(img);
    s.lms = std::move(moved);
    out.push_back(std::move(s));
  }
  return out;
}

namespace detail {
struct DecoderOptimizer {
  AdamConfig adam;
  AdamState<MatrixXd> w1, w2;
  AdamState<VectorXd> b1, b2;
  long t = 0;

  explicit DecoderOptimizer(double lr) { adam.lr = lr; }

  void step(DecoderParams& p, const DecoderGrads& g) {
    ++t;
    w1.step(p.w1, g.w1, t, adam);
    b1.step(p.b1, g.b1, t, adam);
    w2.step(p.w2, g.w2, t, adam);
    b2.step(p.b2, g.b2, t, adam);
  }
};

inline GridPoint clamp_cell(GridPoint p, int h, int w) {
  return GridPoint{std::clamp(p.x, 0, w - 1), std::clamp(p.y, 0, h - 1)};
}

/// Loss + dL/dF for one supervised map under the configured loss kind.
inline double map_loss_grad(const TrainConfig& cfg, const MatrixXd& F, int h, int w,
                            GridPoint cell, double sigma, double scale, MatrixXd& d_F) {
  const int anchor = cell.y * w + cell.x;
  switch (cfg.loss) {
    case LossKind::distance_aware: {
      VectorXd y = gaussian_cells(h, w, cell, sigma);
      return cosine_mse_loss_grad(F, anchor, y, scale, d_F);
    }
    case LossKind::onehot_mse:
      return onehot_mse_loss_grad(F, anchor, scale, d_F);
    case LossKind::contrastive:
      return contrastive_loss_grad(F, anchor, cfg.temperature, scale, d_F);
  }
  throw Error("invalid-train-config", "unknown loss kind");
}
}  // namespace detail

/// Trains the global decoder on whole downsampled samples. History gets one
/// batch-loss entry per iteration.
inline DecoderParams train_global_decoder(const std::vector<AugSample>& samples,
                                          const TrainConfig& cfg,
                                          std::vector<double>& history) {
  cfg.validate();
  if (samples.empty()) throw Error("invalid-train-config", "empty training set");
  const int in_dim = samples.front().feats.dim;
  DecoderParams p = init_decoder(DecoderStage::global, in_dim, cfg.decoder_dim,
                                 mix_seed(cfg.seed, 0x9107ull));
  detail::DecoderOptimizer opt(cfg.lr);
  Rng rng(mix_seed(cfg.seed, 0x97261ull));
  const int n_lm = static_cast<int>(samples.front().lm_down.size());
  history.clear();
  history.reserve(static_cast<size_t>(cfg.iters_global));
  for (int it = 1; it <= cfg.iters_global; ++it) {
    DecoderGrads grads = DecoderGrads::zeros_like(p);
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const AugSample& s =
          samples[static_cast<size_t>(rng.uniform_int(static_cast<int>(samples.size())))];
      DecodeTape tape;
      FeatureMap F = global_decode(s.feats, p, s.down.height, s.down.width, &tape);
      MatrixXd d_F = MatrixXd::Zero(F.dim, F.cells());
      const double scale = 1.0 / (double(cfg.batch) * n_lm);
      for (int i = 0; i < n_lm; ++i) {
        const GridPoint cell = detail::clamp_cell(snap_point(s.lm_down[i]), F.h, F.w);
        loss += scale * detail::map_loss_grad(cfg, F.data, F.h, F.w, cell,
                                              cfg.sigma_global, scale, d_F);
      }
      decode_backward(p, tape, d_F, grads);
    }
    if (!std::isfinite(loss))
      throw Error("training-diverged", "global step " + std::to_string(it));
    opt.step(p, grads);
    history.push_back(loss);
  }
  return p;
}

/// Trains the local decoder on per-landmark crops around jittered landmark
/// positions. When a trained global decoder is supplied, supervision is applied
/// to the fused map (local features + resampled global region) so the local
/// stage optimizes exactly what the detector matches at inference and learns to
/// correct the global map's residual errors; the fusion is an elementwise sum,
/// so gradients reach the local decoder unchanged. Without one, the pure local
/// features are supervised directly.
inline DecoderParams train_local_decoder(const std::vector<AugSample>& samples,
                                         const BackboneSpec& backbone,
                                         const TrainConfig& cfg,
                                         std::vector<double>& history,
                                         const DecoderParams* dec_global = nullptr) {
  cfg.validate();
  if (samples.empty()) throw Error("invalid-train-config", "empty training set");
  backbone.validate();
  DecoderParams p;
  {
    // Probe one crop for the backbone channel count.
    auto [crop, t] = crop_local_region(samples.front().image,
                                       samples.front().lms.points.at(0), cfg.crop_size,
                                       backbone.stride);
    FeatureMap probe = extract_features(crop, backbone);
    p = init_decoder(DecoderStage::local, probe.dim, cfg.decoder_dim,
                     mix_seed(cfg.seed, 0x1907ull));
  }
  detail::DecoderOptimizer opt(cfg.lr);
  Rng rng(mix_seed(cfg.seed, 0x17261ull));
  const int n_lm = static_cast<int>(samples.front().lms.points.size());
  const double jit = double(cfg.local_jitter_px);
  // Per-sample decoded global maps, built on first use. Only needed for fused
  // supervision; the raw backbone features are already cached in the samples.
  std::vector<FeatureMap> global_maps(samples.size());
  auto global_map_for = [&](size_t idx) -> const FeatureMap& {
    FeatureMap& g = global_maps[idx];
    if (g.h == 0)
      g = global_decode(samples[idx].feats, *dec_global, samples[idx].down.height,
                        samples[idx].down.width);
    return g;
  };
  history.clear();
  history.reserve(static_cast<size_t>(cfg.iters_local));
  for (int it = 1; it <= cfg.iters_local; ++it) {
    DecoderGrads grads = DecoderGrads::zeros_like(p);
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const size_t si = static_cast<size_t>(rng.uniform_int(static_cast<int>(samples.size())));
      const AugSample& s = samples[si];
      const int lm = rng.uniform_int(n_lm);
      const Point gt = s.lms.points[static_cast<size_t>(lm)];
      const Point center{gt.x + rng.uniform(-jit, jit), gt.y + rng.uniform(-jit, jit)};
      auto [crop, t] = crop_local_region(s.image, center, cfg.crop_size, backbone.stride);
      FeatureMap feats = extract_features(crop, backbone);
      DecodeTape tape;
      FeatureMap F = local_decode(feats, p, cfg.crop_size, cfg.crop_size, &tape);
      if (dec_global != nullptr) {
        const FeatureMap region =
            global_region_for_crop(global_map_for(si), t, s.down_to_orig, cfg.crop_size);
        F = fuse_features(F, region);
      }
      const Point lm_crop = t.to_feature(gt);  // crop px (scale 1)
      const GridPoint cell = detail::clamp_cell(snap_point(lm_crop), F.h, F.w);
      MatrixXd d_F = MatrixXd::Zero(F.dim, F.cells());
      const double scale = 1.0 / double(cfg.batch);
      loss += scale * detail::map_loss_grad(cfg, F.data, F.h, F.w, cell, cfg.sigma_local,
                                            scale, d_F);
      decode_backward(p, tape, d_F, grads);
    }
    if (!std::isfinite(loss))
      throw Error("training-diverged", "local step " + std::to_string(it));
    opt.step(p, grads);
    history.push_back(loss);
  }
  return p;
}

struct TrainedModel {
  BackboneSpec backbone;
  TrainConfig cfg;
  DecoderParams dec_global;
  DecoderParams dec_local;
  std::vector<double> loss_global;
  std::vector<double> loss_local;
};

inline TrainedModel train_decoders(const ImageGrid& tmpl, const LandmarkSet& lms,
                                   const BackboneSpec& backbone, const TrainConfig& cfg) {
  backbone.validate();
  cfg.validate();
  TrainedModel m;
  m.backbone = backbone;
  m.cfg = cfg;
  auto samples = prepare_training_set(tmpl, lms, backbone, cfg);
  m.dec_global = train_global_decoder(samples, cfg, m.loss_global);
  m.dec_local = train_local_decoder(samples, backbone, cfg, m.loss_local, &m.dec_global);
  return m;
}

// ---------------------------------------------------------------------------
// Template state (immutable after construction) and detection
// ---------------------------------------------------------------------------

struct TemplateState {
  BackboneSpec backbone;
  TrainConfig cfg;
  DecoderParams dec_global;
  DecoderParams dec_local;
  ImageGrid image;        // template, original resolution
  LandmarkSet lms;        // original-resolution px

  ImageGrid down;
  CoordTransform down_to_orig;
  FeatureMap raw_global;             // backbone features of `down`
  FeatureMap feat_global;            // decoded global features (identity transform)
  std::vector<Point> lm_down;        // landmarks in downsampled px
  std::vector<GridPoint> lm_cells;   // snapped onto the decoded global grid

  struct LocalTemplate {
    CoordTransform crop_to_orig;
    FeatureMap fused;       // local + corresponding global region
    Point lm_crop;          // landmark in crop px
    GridPoint lm_cell;      // snapped
  };
  std::vector<LocalTemplate> locals;  // one per landmark
};

inline TemplateState build_template_state(const ImageGrid& tmpl, const LandmarkSet& lms,
                                          const TrainedModel& model) {
  lms.validate_within(tmpl);
  TemplateState st;
  st.backbone = model.backbone;
  st.cfg = model.cfg;
  st.dec_global = model.dec_global;
  st.dec_local = model.dec_local;
  st.image = tmpl;
  st.lms = lms;
  auto [down, t] = downsample_short_side(tmpl, st.cfg.downsample_target);
  st.down = std::move(down);
  st.down_to_orig = t;
  st.raw_global = extract_features(st.down, st.backbone);
  st.feat_global = global_decode(st.raw_global, st.dec_global, st.down.height, st.down.width);
  for (const Point& p : lms.points) {
    const Point d = t.to_feature(p);
    st.lm_down.push_back(d);
    st.lm_cells.push_back(
        detail::clamp_cell(snap_point(d), st.feat_global.h, st.feat_global.w));
  }
  st.locals.reserve(lms.points.size());
  for (const Point& p : lms.points) {
    TemplateState::LocalTemplate lt;
    auto [crop, tc] = crop_local_region(tmpl, p, st.cfg.crop_size, st.backbone.stride);
    lt.crop_to_orig = tc;
    FeatureMap local_feats = extract_features(crop, st.backbone);
    FeatureMap decoded = local_decode(local_feats, st.dec_local, st.cfg.crop_size,
                                      st.cfg.crop_size);
    FeatureMap region = global_region_for_crop(st.feat_global, tc, st.down_to_orig,
                                               st.cfg.crop_size);
    lt.fused = fuse_features(decoded, region);
    lt.lm_crop = tc.to_feature(p);
    lt.lm_cell = detail::clamp_cell(snap_point(lt.lm_crop), lt.fused.h, lt.fused.w);
    st.locals.push_back(std::move(lt));
  }
  return st;
}

struct DetectOptions {
  bool use_global_decoder = true;  // false: match raw backbone features (coarse)
  bool use_local_stage = true;     // false: stop after the coarse stage
  bool use_bdm = true;             // false: plain argmax (k = 1)
};

struct DetectionResult {
  std::vector<Point> points;         // final predictions, original query px
  std::vector<Point> coarse_points;  // coarse stage, original query px
  std::vector<MatchResult> coarse_diag;
  std::vector<MatchResult> fine_diag;  // empty when the local stage is off
};

namespace detail {
inline int effective_k(const MatchConfig& cfg, int cells, const char* stage) {
  if (cfg.k <= cells) return cfg.k;
  std::cerr << "[fmosd] warning: k=" << cfg.k << " exceeds " << cells << " " << stage
            << " cells; clamping\n";
  return cells;
}

inline Point clamp_to_image(Point p, const ImageGrid& img) {
  return Point{std::clamp(p.x, 0.0, double(img.width - 1)),
               std::clamp(p.y, 0.0, double(img.height - 1))};
}

/// Sub-cell peak localization: fits a 1D parabola per axis to the cosine
/// similarity (against `anchor`) at the winning cell and its neighbours and
/// returns the matched cell plus the fractional peak offset. The offset is
/// clamped to half a cell, so which cell won stays the matcher's decision;
/// border cells and non-concave neighbourhoods fall back to the cell centre.
inline Point subcell_peak(const FeatureMap& f, const VectorXd& anchor, GridPoint cell) {
  Point p{double(cell.x), double(cell.y)};
  const SimilarityMap sm = cosine_similarity_map(f, anchor);
  if (cell.x > 0 && cell.x + 1 < f.w) {
    const double l = sm.values(cell.y, cell.x - 1);
    const double c = sm.values(cell.y, cell.x);
    const double r = sm.values(cell.y, cell.x + 1);
    const double denom = l - 2.0 * c + r;
    if (denom < 0.0) p.x += std::clamp(0.5 * (l - r) / denom, -0.5, 0.5);
  }
  if (cell.y > 0 && cell.y + 1 < f.h) {
    const double u = sm.values(cell.y - 1, cell.x);
    const double c = sm.values(cell.y, cell.x);
    const double d = sm.values(cell.y + 1, cell.x);
    const double denom = u - 2.0 * c + d;
    if (denom < 0.0) p.y += std::clamp(0.5 * (u - d) / denom, -0.5, 0.5);
  }
  return p;
}
}  // namespace detail

/// Coarse stage: bidirectional matching on whole-image (global) features.
inline DetectionResult coarse_detect(const ImageGrid& query, const TemplateState& st,
                                     const MatchConfig& match_cfg,
                                     const DetectOptions& opts = {}) {
  match_cfg.validate();
  auto [down_q, t_q] = downsample_short_side(query, st.cfg.downsample_target);
  FeatureMap raw_q = extract_features(down_q, st.backbone);

  const FeatureMap* f_t = nullptr;
  FeatureMap f_q;
  std::vector<GridPoint> cells_t;
  if (opts.use_global_decoder) {
    f_t = &st.feat_global;
    f_q = global_decode(raw_q, st.dec_global, down_q.height, down_q.width);
    cells_t = st.lm_cells;
  } else {
    f_t = &st.raw_global;
    f_q = std::move(raw_q);
    for (const Point& d : st.lm_down) {
      const Point g = st.raw_global.transform.to_feature(d);
      cells_t.push_back(detail::clamp_cell(snap_point(g), f_t->h, f_t->w));
    }
  }

  MatchConfig eff = match_cfg;
  if (!opts.use_bdm) eff.k = 1;
  eff.k = detail::effective_k(eff, f_q.cells(), "coarse");

  DetectionResult res;
  for (size_t i = 0; i < cells_t.size(); ++i) {
    MatchResult m = bdm_match(*f_t, f_q, cells_t[i], eff);
    const Point in_down = f_q.transform.to_image(
        Point{double(m.query_point.x), double(m.query_point.y)});
    const Point in_orig = t_q.to_image(in_down);
    res.coarse_points.push_back(detail::clamp_to_image(in_orig, query));
    res.coarse_diag.push_back(std::move(m));
  }
  res.points = res.coarse_points;
  return res;
}

/// Fine stage: per-landmark local crops around the coarse points, matched on
/// fused local+global features. Refines `res` in place.
inline void fine_detect(const ImageGrid& query, const TemplateState& st,
                        const MatchConfig& match_cfg, DetectionResult& res) {
  match_cfg.validate();
  auto [down_q, t_q] = downsample_short_side(query, st.cfg.downsample_target);
  FeatureMap raw_q = extract_features(down_q, st.backbone);
  FeatureMap global_q = global_decode(raw_q, st.dec_global, down_q.height, down_q.width);

  res.fine_diag.clear();
  for (size_t i = 0; i < res.coarse_points.size(); ++i) {
    auto [crop, tc] = crop_local_region(query, res.coarse_points[i], st.cfg.crop_size,
                                        st.backbone.stride);
    FeatureMap local_feats = extract_features(crop, st.backbone);
    FeatureMap decoded = local_decode(local_feats, st.dec_local, st.cfg.crop_size,
                                      st.cfg.crop_size);
    FeatureMap region = global_region_for_crop(global_q, tc, t_q, st.cfg.crop_size);
    FeatureMap fused = fuse_features(decoded, region);

    MatchConfig eff = match_cfg;
    eff.k = detail::effective_k(eff, fused.cells(), "fine");
    MatchResult m = bdm_match(st.locals[i].fused, fused, st.locals[i].lm_cell, eff);
    const auto& lt = st.locals[i];
    const VectorXd anchor = lt.fused.data.col(lt.fused.index(lt.lm_cell.y, lt.lm_cell.x));
    const Point in_crop = detail::subcell_peak(fused, anchor, m.query_point);
    res.points[i] = detail::clamp_to_image(tc.to_image(in_crop), query);
    res.fine_diag.push_back(std::move(m));
  }
}

/// Full detector: coarse stage, then (per options) the fine stage.
inline DetectionResult detect(const ImageGrid& query, const TemplateState& st,
                              const MatchConfig& match_cfg, const DetectOptions& opts = {}) {
  if (opts.use_local_stage && !opts.use_global_decoder)
    throw Error("invalid-detect-options",
                "the local stage fuses global features; enable the global decoder");
  DetectionResult res = coarse_detect(query, st, match_cfg, opts);
  if (opts.use_local_stage) fine_detect(query, st, match_cfg, res);
  return res;
}

// ---------------------------------------------------------------------------
// Trained-state bundle: a directory that reloads to a bit-exact detector.
// meta.json carries specs; tensors go in binary sidecars. The template image
// is stored as raw doubles (not an 8-bit image) so feature recomputation on
// load is bit-identical.
// ---------------------------------------------------------------------------

inline std::uint64_t train_digest(const BackboneSpec& b, const TrainConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << to_string(b.kind) << '|' << b.patch_size << '|' << b.stride << '|' << b.layer << '|'
     << to_string(b.head) << '|' << b.dim << '|' << b.noise_eps << '|' << b.seed << '|'
     << c.lr << '|' << c.batch << '|' << c.iters_global << '|' << c.iters_local << '|'
     << c.sigma_global << '|' << c.sigma_local << '|' << c.aug_count << '|'
     << c.aug_ranges.shift_frac << '|' << c.aug_ranges.scale_min << '|'
     << c.aug_ranges.scale_max << '|' << c.aug_ranges.rotate_deg << '|' << c.seed << '|'
     << c.downsample_target << '|' << c.crop_size << '|' << c.decoder_dim << '|'
     << c.local_jitter_px << '|' << to_string(c.loss) << '|' << c.temperature;
  const std::string s = os.str();
  return fnv1a_bytes(s.data(), s.size());
}

namespace detail {
inline nlohmann::json backbone_to_json(const BackboneSpec& b) {
  return {{"kind", to_string(b.kind)},     {"patch_size", b.patch_size},
          {"stride", b.stride},            {"layer", b.layer},
          {"head", to_string(b.head)},     {"dim", b.dim},
          {"noise_eps", b.noise_eps},      {"seed", b.seed}};
}

inline BackboneSpec backbone_from_json(const nlohmann::json& j) {
  BackboneSpec b;
  b.kind = backbone_kind_from_string(j.at("kind").get<std::string>());
  b.patch_size = j.at("patch_size").get<int>();
  b.stride = j.at("stride").get<int>();
  b.layer = j.at("layer").get<int>();
  b.head = head_kind_from_string(j.at("head").get<std::string>());
  b.dim = j.at("dim").get<int>();
  b.noise_eps = j.at("noise_eps").get<double>();
  b.seed = j.at("seed").get<std::uint64_t>();
  return b;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"batch", c.batch},
          {"iters_global", c.iters_global},
          {"iters_local", c.iters_local},
          {"sigma_global", c.sigma_global},
          {"sigma_local", c.sigma_local},
          {"aug_count", c.aug_count},
          {"shift_frac", c.aug_ranges.shift_frac},
          {"scale_min", c.aug_ranges.scale_min},
          {"scale_max", c.aug_ranges.scale_max},
          {"rotate_deg", c.aug_ranges.rotate_deg},
          {"seed", c.seed},
          {"downsample_target", c.downsample_target},
          {"crop_size", c.crop_size},
          {"decoder_dim", c.decoder_dim},
          {"local_jitter_px", c.local_jitter_px},
          {"loss", to_string(c.loss)},
          {"temperature", c.temperature}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.at("lr").get<double>();
  c.batch = j.at("batch").get<int>();
  c.iters_global = j.at("iters_global").get<int>();
  c.iters_local = j.at("iters_local").get<int>();
  c.sigma_global = j.at("sigma_global").get<double>();
  c.sigma_local = j.at("sigma_local").get<double>();
  c.aug_count = j.at("aug_count").get<int>();
  c.aug_ranges.shift_frac = j.at("shift_frac").get<double>();
  c.aug_ranges.scale_min = j.at("scale_min").get<double>();
  c.aug_ranges.scale_max = j.at("scale_max").get<double>();
  c.aug_ranges.rotate_deg = j.at("rotate_deg").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.downsample_target = j.at("downsample_target").get<int>();
  c.crop_size = j.at("crop_size").get<int>();
  c.decoder_dim = j.at("decoder_dim").get<int>();
  c.local_jitter_px = j.at("local_jitter_px").get<int>();
  c.loss = loss_kind_from_string(j.at("loss").get<std::string>());
  c.temperature = j.at("temperature").get<double>();
  return c;
}

inline void write_image_tensor(const std::filesystem::path& path, const ImageGrid& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io-error", "cannot write " + path.string());
  write_pod<std::uint8_t>(out, img.spacing_mm.has_value() ? 1 : 0);
  write_pod<double>(out, img.spacing_mm.value_or(0.0));
  write_matrix(out, img.pixels);
}

inline ImageGrid read_image_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("file-not-found", "cannot open " + path.string());
  const auto has_spacing = read_pod<std::uint8_t>(in);
  const double spacing = read_pod<double>(in);
  ImageGrid img;
  img.pixels = read_matrix(in);
  img.height = static_cast<int>(img.pixels.rows());
  img.width = static_cast<int>(img.pixels.cols());
  if (has_spacing) img.spacing_mm = spacing;
  img.validate();
  return img;
}
}  // namespace detail

inline void write_landmarks_csv(const std::filesystem::path& path, const LandmarkSet& lms) {
  std::ofstream out(path);
  if (!out) throw Error("io-error", "cannot write " + path.string());
  out << "index,x,y\n";
  char buf[80];
  for (size_t i = 0; i < lms.points.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", i, lms.points[i].x,
                  lms.points[i].y);
    out << buf;
  }
}

inline LandmarkSet read_landmarks_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("file-not-found", "cannot open " + path.string());
  LandmarkSet lms;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string idx, xs, ys;
    if (!std::getline(ls, idx, ',') || !std::getline(ls, xs, ',') || !std::getline(ls, ys))
      throw Error("parse-error", path.string() + ": malformed row '" + line + "'");
    if (idx == "index") continue;  // header
    try {
      const double x = std::stod(xs), y = std::stod(ys);
      if (!std::isfinite(x) || !std::isfinite(y))
        throw Error("parse-error", path.string() + ": non-finite coordinate");
      lms.points.push_back(Point{x, y});
    } catch (const std::invalid_argument&) {
      throw Error("parse-error", path.string() + ": bad number in '" + line + "'");
    }
  }
  return lms;
}

inline void save_bundle(const std::filesystem::path& dir, const TrainedModel& model,
                        const ImageGrid& tmpl, const LandmarkSet& lms) {
  std::filesystem::create_directories(dir);
  const std::uint64_t digest = train_digest(model.backbone, model.cfg);
  nlohmann::json meta = {
      {"format", "fmosd-bundle-v1"},
      {"backbone", detail::backbone_to_json(model.backbone)},
      {"train", detail::train_config_to_json(model.cfg)},
      {"landmark_count", lms.count()},
      {"config_digest", digest},
  };
  std::ofstream mf(dir / "meta.json");
  if (!mf) throw Error("io-error", "cannot write " + (dir / "meta.json").string());
  mf << meta.dump(2) << "\n";
  DecoderParams g = model.dec_global;
  DecoderParams l = model.dec_local;
  g.config_digest = digest;
  l.config_digest = digest;
  save_decoder(dir / "decoder_global.ckpt", g);
  save_decoder(dir / "decoder_local.ckpt", l);
  detail::write_image_tensor(dir / "template.bin", tmpl);
  write_landmarks_csv(dir / "landmarks.csv", lms);
}

struct Bundle {
  TrainedModel model;
  ImageGrid template_image;
  LandmarkSet template_lms;
};

inline Bundle load_bundle(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "meta.json");
  if (!mf) throw Error("file-not-found", "cannot open " + (dir / "meta.json").string());
  nlohmann::json meta;
  try {
    mf >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse-error", (dir / "meta.json").string() + ": " + e.what());
  }
  if (meta.value("format", "") != "fmosd-bundle-v1")
    throw Error("parse-error", (dir / "meta.json").string() + ": unknown bundle format");
  Bundle b;
  b.model.backbone = detail::backbone_from_json(meta.at("backbone"));
  b.model.cfg = detail::train_config_from_json(meta.at("train"));
  b.model.dec_global = load_decoder(dir / "decoder_global.ckpt");
  b.model.dec_local = load_decoder(dir / "decoder_local.ckpt");
  b.template_image = detail::read_image_tensor(dir / "template.bin");
  b.template_lms = read_landmarks_csv(dir / "landmarks.csv");
  const auto expect = meta.at("landmark_count").get<size_t>();
  if (b.template_lms.count() != expect)
    throw Error("parse-error", (dir / "landmarks.csv").string() + ": expected " +
                                   std::to_string(expect) + " landmarks, found " +
                                   std::to_string(b.template_lms.count()));
  const std::uint64_t digest = meta.at("config_digest").get<std::uint64_t>();
  if (b.model.dec_global.config_digest != digest ||
      b.model.dec_local.config_digest != digest)
    throw Error("checksum-mismatch", dir.string() + ": checkpoint/config digest mismatch");
  return b;
}

}  // namespace fmosd
