// Procedural benchmark generator: a textured template with randomly placed
// landmarks plus affine-perturbed (optionally mildly elastic) query images
// with exact ground-truth correspondences. Serves as a desk-scale stand-in
// for licensed radiograph datasets — same file layout, same evaluation path.
//
// The texture is seeded hashed-lattice value noise (three octaves), so any
// (seed, size) pair regenerates the identical dataset.

#pragma once

#include "fmosd/core.hpp"
#include "fmosd/image_io.hpp"
#include "fmosd/pipeline.hpp"
#include "fmosd/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

namespace fmosd {

struct SynthParams {
  int height = 224;
  int width = 224;
  int landmark_count = 5;
  int query_count = 50;
  double margin_px = 24.0;       // keep landmarks away from borders
  double min_separation_px = 24.0;
  AugRanges warp_ranges;         // query perturbation draw ranges
  double elastic_amp_px = 0.0;   // 0 disables the non-affine component
  double elastic_cycles = 2.0;
  double spacing_mm = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (height < 16 || width < 16) throw Error("invalid-synth-params", "image too small");
    if (landmark_count < 1) throw Error("invalid-synth-params", "need >= 1 landmark");
    if (query_count < 1) throw Error("invalid-synth-params", "need >= 1 query");
    if (margin_px < 0 || min_separation_px < 0)
      throw Error("invalid-synth-params", "margins must be >= 0");
    if (!(spacing_mm > 0)) throw Error("invalid-synth-params", "spacing must be > 0");
  }
};

namespace detail {
inline double lattice_value(int ix, int iy, std::uint64_t seed) {
  std::uint64_t h = mix_seed(seed, static_cast<std::uint64_t>(static_cast<std::uint32_t>(ix)),
                             static_cast<std::uint64_t>(static_cast<std::uint32_t>(iy)));
  return double(h >> 11) * 0x1.0p-53;
}

inline double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

/// One octave of value noise with `period` pixels per lattice cell.
inline double value_noise(double x, double y, double period, std::uint64_t seed) {
  const double fx = x / period, fy = y / period;
  const int ix = static_cast<int>(std::floor(fx));
  const int iy = static_cast<int>(std::floor(fy));
  const double tx = smooth(fx - ix), ty = smooth(fy - iy);
  const double v00 = lattice_value(ix, iy, seed);
  const double v01 = lattice_value(ix + 1, iy, seed);
  const double v10 = lattice_value(ix, iy + 1, seed);
  const double v11 = lattice_value(ix + 1, iy + 1, seed);
  return (v00 * (1 - tx) + v01 * tx) * (1 - ty) + (v10 * (1 - tx) + v11 * tx) * ty;
}
}  // namespace detail

/// Three-octave value-noise texture in [0, 1].
inline ImageGrid synth_texture(int height, int width, std::uint64_t seed) {
  ImageGrid img = ImageGrid::zeros(height, width);
  // Octave periods chosen so patch-mean content survives both working scales:
  // the coarsest octave is still visible after a 224->48 downsample, the
  // finest still varies across neighbouring full-resolution patches.
  const double periods[3] = {48.0, 24.0, 12.0};
  const double amps[3] = {0.5, 0.3, 0.2};
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      double v = 0.0;
      for (int o = 0; o < 3; ++o)
        v += amps[o] *
             detail::value_noise(c, r, periods[o], mix_seed(seed, 0xB0 + std::uint64_t(o)));
      img.pixels(r, c) = v;
    }
  return img;
}

/// Landmarks drawn uniformly inside the margin, rejecting close pairs.
inline LandmarkSet place_landmarks(const SynthParams& p) {
  Rng rng(mix_seed(p.seed, 0x1A17ull));
  LandmarkSet lms;
  const double x_lo = p.margin_px, x_hi = p.width - 1 - p.margin_px;
  const double y_lo = p.margin_px, y_hi = p.height - 1 - p.margin_px;
  if (x_hi <= x_lo || y_hi <= y_lo)
    throw Error("invalid-synth-params", "margin leaves no room for landmarks");
  for (int i = 0; i < p.landmark_count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      const Point cand{rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)};
      bool ok = true;
      for (const Point& q : lms.points)
        if (euclidean_dist(cand, q) < p.min_separation_px) {
          ok = false;
          break;
        }
      if (ok) {
        lms.points.push_back(cand);
        placed = true;
      }
    }
    if (!placed)
      throw Error("synth-placement-failed",
                  "cannot place landmark " + std::to_string(i) + " with the given separation");
  }
  return lms;
}

struct SynthQuery {
  ImageGrid image;
  LandmarkSet lms;  // exact ground truth in query px
};

struct SynthData {
  SynthParams params;
  ImageGrid tmpl;
  LandmarkSet tmpl_lms;
  std::vector<SynthQuery> queries;
};

namespace detail {
struct ElasticField {
  double amp = 0.0;
  double kx = 0.0, ky = 0.0;
  double phase_x1 = 0.0, phase_x2 = 0.0, phase_y1 = 0.0, phase_y2 = 0.0;

  Point displacement(Point p) const {
    if (amp == 0.0) return Point{0.0, 0.0};
    return Point{amp * std::sin(kx * p.x + phase_x1) * std::sin(ky * p.y + phase_x2),
                 amp * std::cos(kx * p.x + phase_y1) * std::sin(ky * p.y + phase_y2)};
  }
};

/// Query pixel x samples the template at inv_affine(x) + e(x).
inline ImageGrid warp_query(const ImageGrid& tmpl, const Affine2D& fwd,
                            const ElasticField& e) {
  const Affine2D inv = fwd.inverse();
  ImageGrid out = ImageGrid::zeros(tmpl.height, tmpl.width);
  out.spacing_mm = tmpl.spacing_mm;
  for (int r = 0; r < tmpl.height; ++r)
    for (int c = 0; c < tmpl.width; ++c) {
      const Point x{double(c), double(r)};
      const Point d = e.displacement(x);
      const Point src = inv.apply(x);
      out.pixels(r, c) = tmpl.sample(src.x + d.x, src.y + d.y);
    }
  return out;
}

/// Solves inv(x) + e(x) = p for the query-space ground truth by fixed-point
/// iteration (identity when the elastic field is off).
inline Point query_ground_truth(const Affine2D& fwd, const ElasticField& e, Point p) {
  Point x = fwd.apply(p);
  if (e.amp == 0.0) return x;
  for (int it = 0; it < 25; ++it) {
    const Point d = e.displacement(x);
    x = fwd.apply(Point{p.x - d.x, p.y - d.y});
  }
  return x;
}
}  // namespace detail

/// Deterministic in-memory benchmark: template, landmarks, and perturbed
/// queries with exact ground truth.
inline SynthData generate_synth(const SynthParams& params) {
  params.validate();
  SynthData data;
  data.params = params;
  data.tmpl = synth_texture(params.height, params.width, mix_seed(params.seed, 0x7E57ull));
  data.tmpl.spacing_mm = params.spacing_mm;
  data.tmpl_lms = place_landmarks(params);
  data.queries.reserve(static_cast<size_t>(params.query_count));
  Rng rng(mix_seed(params.seed, 0x90E1ull));
  for (int q = 0; q < params.query_count; ++q) {
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 100)
        throw Error("augmentation-degenerate",
                    "query " + std::to_string(q) + ": landmarks leave the image");
      const Affine2D a =
          make_augment_affine(rng, params.warp_ranges, params.width, params.height);
      detail::ElasticField e;
      if (params.elastic_amp_px > 0.0) {
        e.amp = params.elastic_amp_px;
        e.kx = 2.0 * std::numbers::pi * params.elastic_cycles / params.width;
        e.ky = 2.0 * std::numbers::pi * params.elastic_cycles / params.height;
        e.phase_x1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
        e.phase_x2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
        e.phase_y1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
        e.phase_y2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
      }
      LandmarkSet gt;
      bool ok = true;
      for (const Point& p : data.tmpl_lms.points) {
        const Point x = detail::query_ground_truth(a, e, p);
        if (x.x < 0.0 || x.x > params.width - 1.0 || x.y < 0.0 || x.y > params.height - 1.0) {
          ok = false;
          break;
        }
        gt.points.push_back(x);
      }
      if (!ok) continue;
      data.queries.push_back({detail::warp_query(data.tmpl, a, e), std::move(gt)});
      break;
    }
  }
  return data;
}

/// Writes the benchmark as a loadable dataset: 16-bit PGMs, per-image
/// annotation CSVs, and a manifest. Sample 000 is the template.
inline std::filesystem::path write_synth_dataset(const std::filesystem::path& dir,
                                                 const SynthData& data) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "annotations");
  char id[8];
  auto write_sample = [&](int index, const ImageGrid& img, const LandmarkSet& lms) {
    std::snprintf(id, sizeof(id), "%03d", index);
    write_pgm(dir / "images" / (std::string(id) + ".pgm"), img, 65535);
    write_landmarks_csv(dir / "annotations" / (std::string(id) + ".csv"), lms);
    return std::string(id);
  };
  nlohmann::json manifest;
  manifest["name"] = "synthetic";
  manifest["image_dir"] = "images";
  manifest["annotation_dir"] = "annotations";
  manifest["landmark_count"] = data.tmpl_lms.count();
  manifest["calibration"] = {{"spacing_mm", data.params.spacing_mm}};
  manifest["template_id"] = write_sample(0, data.tmpl, data.tmpl_lms);
  nlohmann::json ids = nlohmann::json::array();
  for (size_t q = 0; q < data.queries.size(); ++q)
    ids.push_back(write_sample(static_cast<int>(q) + 1, data.queries[q].image,
                               data.queries[q].lms));
  manifest["test_ids"] = ids;
  const fs::path mpath = dir / "manifest.json";
  std::ofstream mf(mpath);
  if (!mf) throw Error("io-error", "cannot write " + mpath.string());
  mf << manifest.dump(2) << "\n";
  return mpath;
}

}  // namespace fmosd
