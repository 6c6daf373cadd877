// Dataset ingestion (images + per-image landmark CSVs + calibration) and the
// evaluation metrics: mean radial error in millimeters (micro-averaged over
// all image/landmark pairs) and successful detection rate at fixed
// thresholds, with strict inequality at the boundary.
//
// Calibration is either a constant mm-per-pixel spacing or a per-image scale
// derived from a known anatomical distance between two annotated points
// (e.g. a 50 mm wrist span).

#pragma once

#include "fmosd/core.hpp"
#include "fmosd/image_io.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fmosd {

inline const std::vector<double> kHeadThresholdsMm = {2.0, 2.5, 3.0, 4.0};
inline const std::vector<double> kHandThresholdsMm = {2.0, 4.0, 10.0};
inline constexpr double kWristLengthMm = 50.0;

struct Calibration {
  enum class Mode { spacing, wrist_pair };
  Mode mode = Mode::spacing;
  double spacing_mm = 1.0;
  int wrist_a = 0;
  int wrist_b = 1;
  double length_mm = kWristLengthMm;
};

struct DatasetManifest {
  std::string name;
  std::filesystem::path image_dir;
  std::filesystem::path annotation_dir;
  int landmark_count = 0;
  Calibration calib;
  std::string template_id;
  std::vector<std::string> test_ids;
};

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("file-not-found", "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse-error", path.string() + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.name = j.at("name").get<std::string>();
    const auto base = path.parent_path();
    m.image_dir = base / j.at("image_dir").get<std::string>();
    m.annotation_dir = base / j.at("annotation_dir").get<std::string>();
    m.landmark_count = j.at("landmark_count").get<int>();
    const auto& cal = j.at("calibration");
    if (cal.contains("spacing_mm")) {
      m.calib.mode = Calibration::Mode::spacing;
      m.calib.spacing_mm = cal.at("spacing_mm").get<double>();
    } else if (cal.contains("wrist_pair")) {
      m.calib.mode = Calibration::Mode::wrist_pair;
      m.calib.wrist_a = cal.at("wrist_pair").at(0).get<int>();
      m.calib.wrist_b = cal.at("wrist_pair").at(1).get<int>();
      m.calib.length_mm = cal.value("length_mm", kWristLengthMm);
    } else {
      throw Error("parse-error", path.string() + ": calibration needs spacing_mm or wrist_pair");
    }
    m.template_id = j.at("template_id").get<std::string>();
    for (const auto& id : j.at("test_ids")) m.test_ids.push_back(id.get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse-error", path.string() + ": " + e.what());
  }
  if (m.landmark_count < 1)
    throw Error("parse-error", path.string() + ": landmark_count must be >= 1");
  if (m.calib.mode == Calibration::Mode::spacing && !(m.calib.spacing_mm > 0.0))
    throw Error("parse-error", path.string() + ": spacing_mm must be > 0");
  return m;
}

struct DatasetImage {
  std::string id;
  ImageGrid image;
  LandmarkSet lms;       // ground truth, original px
  double mm_per_px = 1;  // resolved calibration
};

struct Dataset {
  DatasetManifest manifest;
  DatasetImage tmpl;
  std::vector<DatasetImage> test;
};

using ImageReader = std::function<ImageGrid(const std::filesystem::path&)>;

namespace detail {
inline std::filesystem::path resolve_image_path(const std::filesystem::path& dir,
                                                const std::string& id) {
  for (const char* ext : {".pgm", ".ppm"}) {
    auto p = dir / (id + ext);
    if (std::filesystem::exists(p)) return p;
  }
  throw Error("file-not-found",
              "no image " + (dir / (id + ".pgm")).string() + " (or .ppm)");
}

inline LandmarkSet read_annotation(const std::filesystem::path& path, int expect_count) {
  std::ifstream in(path);
  if (!in) throw Error("file-not-found", "cannot open annotation " + path.string());
  LandmarkSet lms;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string idx, xs, ys;
    if (!std::getline(ls, idx, ',') || !std::getline(ls, xs, ',') || !std::getline(ls, ys))
      throw Error("parse-error", path.string() + ": malformed row '" + line + "'");
    if (idx == "index") continue;
    try {
      const double x = std::stod(xs), y = std::stod(ys);
      if (!std::isfinite(x) || !std::isfinite(y))
        throw Error("parse-error", path.string() + ": non-finite coordinate");
      lms.points.push_back(Point{x, y});
    } catch (const std::invalid_argument&) {
      throw Error("parse-error", path.string() + ": bad number in '" + line + "'");
    }
  }
  if (static_cast<int>(lms.count()) != expect_count)
    throw Error("parse-error", path.string() + ": expected " + std::to_string(expect_count) +
                                   " landmarks, found " + std::to_string(lms.count()));
  return lms;
}

inline double resolve_mm_per_px(const Calibration& cal, const LandmarkSet& lms,
                                const std::string& id) {
  if (cal.mode == Calibration::Mode::spacing) return cal.spacing_mm;
  const int n = static_cast<int>(lms.count());
  if (cal.wrist_a < 0 || cal.wrist_a >= n || cal.wrist_b < 0 || cal.wrist_b >= n)
    throw Error("parse-error", "wrist pair indices out of range for image " + id);
  const double d = euclidean_dist(lms.points[static_cast<size_t>(cal.wrist_a)],
                                  lms.points[static_cast<size_t>(cal.wrist_b)]);
  if (!(d > 0.0)) throw Error("parse-error", "degenerate wrist pair in image " + id);
  return cal.length_mm / d;
}
}  // namespace detail

/// Reads every image and annotation up front and resolves per-image
/// calibration. The default reader handles 8/16-bit PGM and PPM.
inline Dataset load_dataset(const std::filesystem::path& manifest_path,
                            ImageReader reader = {}) {
  if (!reader)
    reader = [](const std::filesystem::path& p) { return read_image_auto(p); };
  Dataset ds;
  ds.manifest = read_manifest(manifest_path);
  auto load_one = [&](const std::string& id) {
    DatasetImage di;
    di.id = id;
    di.image = reader(detail::resolve_image_path(ds.manifest.image_dir, id));
    di.lms = detail::read_annotation(ds.manifest.annotation_dir / (id + ".csv"),
                                     ds.manifest.landmark_count);
    di.mm_per_px = detail::resolve_mm_per_px(ds.manifest.calib, di.lms, id);
    di.image.spacing_mm = di.mm_per_px;
    return di;
  };
  ds.tmpl = load_one(ds.manifest.template_id);
  ds.test.reserve(ds.manifest.test_ids.size());
  for (const auto& id : ds.manifest.test_ids) ds.test.push_back(load_one(id));
  return ds;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline double mre(const std::vector<Point>& preds, const std::vector<Point>& gts,
                  double mm_per_px) {
  if (preds.empty() || preds.size() != gts.size())
    throw Error("length-mismatch", "prediction/ground-truth lists must match and be non-empty");
  if (!(mm_per_px > 0.0)) throw Error("invalid-calibration", "mm_per_px must be > 0");
  double sum = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) sum += euclidean_dist(preds[i], gts[i]);
  return sum * mm_per_px / double(preds.size());
}

/// Percentage of errors strictly under each threshold.
inline std::vector<double> sdr(const std::vector<double>& errors_mm,
                               const std::vector<double>& thresholds_mm) {
  if (errors_mm.empty()) throw Error("empty-input", "sdr needs at least one error");
  for (size_t i = 0; i < thresholds_mm.size(); ++i) {
    if (!(thresholds_mm[i] > 0.0))
      throw Error("invalid-thresholds", "thresholds must be positive");
    if (i > 0 && thresholds_mm[i] <= thresholds_mm[i - 1])
      throw Error("invalid-thresholds", "thresholds must be strictly ascending");
  }
  std::vector<double> out;
  out.reserve(thresholds_mm.size());
  for (double t : thresholds_mm) {
    size_t hit = 0;
    for (double e : errors_mm)
      if (e < t) ++hit;
    out.push_back(100.0 * double(hit) / double(errors_mm.size()));
  }
  return out;
}

struct PerPointError {
  std::string image_id;
  int landmark = 0;
  double error_mm = 0.0;
};

struct EvalReport {
  std::vector<PerPointError> per_point;
  double mre_mm = 0.0;
  std::vector<double> thresholds_mm;
  std::vector<double> sdr_pct;
};

using Detector = std::function<std::vector<Point>(const ImageGrid&)>;

/// Runs the detector over every test image, aggregating errors jointly over
/// all (image, landmark) pairs, in manifest order.
inline EvalReport evaluate(const Dataset& ds, const Detector& detector,
                           const std::vector<double>& thresholds_mm) {
  EvalReport rep;
  rep.thresholds_mm = thresholds_mm;
  std::vector<double> errors;
  for (const DatasetImage& di : ds.test) {
    const std::vector<Point> preds = detector(di.image);
    if (preds.size() != di.lms.count())
      throw Error("length-mismatch", "detector returned " + std::to_string(preds.size()) +
                                         " points for image " + di.id);
    for (size_t i = 0; i < preds.size(); ++i) {
      const double e = euclidean_dist(preds[i], di.lms.points[i]) * di.mm_per_px;
      rep.per_point.push_back({di.id, static_cast<int>(i), e});
      errors.push_back(e);
    }
  }
  if (errors.empty()) throw Error("empty-input", "dataset has no test points");
  double sum = 0.0;
  for (double e : errors) sum += e;
  rep.mre_mm = sum / double(errors.size());
  rep.sdr_pct = sdr(errors, thresholds_mm);
  return rep;
}

// ---------------------------------------------------------------------------
// Report files: JSON summary + flat per-point CSV. The CSV carries full
// double precision so a replay reproduces the summary bit-exactly.
// ---------------------------------------------------------------------------

inline void write_report(const std::filesystem::path& json_path,
                         const std::filesystem::path& csv_path, const EvalReport& rep) {
  nlohmann::json j;
  j["mre_mm"] = rep.mre_mm;
  nlohmann::json sdr_obj = nlohmann::json::object();
  for (size_t i = 0; i < rep.thresholds_mm.size(); ++i) {
    std::ostringstream key;
    key << rep.thresholds_mm[i];
    sdr_obj[key.str()] = rep.sdr_pct[i];
  }
  j["sdr"] = sdr_obj;
  j["thresholds_mm"] = rep.thresholds_mm;
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : rep.per_point)
    pts.push_back({{"image", p.image_id}, {"landmark", p.landmark}, {"error_mm", p.error_mm}});
  j["per_point"] = pts;
  std::ofstream jf(json_path);
  if (!jf) throw Error("io-error", "cannot write " + json_path.string());
  jf << j.dump(2) << "\n";

  std::ofstream cf(csv_path);
  if (!cf) throw Error("io-error", "cannot write " + csv_path.string());
  cf << "image,landmark,error_mm\n";
  char buf[128];
  for (const auto& p : rep.per_point) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%.17g\n", p.image_id.c_str(), p.landmark,
                  p.error_mm);
    cf << buf;
  }
}

/// Recomputes MRE/SDR from a persisted per-point CSV (replay determinism).
inline EvalReport replay_report(const std::filesystem::path& csv_path,
                                const std::vector<double>& thresholds_mm) {
  std::ifstream in(csv_path);
  if (!in) throw Error("file-not-found", "cannot open " + csv_path.string());
  EvalReport rep;
  rep.thresholds_mm = thresholds_mm;
  std::string line;
  std::vector<double> errors;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string img, lm, err;
    if (!std::getline(ls, img, ',') || !std::getline(ls, lm, ',') || !std::getline(ls, err))
      throw Error("parse-error", csv_path.string() + ": malformed row '" + line + "'");
    if (img == "image") continue;
    try {
      rep.per_point.push_back({img, std::stoi(lm), std::stod(err)});
    } catch (const std::invalid_argument&) {
      throw Error("parse-error", csv_path.string() + ": bad number in '" + line + "'");
    }
    errors.push_back(rep.per_point.back().error_mm);
  }
  if (errors.empty()) throw Error("empty-input", csv_path.string() + " holds no rows");
  double sum = 0.0;
  for (double e : errors) sum += e;
  rep.mre_mm = sum / double(errors.size());
  rep.sdr_pct = sdr(errors, thresholds_mm);
  return rep;
}

}  // namespace fmosd
