#include <fmosd/nn.hpp>
#include <fmosd/pipeline.hpp>

#include <gtest/gtest.h>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>

using namespace fmosd;
namespace fs = std::filesystem;

namespace {

ImageGrid textured_image(int h, int w, std::uint64_t seed) {
  ImageGrid img = ImageGrid::zeros(h, w);
  Rng rng(seed);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) img.pixels(r, c) = rng.uniform();
  return img;
}

fs::path temp_dir(const char* tag) {
  fs::path dir = fs::temp_directory_path() / (std::string("fmosd_pipe_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Small enough that even the trained-detector tests run in well under a second.
TrainConfig small_cfg() {
  TrainConfig cfg;
  cfg.aug_count = 4;
  cfg.batch = 2;
  cfg.iters_global = 0;
  cfg.iters_local = 0;
  cfg.downsample_target = 32;
  cfg.crop_size = 24;
  cfg.decoder_dim = 6;
  cfg.sigma_global = 3.0;
  cfg.sigma_local = 1.5;
  cfg.local_jitter_px = 4;
  cfg.seed = 11;
  return cfg;
}

void expect_params_equal(const DecoderParams& a, const DecoderParams& b) {
  EXPECT_TRUE(a.w1 == b.w1);
  EXPECT_TRUE(a.b1 == b.b1);
  EXPECT_TRUE(a.w2 == b.w2);
  EXPECT_TRUE(a.b2 == b.b2);
}

void expect_error_code(const std::function<void()>& fn, const std::string& code) {
  try {
    fn();
    FAIL() << "expected Error with code '" << code << "'";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration validation
// ---------------------------------------------------------------------------

TEST(TrainConfigValidate, DefaultsPass) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_DOUBLE_EQ(cfg.lr, 2e-4);
  EXPECT_EQ(cfg.batch, 4);
  EXPECT_EQ(cfg.iters_global, 20000);
  EXPECT_EQ(cfg.iters_local, 1000);
  EXPECT_EQ(cfg.aug_count, 500);
  EXPECT_DOUBLE_EQ(cfg.aug_ranges.shift_frac, 0.10);
  EXPECT_DOUBLE_EQ(cfg.aug_ranges.scale_min, 0.9);
  EXPECT_DOUBLE_EQ(cfg.aug_ranges.scale_max, 1.1);
  EXPECT_DOUBLE_EQ(cfg.aug_ranges.rotate_deg, 10.0);
  EXPECT_EQ(cfg.downsample_target, 224);
  EXPECT_EQ(cfg.crop_size, 224);
}

TEST(TrainConfigValidate, RejectsBadFields) {
  const auto broken = [](auto mutate) {
    TrainConfig cfg;
    mutate(cfg);
    return cfg;
  };
  for (const TrainConfig& cfg : {
           broken([](TrainConfig& c) { c.lr = 0.0; }),
           broken([](TrainConfig& c) { c.batch = 0; }),
           broken([](TrainConfig& c) { c.aug_count = 0; }),
           broken([](TrainConfig& c) { c.iters_global = -1; }),
           broken([](TrainConfig& c) { c.iters_local = -5; }),
           broken([](TrainConfig& c) { c.sigma_global = 0.0; }),
           broken([](TrainConfig& c) { c.sigma_local = -1.0; }),
           broken([](TrainConfig& c) { c.downsample_target = 0; }),
           broken([](TrainConfig& c) { c.crop_size = 0; }),
           broken([](TrainConfig& c) { c.decoder_dim = 0; }),
           broken([](TrainConfig& c) { c.local_jitter_px = -1; }),
       }) {
    expect_error_code([&] { cfg.validate(); }, "invalid-train-config");
  }
}

TEST(LossKindStrings, RoundTripAndReject) {
  for (LossKind k : {LossKind::distance_aware, LossKind::onehot_mse, LossKind::contrastive})
    EXPECT_EQ(loss_kind_from_string(to_string(k)), k);
  expect_error_code([] { loss_kind_from_string("hinge"); }, "parse-error");
}

// ---------------------------------------------------------------------------
// Affine warps
// ---------------------------------------------------------------------------

TEST(Affine, IdentityAndInverseRoundTrip) {
  const Affine2D id;
  const Point p{3.25, -1.5};
  EXPECT_DOUBLE_EQ(id.apply(p).x, p.x);
  EXPECT_DOUBLE_EQ(id.apply(p).y, p.y);

  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const Affine2D a = Affine2D::shift_scale_rotate(
        rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.5, 2.0),
        rng.uniform(-180, 180), Point{rng.uniform(0, 30), rng.uniform(0, 30)});
    const Affine2D inv = a.inverse();
    const Point q{rng.uniform(-20, 50), rng.uniform(-20, 50)};
    const Point back = inv.apply(a.apply(q));
    EXPECT_NEAR(back.x, q.x, 1e-10);
    EXPECT_NEAR(back.y, q.y, 1e-10);
  }
}

TEST(Affine, QuarterTurnAboutCenterOfSquare) {
  const int W = 31;
  const Point center{(W - 1) / 2.0, (W - 1) / 2.0};
  const Affine2D rot = Affine2D::shift_scale_rotate(0, 0, 1.0, 90.0, center);
  for (const Point p : {Point{0, 0}, Point{30, 0}, Point{7, 22}, Point{15, 15}}) {
    const Point q = rot.apply(p);
    EXPECT_NEAR(q.x, (W - 1) - p.y, 1e-12);
    EXPECT_NEAR(q.y, p.x, 1e-12);
  }
}

TEST(Affine, SingularThrows) {
  const Affine2D flat = Affine2D::shift_scale_rotate(0, 0, 0.0, 15.0, Point{4, 4});
  expect_error_code([&] { flat.inverse(); }, "augmentation-degenerate");
}

TEST(Warp, IdentityIsBitExact) {
  const ImageGrid img = textured_image(13, 17, 3);
  const ImageGrid out = warp_affine(img, Affine2D{});
  EXPECT_TRUE(out.pixels == img.pixels);
}

TEST(Warp, IntegerShiftZeroFills) {
  const ImageGrid img = textured_image(9, 11, 4);
  Affine2D shift;
  shift.tx = 2.0;  // content moves right by two pixels
  const ImageGrid out = warp_affine(img, shift);
  for (int r = 0; r < img.height; ++r) {
    EXPECT_EQ(out.pixels(r, 0), 0.0);
    EXPECT_EQ(out.pixels(r, 1), 0.0);
    for (int c = 2; c < img.width; ++c) EXPECT_EQ(out.pixels(r, c), img.pixels(r, c - 2));
  }
}

// ---------------------------------------------------------------------------
// Template augmentation
// ---------------------------------------------------------------------------

TEST(Augment, ZeroRangesYieldExactCopies) {
  const ImageGrid img = textured_image(20, 24, 6);
  LandmarkSet lms;
  lms.points = {Point{3.5, 4.0}, Point{18.0, 12.25}};
  TrainConfig cfg = small_cfg();
  cfg.aug_count = 5;
  cfg.aug_ranges = AugRanges{0.0, 1.0, 1.0, 0.0};

  const auto out = augment_template(img, lms, cfg);
  ASSERT_EQ(out.size(), 5u);
  for (const auto& [aug, moved] : out) {
    EXPECT_TRUE(aug.pixels == img.pixels);
    ASSERT_EQ(moved.points.size(), lms.points.size());
    for (size_t i = 0; i < lms.points.size(); ++i) {
      EXPECT_EQ(moved.points[i].x, lms.points[i].x);
      EXPECT_EQ(moved.points[i].y, lms.points[i].y);
    }
  }
}

TEST(Augment, SeededReplayIsBitIdentical) {
  const ImageGrid img = textured_image(24, 20, 7);
  LandmarkSet lms;
  lms.points = {Point{10, 10}, Point{14, 8}};
  TrainConfig cfg = small_cfg();
  cfg.aug_count = 3;

  const auto a = augment_template(img, lms, cfg);
  const auto b = augment_template(img, lms, cfg);
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(a[i].first.pixels == b[i].first.pixels);
    for (size_t j = 0; j < lms.points.size(); ++j) {
      EXPECT_EQ(a[i].second.points[j].x, b[i].second.points[j].x);
      EXPECT_EQ(a[i].second.points[j].y, b[i].second.points[j].y);
    }
  }

  cfg.seed = 12;
  const auto c = augment_template(img, lms, cfg);
  EXPECT_FALSE(a[0].first.pixels == c[0].first.pixels);
}

TEST(Augment, LandmarksStayInBounds) {
  const ImageGrid img = textured_image(30, 26, 8);
  LandmarkSet lms;
  lms.points = {Point{1, 1}, Point{24, 28}, Point{13, 14}};
  TrainConfig cfg = small_cfg();
  cfg.aug_count = 20;

  for (const auto& [aug, moved] : augment_template(img, lms, cfg)) {
    EXPECT_NO_THROW(moved.validate_within(aug));
  }
}

TEST(Augment, ImpossiblePlacementThrows) {
  const ImageGrid img = textured_image(16, 16, 9);
  LandmarkSet lms;
  lms.points = {Point{0, 0}};  // scale 3 about the center always expels the corner
  TrainConfig cfg = small_cfg();
  cfg.aug_ranges = AugRanges{0.0, 3.0, 3.0, 0.0};
  expect_error_code([&] { augment_template(img, lms, cfg); }, "augmentation-degenerate");
}

// ---------------------------------------------------------------------------
// Resize / downsample / crop geometry
// ---------------------------------------------------------------------------

TEST(ResizeImage, IdentityReturnsSameImage) {
  const ImageGrid img = textured_image(10, 12, 10);
  const ImageGrid out = resize_image(img, 10, 12);
  EXPECT_TRUE(out.pixels == img.pixels);
}

TEST(ResizeImage, ConstantStaysConstant) {
  ImageGrid img = ImageGrid::zeros(6, 9);
  img.pixels.setConstant(0.73);
  const ImageGrid out = resize_image(img, 15, 4);
  for (int r = 0; r < out.height; ++r)
    for (int c = 0; c < out.width; ++c) EXPECT_NEAR(out.pixels(r, c), 0.73, 1e-15);
}

TEST(ResizeImage, AgreesWithFeatureGridResize) {
  // The image resample and the feature-channel resample share one sampling
  // convention; a single-channel feature laid out row-major must match.
  const ImageGrid img = textured_image(7, 9, 11);
  const ImageGrid out = resize_image(img, 12, 5);

  MatrixXd row(1, img.height * img.width);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) row(0, r * img.width + c) = img.pixels(r, c);
  const MatrixXd res = resize_bilinear(row, img.height, img.width, 12, 5);
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 5; ++c) EXPECT_NEAR(out.pixels(r, c), res(0, r * 5 + c), 1e-12);
}

TEST(ResizeImage, RejectsBadTarget) {
  const ImageGrid img = textured_image(4, 4, 12);
  expect_error_code([&] { resize_image(img, 0, 4); }, "invalid-upsample-target");
}

TEST(Downsample, AlreadyAtTargetIsIdentity) {
  const ImageGrid img = textured_image(224, 224, 13);
  const auto [out, t] = downsample_short_side(img, 224);
  EXPECT_TRUE(out.pixels == img.pixels);
  EXPECT_DOUBLE_EQ(t.scale, 1.0);
  EXPECT_DOUBLE_EQ(t.dx, 0.0);
  EXPECT_DOUBLE_EQ(t.dy, 0.0);
}

TEST(Downsample, HalvesAndKeepsAspect) {
  ImageGrid img = textured_image(448, 672, 14);
  img.spacing_mm = 0.15;
  const auto [out, t] = downsample_short_side(img, 224);
  EXPECT_EQ(out.height, 224);
  EXPECT_EQ(out.width, 336);
  EXPECT_DOUBLE_EQ(t.scale, 2.0);
  EXPECT_DOUBLE_EQ(t.dx, 0.5);
  EXPECT_DOUBLE_EQ(t.dy, 0.5);
  ASSERT_TRUE(out.spacing_mm.has_value());
  EXPECT_DOUBLE_EQ(*out.spacing_mm, 0.15);

  // Round trip of the transform recovers original coordinates.
  const Point p{100.25, 30.5};
  const Point back = t.to_image(t.to_feature(p));
  EXPECT_NEAR(back.x, p.x, 1e-12);
  EXPECT_NEAR(back.y, p.y, 1e-12);
}

TEST(Downsample, LongSideRoundsToNearest) {
  // 2400 x 1935 at target 224: long side 2400 * 224 / 1935 = 277.76 -> 278.
  const ImageGrid img = textured_image(2400, 1935, 15);
  const auto [out, t] = downsample_short_side(img, 224);
  EXPECT_EQ(out.height, 278);
  EXPECT_EQ(out.width, 224);
  EXPECT_DOUBLE_EQ(t.scale, 1935.0 / 224.0);
}

TEST(CropRegion, CenteredWindow) {
  const ImageGrid img = textured_image(448, 448, 16);
  const auto [crop, t] = crop_local_region(img, Point{223.5, 223.5}, 224);
  EXPECT_EQ(crop.height, 224);
  EXPECT_EQ(crop.width, 224);
  EXPECT_DOUBLE_EQ(t.dx, 112.0);
  EXPECT_DOUBLE_EQ(t.dy, 112.0);
  EXPECT_DOUBLE_EQ(t.scale, 1.0);
  EXPECT_TRUE(crop.pixels == img.pixels.block(112, 112, 224, 224));
}

TEST(CropRegion, ClampsAtBorders) {
  const ImageGrid img = textured_image(448, 448, 17);
  const auto [c0, t0] = crop_local_region(img, Point{0, 0}, 224);
  EXPECT_DOUBLE_EQ(t0.dx, 0.0);
  EXPECT_DOUBLE_EQ(t0.dy, 0.0);
  EXPECT_TRUE(c0.pixels == img.pixels.block(0, 0, 224, 224));

  const auto [c1, t1] = crop_local_region(img, Point{447, 447}, 224);
  EXPECT_DOUBLE_EQ(t1.dx, 224.0);
  EXPECT_DOUBLE_EQ(t1.dy, 224.0);
  EXPECT_TRUE(c1.pixels == img.pixels.block(224, 224, 224, 224));
}

TEST(CropRegion, ZeroPadsSmallImages) {
  const ImageGrid img = textured_image(10, 8, 18);
  const auto [crop, t] = crop_local_region(img, Point{4, 4}, 16);
  EXPECT_DOUBLE_EQ(t.dx, 0.0);
  EXPECT_DOUBLE_EQ(t.dy, 0.0);
  EXPECT_TRUE(crop.pixels.topLeftCorner(10, 8) == img.pixels);
  EXPECT_EQ(crop.pixels.bottomRows(6).cwiseAbs().sum(), 0.0);
  EXPECT_EQ(crop.pixels.rightCols(8).cwiseAbs().sum(), 0.0);
}

TEST(CropRegion, RejectsBadSize) {
  const ImageGrid img = textured_image(8, 8, 19);
  expect_error_code([&] { crop_local_region(img, Point{4, 4}, 0); }, "invalid-train-config");
}

// ---------------------------------------------------------------------------
// Feature resampling helpers
// ---------------------------------------------------------------------------

TEST(FeatureSample, InterpolatesAndClamps) {
  FeatureMap f;
  f.h = 2;
  f.w = 3;
  f.dim = 1;
  f.data.resize(1, 6);
  f.data << 0, 1, 2, 3, 4, 5;  // value = row-major index

  EXPECT_DOUBLE_EQ(bilinear_feature_sample(f, 1.0, 0.0)(0), 1.0);
  EXPECT_DOUBLE_EQ(bilinear_feature_sample(f, 0.5, 0.5)(0), (0 + 1 + 3 + 4) / 4.0);
  // Outside the grid: clamp to the nearest cell, never zero-fill.
  EXPECT_DOUBLE_EQ(bilinear_feature_sample(f, -3.0, -9.0)(0), 0.0);
  EXPECT_DOUBLE_EQ(bilinear_feature_sample(f, 99.0, 99.0)(0), 5.0);
}

TEST(GlobalRegion, ConstantMapStaysConstant) {
  FeatureMap f;
  f.h = 8;
  f.w = 8;
  f.dim = 2;
  f.data = MatrixXd::Constant(2, 64, 0.4);
  const CoordTransform crop_to_orig{1.0, 2.0, 3.0};
  const CoordTransform map_to_orig{1.0, 0.0, 0.0};
  const FeatureMap out = global_region_for_crop(f, crop_to_orig, map_to_orig, 4);
  EXPECT_EQ(out.h, 4);
  EXPECT_EQ(out.w, 4);
  EXPECT_EQ(out.dim, 2);
  for (int j = 0; j < out.data.cols(); ++j) {
    EXPECT_NEAR(out.data(0, j), 0.4, 1e-15);
    EXPECT_NEAR(out.data(1, j), 0.4, 1e-15);
  }
}

TEST(GlobalRegion, TracksCropOffset) {
  // Feature value equals its own x coordinate, so the resampled window must
  // read off crop-column + offset.
  FeatureMap f;
  f.h = 8;
  f.w = 8;
  f.dim = 1;
  f.data.resize(1, 64);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) f.data(0, f.index(r, c)) = c;

  const CoordTransform crop_to_orig{1.0, 2.0, 1.0};
  const CoordTransform map_to_orig{1.0, 0.0, 0.0};
  const FeatureMap out = global_region_for_crop(f, crop_to_orig, map_to_orig, 4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(out.data(0, out.index(r, c)), c + 2.0, 1e-12);
}

// ---------------------------------------------------------------------------
// Training-set preparation and decoder training
// ---------------------------------------------------------------------------

TEST(TrainingSet, PrecomputesDownsampledLandmarks) {
  const ImageGrid img = textured_image(48, 48, 20);
  LandmarkSet lms;
  lms.points = {Point{12, 20}, Point{30, 15}};
  TrainConfig cfg = small_cfg();
  cfg.aug_count = 3;
  cfg.aug_ranges = AugRanges{0.0, 1.0, 1.0, 0.0};
  BackboneSpec backbone;

  const auto samples = prepare_training_set(img, lms, backbone, cfg);
  ASSERT_EQ(samples.size(), 3u);
  for (const AugSample& s : samples) {
    EXPECT_TRUE(s.image.pixels == img.pixels);
    EXPECT_EQ(s.down.height, 32);
    EXPECT_EQ(s.down.width, 32);
    EXPECT_DOUBLE_EQ(s.down_to_orig.scale, 1.5);
    ASSERT_EQ(s.lm_down.size(), 2u);
    for (size_t i = 0; i < 2; ++i) {
      const Point expect = s.down_to_orig.to_feature(lms.points[i]);
      EXPECT_DOUBLE_EQ(s.lm_down[i].x, expect.x);
      EXPECT_DOUBLE_EQ(s.lm_down[i].y, expect.y);
    }
    // Downsampled 32x32 image, patch 8 stride 4 -> 7x7 grid.
    EXPECT_EQ(s.feats.h, 7);
    EXPECT_EQ(s.feats.w, 7);
  }
}

TEST(Training, ZeroIterationsReturnInitialWeights) {
  const ImageGrid img = textured_image(48, 48, 21);
  LandmarkSet lms;
  lms.points = {Point{12, 20}, Point{30, 15}};
  TrainConfig cfg = small_cfg();
  BackboneSpec backbone;

  const auto samples = prepare_training_set(img, lms, backbone, cfg);
  std::vector<double> hist;
  const DecoderParams pg = train_global_decoder(samples, cfg, hist);
  EXPECT_TRUE(hist.empty());
  expect_params_equal(pg, init_decoder(DecoderStage::global, samples[0].feats.dim,
                                       cfg.decoder_dim, mix_seed(cfg.seed, 0x9107ull)));

  const DecoderParams pl = train_local_decoder(samples, backbone, cfg, hist);
  EXPECT_TRUE(hist.empty());
  expect_params_equal(pl, init_decoder(DecoderStage::local, samples[0].feats.dim,
                                       cfg.decoder_dim, mix_seed(cfg.seed, 0x1907ull)));
}

TEST(Training, SeededReplayGivesIdenticalHistory) {
  const ImageGrid img = textured_image(48, 48, 22);
  LandmarkSet lms;
  lms.points = {Point{12, 20}, Point{30, 15}};
  TrainConfig cfg = small_cfg();
  cfg.iters_global = 8;
  cfg.iters_local = 4;
  BackboneSpec backbone;

  const TrainedModel a = train_decoders(img, lms, backbone, cfg);
  const TrainedModel b = train_decoders(img, lms, backbone, cfg);
  ASSERT_EQ(a.loss_global.size(), 8u);
  ASSERT_EQ(a.loss_local.size(), 4u);
  EXPECT_TRUE(a.loss_global == b.loss_global);  // bitwise: no tolerance
  EXPECT_TRUE(a.loss_local == b.loss_local);
  expect_params_equal(a.dec_global, b.dec_global);
  expect_params_equal(a.dec_local, b.dec_local);

  cfg.seed = 23;
  const TrainedModel c = train_decoders(img, lms, backbone, cfg);
  EXPECT_FALSE(a.loss_global == c.loss_global);
}

TEST(Training, LossDecreasesOnSmallProblem) {
  const ImageGrid img = textured_image(48, 48, 24);
  LandmarkSet lms;
  lms.points = {Point{12, 20}, Point{30, 15}};
  TrainConfig cfg = small_cfg();
  cfg.iters_global = 250;
  cfg.lr = 1e-3;
  BackboneSpec backbone;

  const auto samples = prepare_training_set(img, lms, backbone, cfg);
  std::vector<double> hist;
  train_global_decoder(samples, cfg, hist);
  ASSERT_EQ(hist.size(), 250u);
  const auto mean = [](auto first, auto last) {
    return std::accumulate(first, last, 0.0) / double(last - first);
  };
  const double head = mean(hist.begin(), hist.begin() + 25);
  const double tail = mean(hist.end() - 25, hist.end());
  EXPECT_LT(tail, head);
}

TEST(Training, DivergenceIsReported) {
  const ImageGrid img = textured_image(48, 48, 25);
  LandmarkSet lms;
  lms.points = {Point{12, 20}};
  TrainConfig cfg = small_cfg();
  cfg.iters_global = 5;
  cfg.lr = 1e160;  // first step launches the weights far enough to overflow
  BackboneSpec backbone;

  const auto samples = prepare_training_set(img, lms, backbone, cfg);
  std::vector<double> hist;
  expect_error_code([&] { train_global_decoder(samples, cfg, hist); }, "training-diverged");
}

TEST(Training, EmptySampleSetRejected) {
  TrainConfig cfg = small_cfg();
  std::vector<AugSample> none;
  std::vector<double> hist;
  expect_error_code([&] { train_global_decoder(none, cfg, hist); }, "invalid-train-config");
}

// ---------------------------------------------------------------------------
// Detection
// ---------------------------------------------------------------------------

namespace {

struct IdentityFixture {
  ImageGrid img;
  LandmarkSet lms;
  TrainedModel model;
  TemplateState st;

  IdentityFixture() {
    img = textured_image(48, 48, 26);
    // Integer landmarks; template size equals the downsample target so every
    // coordinate transform along the path is exact.
    lms.points = {Point{12, 20}, Point{30, 15}, Point{25, 33}};
    TrainConfig cfg = small_cfg();
    cfg.downsample_target = 48;
    cfg.aug_count = 2;
    BackboneSpec backbone;
    model = train_decoders(img, lms, backbone, cfg);
    st = build_template_state(img, lms, model);
  }
};

const IdentityFixture& identity_fixture() {
  static const IdentityFixture fx;
  return fx;
}

}  // namespace

TEST(Detect, IdentityQueryRecoversLandmarksExactly) {
  const IdentityFixture& fx = identity_fixture();
  const DetectionResult res = detect(fx.img, fx.st, MatchConfig{3});
  ASSERT_EQ(res.points.size(), 3u);
  ASSERT_EQ(res.coarse_points.size(), 3u);
  ASSERT_EQ(res.fine_diag.size(), 3u);
  for (size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(res.coarse_points[i].x, fx.lms.points[i].x, 1e-9);
    EXPECT_NEAR(res.coarse_points[i].y, fx.lms.points[i].y, 1e-9);
    EXPECT_NEAR(res.points[i].x, fx.lms.points[i].x, 1e-9);
    EXPECT_NEAR(res.points[i].y, fx.lms.points[i].y, 1e-9);
    // Matching the template against itself back-matches onto the landmark.
    EXPECT_EQ(res.coarse_diag[i].inverse_error, 0.0);
    EXPECT_EQ(res.fine_diag[i].inverse_error, 0.0);
    EXPECT_NEAR(res.coarse_diag[i].forward_similarity, 1.0, 1e-9);
    EXPECT_NEAR(res.fine_diag[i].forward_similarity, 1.0, 1e-9);
  }
}

TEST(Detect, PredictionsStayInsideTheImage) {
  const IdentityFixture& fx = identity_fixture();
  const DetectionResult res = detect(fx.img, fx.st, MatchConfig{3});
  for (const Point& p : res.points) {
    EXPECT_GE(p.x, 0.0);
    EXPECT_GE(p.y, 0.0);
    EXPECT_LE(p.x, fx.img.width - 1.0);
    EXPECT_LE(p.y, fx.img.height - 1.0);
  }
}

TEST(Detect, RawFeaturePathStaysWithinHalfStride) {
  const IdentityFixture& fx = identity_fixture();
  DetectOptions opts;
  opts.use_global_decoder = false;
  opts.use_local_stage = false;
  const DetectionResult res = detect(fx.img, fx.st, MatchConfig{3}, opts);
  // Raw backbone grid has stride 4: self-matching recovers the landmark cell,
  // so the residual is pure snap error, at most half a stride per axis.
  for (size_t i = 0; i < 3; ++i) {
    EXPECT_LE(std::abs(res.points[i].x - fx.lms.points[i].x), 2.0 + 1e-12);
    EXPECT_LE(std::abs(res.points[i].y - fx.lms.points[i].y), 2.0 + 1e-12);
  }
  EXPECT_TRUE(res.fine_diag.empty());
}

TEST(Detect, LocalStageRequiresGlobalDecoder) {
  const IdentityFixture& fx = identity_fixture();
  DetectOptions opts;
  opts.use_global_decoder = false;
  opts.use_local_stage = true;
  expect_error_code([&] { detect(fx.img, fx.st, MatchConfig{3}, opts); },
                    "invalid-detect-options");
}

TEST(Detect, DiagnosticsCarryKCandidates) {
  const IdentityFixture& fx = identity_fixture();
  const DetectionResult res = detect(fx.img, fx.st, MatchConfig{3});
  for (const MatchResult& m : res.coarse_diag) {
    EXPECT_EQ(m.candidates.size(), 3u);
    EXPECT_EQ(m.pairs.size(), 3u);
  }

  DetectOptions plain;
  plain.use_bdm = false;
  const DetectionResult res1 = detect(fx.img, fx.st, MatchConfig{3}, plain);
  for (const MatchResult& m : res1.coarse_diag) EXPECT_EQ(m.candidates.size(), 1u);
}

TEST(Detect, OversizedKIsClampedPerStage) {
  const IdentityFixture& fx = identity_fixture();
  // Coarse grid 48x48 = 2304 cells, fine grid 24x24 = 576: k = 700 passes the
  // coarse stage untouched and clamps on the fine stage.
  const DetectionResult res = detect(fx.img, fx.st, MatchConfig{700});
  EXPECT_EQ(res.coarse_diag[0].candidates.size(), 700u);
  EXPECT_EQ(res.fine_diag[0].candidates.size(), 576u);
}

TEST(Detect, RepeatedRunsAreBitIdentical) {
  const IdentityFixture& fx = identity_fixture();
  const DetectionResult a = detect(fx.img, fx.st, MatchConfig{3});
  const DetectionResult b = detect(fx.img, fx.st, MatchConfig{3});
  for (size_t i = 0; i < a.points.size(); ++i) {
    EXPECT_EQ(a.points[i].x, b.points[i].x);
    EXPECT_EQ(a.points[i].y, b.points[i].y);
  }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

TEST(Bundle, RoundTripReproducesDetection) {
  const ImageGrid img = textured_image(48, 48, 27);
  LandmarkSet lms;
  lms.points = {Point{12, 20}, Point{30, 15}};
  TrainConfig cfg = small_cfg();
  cfg.downsample_target = 48;
  cfg.aug_count = 2;
  cfg.iters_global = 2;
  cfg.iters_local = 1;
  BackboneSpec backbone;
  const TrainedModel model = train_decoders(img, lms, backbone, cfg);

  const fs::path dir = temp_dir("bundle");
  save_bundle(dir, model, img, lms);
  const Bundle loaded = load_bundle(dir);

  EXPECT_TRUE(loaded.template_image.pixels == img.pixels);
  ASSERT_EQ(loaded.template_lms.points.size(), 2u);
  EXPECT_EQ(loaded.template_lms.points[1].x, lms.points[1].x);
  EXPECT_EQ(loaded.model.cfg.decoder_dim, cfg.decoder_dim);
  EXPECT_EQ(loaded.model.cfg.seed, cfg.seed);
  EXPECT_EQ(loaded.model.backbone.dim, backbone.dim);
  expect_params_equal(loaded.model.dec_global, model.dec_global);
  expect_params_equal(loaded.model.dec_local, model.dec_local);

  const TemplateState st0 = build_template_state(img, lms, model);
  const TemplateState st1 =
      build_template_state(loaded.template_image, loaded.template_lms, loaded.model);
  const DetectionResult r0 = detect(img, st0, MatchConfig{3});
  const DetectionResult r1 = detect(loaded.template_image, st1, MatchConfig{3});
  for (size_t i = 0; i < r0.points.size(); ++i) {
    EXPECT_EQ(r0.points[i].x, r1.points[i].x);
    EXPECT_EQ(r0.points[i].y, r1.points[i].y);
  }
}

namespace {

fs::path write_tampered_bundle(const char* tag,
                               const std::function<void(nlohmann::json&)>& mutate_meta) {
  const ImageGrid img = textured_image(48, 48, 28);
  LandmarkSet lms;
  lms.points = {Point{12, 20}, Point{30, 15}};
  TrainConfig cfg = small_cfg();
  cfg.downsample_target = 48;
  cfg.aug_count = 2;
  TrainedModel model = train_decoders(img, lms, BackboneSpec{}, cfg);
  const fs::path dir = temp_dir(tag);
  save_bundle(dir, model, img, lms);

  nlohmann::json meta;
  std::ifstream(dir / "meta.json") >> meta;
  mutate_meta(meta);
  std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";
  return dir;
}

}  // namespace

TEST(Bundle, DigestTamperIsRejected) {
  const fs::path dir = write_tampered_bundle("tamper_digest", [](nlohmann::json& m) {
    m["config_digest"] = m["config_digest"].get<std::uint64_t>() + 1;
  });
  expect_error_code([&] { load_bundle(dir); }, "checksum-mismatch");
}

TEST(Bundle, UnknownFormatIsRejected) {
  const fs::path dir = write_tampered_bundle(
      "tamper_format", [](nlohmann::json& m) { m["format"] = "bogus-v0"; });
  expect_error_code([&] { load_bundle(dir); }, "parse-error");
}

TEST(Bundle, LandmarkCountMismatchIsRejected) {
  const fs::path dir = write_tampered_bundle("tamper_count", [](nlohmann::json&) {});
  std::ofstream(dir / "landmarks.csv", std::ios::app) << "9,1,1\n";
  expect_error_code([&] { load_bundle(dir); }, "parse-error");
}

TEST(Bundle, MissingDirectoryThrows) {
  expect_error_code([&] { load_bundle(temp_dir("none") / "absent"); }, "file-not-found");
}

TEST(Digest, ChangesExactlyWithConfig) {
  BackboneSpec b;
  TrainConfig c;
  const std::uint64_t base = train_digest(b, c);
  EXPECT_EQ(train_digest(b, c), base);

  TrainConfig c1 = c;
  c1.lr = 3e-4;
  EXPECT_NE(train_digest(b, c1), base);
  TrainConfig c2 = c;
  c2.loss = LossKind::contrastive;
  EXPECT_NE(train_digest(b, c2), base);
  TrainConfig c3 = c;
  c3.aug_ranges.rotate_deg = 11.0;
  EXPECT_NE(train_digest(b, c3), base);
  BackboneSpec b1 = b;
  b1.noise_eps = 0.05;
  EXPECT_NE(train_digest(b1, c), base);
  BackboneSpec b2 = b;
  b2.seed = 77;
  EXPECT_NE(train_digest(b2, c), base);
}
