#include <fmosd/core.hpp>
#include <fmosd/rng.hpp>

#include <gtest/gtest.h>

#include <cmath>

using namespace fmosd;

TEST(EuclideanDist, KnownValues) {
  EXPECT_EQ(euclidean_dist(Point{0, 0}, Point{0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(euclidean_dist(Point{0, 0}, Point{3, 4}), 5.0);
  EXPECT_DOUBLE_EQ(euclidean_dist(Point{1, 1}, Point{4, 5}), 5.0);
  EXPECT_DOUBLE_EQ(euclidean_dist(GridPoint{0, 0}, GridPoint{3, 4}), 5.0);
}

TEST(EuclideanDist, SymmetricAndTriangleInequality) {
  Rng rng(42);
  for (int i = 0; i < 200; ++i) {
    Point a{rng.uniform(-50, 50), rng.uniform(-50, 50)};
    Point b{rng.uniform(-50, 50), rng.uniform(-50, 50)};
    Point c{rng.uniform(-50, 50), rng.uniform(-50, 50)};
    EXPECT_DOUBLE_EQ(euclidean_dist(a, b), euclidean_dist(b, a));
    EXPECT_LE(euclidean_dist(a, c), euclidean_dist(a, b) + euclidean_dist(b, c) + 1e-12);
  }
}

TEST(Snap, RoundHalfUpPerAxis) {
  EXPECT_EQ(snap_index(0.0), 0);
  EXPECT_EQ(snap_index(0.49), 0);
  EXPECT_EQ(snap_index(0.5), 1);  // halves go up
  EXPECT_EQ(snap_index(1.5), 2);
  EXPECT_EQ(snap_index(2.49), 2);
  EXPECT_EQ(snap_index(-0.5), 0);
  EXPECT_EQ(snap_index(-0.51), -1);
  GridPoint g = snap_point(Point{3.5, 2.2});
  EXPECT_EQ(g, (GridPoint{4, 2}));
}

TEST(CoordTransform, FeatureCoordExamples) {
  CoordTransform id;
  Point p = to_feature_coords(Point{0, 0}, id);
  EXPECT_EQ(p.x, 0.0);
  EXPECT_EQ(p.y, 0.0);

  CoordTransform s4{4.0, 0.0, 0.0};
  p = to_feature_coords(Point{8, 8}, s4);
  EXPECT_DOUBLE_EQ(p.x, 2.0);
  EXPECT_DOUBLE_EQ(p.y, 2.0);

  CoordTransform t{2.0, 4.0, 2.0};
  p = to_feature_coords(Point{10, 6}, t);
  EXPECT_DOUBLE_EQ(p.x, 3.0);
  EXPECT_DOUBLE_EQ(p.y, 2.0);
}

TEST(CoordTransform, ImageCoordExamples) {
  CoordTransform id;
  Point p = to_image_coords(Point{0, 0}, id);
  EXPECT_EQ(p.x, 0.0);
  EXPECT_EQ(p.y, 0.0);

  CoordTransform s4{4.0, 0.0, 0.0};
  p = to_image_coords(Point{2, 2}, s4);
  EXPECT_DOUBLE_EQ(p.x, 8.0);
  EXPECT_DOUBLE_EQ(p.y, 8.0);
}

TEST(CoordTransform, RoundTripIsExactForContinuousCoords) {
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    CoordTransform t{rng.uniform(0.25, 8.0), rng.uniform(-20, 20), rng.uniform(-20, 20)};
    // Power-of-two scale: subtracting the offset first loses nothing, so the
    // feature->image direction reassembles the input bit for bit.
    CoordTransform exact{4.0, 3.5, 3.5};
    Point p{rng.uniform(7, 200), rng.uniform(7, 200)};
    Point back = exact.to_image(exact.to_feature(p));
    EXPECT_EQ(back.x, p.x);
    EXPECT_EQ(back.y, p.y);
    Point loose = t.to_image(t.to_feature(p));
    EXPECT_NEAR(loose.x, p.x, 1e-9);
    EXPECT_NEAR(loose.y, p.y, 1e-9);
  }
}

TEST(CoordTransform, ComposeMatchesSequentialApplication) {
  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    CoordTransform inner{rng.uniform(0.5, 4.0), rng.uniform(-10, 10), rng.uniform(-10, 10)};
    CoordTransform outer{rng.uniform(0.5, 4.0), rng.uniform(-10, 10), rng.uniform(-10, 10)};
    CoordTransform both = outer.compose(inner);
    Point p{rng.uniform(-30, 30), rng.uniform(-30, 30)};
    Point want = outer.to_image(inner.to_image(p));
    Point got = both.to_image(p);
    EXPECT_NEAR(got.x, want.x, 1e-9);
    EXPECT_NEAR(got.y, want.y, 1e-9);
  }
}

TEST(ImageGrid, ValidateRejectsBadImages) {
  ImageGrid g = ImageGrid::zeros(4, 5);
  EXPECT_NO_THROW(g.validate());

  ImageGrid empty;
  try {
    empty.validate();
    FAIL() << "expected throw";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "invalid-image");
  }

  ImageGrid nan_img = ImageGrid::zeros(2, 2);
  nan_img.pixels(1, 1) = std::nan("");
  EXPECT_THROW(nan_img.validate(), Error);

  ImageGrid bad_spacing = ImageGrid::zeros(2, 2);
  bad_spacing.spacing_mm = 0.0;
  EXPECT_THROW(bad_spacing.validate(), Error);
  bad_spacing.spacing_mm = 0.1;
  EXPECT_NO_THROW(bad_spacing.validate());
}

TEST(ImageGrid, BilinearSample) {
  ImageGrid g = ImageGrid::zeros(2, 2);
  g.pixels << 0.0, 1.0, 2.0, 3.0;
  EXPECT_DOUBLE_EQ(g.sample(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(g.sample(1, 0), 1.0);
  EXPECT_DOUBLE_EQ(g.sample(0, 1), 2.0);
  EXPECT_DOUBLE_EQ(g.sample(0.5, 0.5), 1.5);  // mean of all four
  EXPECT_DOUBLE_EQ(g.sample(0.5, 0.0), 0.5);
  // outside the raster -> 0
  EXPECT_EQ(g.sample(-0.01, 0.0), 0.0);
  EXPECT_EQ(g.sample(0.0, 1.01), 0.0);
}

TEST(LandmarkSet, ValidateWithinBounds) {
  LandmarkSet lms;
  lms.points = {Point{0, 0}, Point{4, 3}};
  EXPECT_NO_THROW(lms.validate_within(4, 5));  // x <= W-1, y <= H-1
  EXPECT_EQ(lms.count(), 2);

  LandmarkSet out = lms;
  out.points.push_back(Point{4.01, 0});
  try {
    out.validate_within(4, 5);
    FAIL() << "expected throw";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "invalid-landmarks");
  }

  LandmarkSet empty;
  EXPECT_THROW(empty.validate_within(4, 5), Error);

  LandmarkSet nan_lms;
  nan_lms.points = {Point{std::nan(""), 0}};
  EXPECT_THROW(nan_lms.validate_within(4, 5), Error);

  ImageGrid g = ImageGrid::zeros(4, 5);
  EXPECT_NO_THROW(lms.validate_within(g));
}

TEST(FeatureMap, CellIndexingIsRowMajor) {
  FeatureMap f = FeatureMap::zeros(3, 4, 2);
  EXPECT_EQ(f.cells(), 12);
  EXPECT_EQ(f.index(0, 0), 0);
  EXPECT_EQ(f.index(1, 0), 4);
  EXPECT_EQ(f.index(2, 3), 11);
  f.data(0, f.index(1, 2)) = 5.0;
  EXPECT_EQ(f.descriptor(1, 2)(0), 5.0);
  EXPECT_EQ(f.descriptor(GridPoint{2, 1})(0), 5.0);  // GridPoint is (x=col, y=row)
  EXPECT_TRUE(f.contains(GridPoint{3, 2}));
  EXPECT_FALSE(f.contains(GridPoint{4, 2}));
  EXPECT_FALSE(f.contains(GridPoint{-1, 0}));
}

TEST(ErrorType, CarriesCodeAndMessage) {
  Error e("some-code", "went wrong");
  EXPECT_EQ(e.code(), "some-code");
  EXPECT_NE(std::string(e.what()).find("went wrong"), std::string::npos);
}
