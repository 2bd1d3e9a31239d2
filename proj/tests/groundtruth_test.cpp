#include "crowdcount/groundtruth.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "crowdcount/rng.hpp"

using namespace crowdcount;

TEST(GaussianKernel, UnitMass) {
  Tensor k = gaussian_kernel();
  double total = 0.0;
  for (double v : k.data()) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(GaussianKernel, SymmetryAndCenterMaximum) {
  Tensor k = gaussian_kernel();
  for (int y = 0; y < 15; ++y)
    for (int x = 0; x < 15; ++x) {
      EXPECT_DOUBLE_EQ(k.at(y, x), k.at(x, y));            // transpose
      EXPECT_DOUBLE_EQ(k.at(y, x), k.at(14 - x, y));       // 90 degree rotation
      EXPECT_LE(k.at(y, x), k.at(7, 7));
    }
}

TEST(GaussianKernel, RejectsBadSizes) {
  EXPECT_THROW(gaussian_kernel(14), std::invalid_argument);
  EXPECT_THROW(gaussian_kernel(0), std::invalid_argument);
  EXPECT_THROW(gaussian_kernel(-3), std::invalid_argument);
}

TEST(RenderDensity, SinglePointHasUnitMass) {
  DotAnnotation a;
  a.points.push_back({32.0, 32.0});
  DensityMap d = render_density(a, 64, 64);
  EXPECT_NEAR(d.sum(), 1.0, 1e-12);
}

TEST(RenderDensity, EmptyAnnotationIsZero) {
  DensityMap d = render_density(DotAnnotation{}, 32, 32);
  EXPECT_DOUBLE_EQ(d.sum(), 0.0);
  for (double v : d.values) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(RenderDensity, BorderPointsConserveMass) {
  Rng rng(101);
  DotAnnotation a;
  for (int i = 0; i < 7; ++i) {
    // several points within 3 px of the border
    if (i % 2 == 0)
      a.points.push_back({rng.uniform(0.0, 3.0), rng.uniform(0.0, 47.0)});
    else
      a.points.push_back({rng.uniform(0.0, 47.0), rng.uniform(44.0, 47.0)});
  }
  DensityMap d = render_density(a, 48, 48);
  EXPECT_NEAR(d.sum(), 7.0, 1e-9);
}

TEST(RenderDensity, MassConservationProperty) {
  Rng rng(103);
  for (int trial = 0; trial < 25; ++trial) {
    const int h = rng.uniform_int(32, 96), w = rng.uniform_int(32, 96);
    const int n = rng.uniform_int(0, 50);
    DotAnnotation a;
    for (int i = 0; i < n; ++i)
      a.points.push_back({rng.uniform(0.0, w - 1.0), rng.uniform(0.0, h - 1.0)});
    DensityMap d = render_density(a, h, w);
    EXPECT_NEAR(d.sum(), n, 1e-6 * std::max(1, n));
    for (double v : d.values) EXPECT_GE(v, 0.0);
  }
}

TEST(RenderMask, InteriorPointCovers225Pixels) {
  DotAnnotation a;
  a.points.push_back({24.0, 24.0});
  ConfidenceMask m = render_mask(a, 48, 48);
  double ones = 0.0;
  for (double v : m.values) ones += v;
  EXPECT_DOUBLE_EQ(ones, 225.0);
}

TEST(RenderMask, CornerPointClipsTo64Pixels) {
  DotAnnotation a;
  a.points.push_back({0.0, 0.0});
  ConfidenceMask m = render_mask(a, 48, 48);
  double ones = 0.0;
  for (double v : m.values) ones += v;
  EXPECT_DOUBLE_EQ(ones, 64.0);
}

TEST(RenderMask, CoincidentPointsAreIdempotent) {
  DotAnnotation one, two;
  one.points.push_back({20.0, 17.0});
  two.points.push_back({20.0, 17.0});
  two.points.push_back({20.0, 17.0});
  ConfidenceMask ma = render_mask(one, 40, 40);
  ConfidenceMask mb = render_mask(two, 40, 40);
  EXPECT_EQ(ma.values, mb.values);
}

TEST(RenderMask, MonotoneUnderAddedPoints) {
  Rng rng(107);
  DotAnnotation a;
  for (int i = 0; i < 10; ++i) {
    ConfidenceMask before = render_mask(a, 40, 40);
    a.points.push_back({rng.uniform(0.0, 39.0), rng.uniform(0.0, 39.0)});
    ConfidenceMask after = render_mask(a, 40, 40);
    for (std::size_t j = 0; j < before.values.size(); ++j)
      EXPECT_GE(after.values[j], before.values[j]);
  }
  for (double v : render_mask(a, 40, 40).values) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

TEST(RenderMask, EveryPointPixelIsOne) {
  Rng rng(109);
  DotAnnotation a;
  for (int i = 0; i < 12; ++i)
    a.points.push_back({rng.uniform(0.0, 63.0), rng.uniform(0.0, 63.0)});
  ConfidenceMask m = render_mask(a, 64, 64);
  for (const Point& p : a.points)
    EXPECT_DOUBLE_EQ(m.at(static_cast<int>(std::floor(p.y + 0.5)),
                          static_cast<int>(std::floor(p.x + 0.5))),
                     1.0);
}

TEST(Downsample, DensityFactorOneIsIdentity) {
  Rng rng(113);
  DotAnnotation a;
  for (int i = 0; i < 5; ++i)
    a.points.push_back({rng.uniform(0.0, 31.0), rng.uniform(0.0, 31.0)});
  DensityMap d = render_density(a, 32, 32);
  DensityMap same = downsample_density(d, 1);
  EXPECT_EQ(same.values, d.values);
}

TEST(Downsample, DensitySumPreserved) {
  Rng rng(127);
  for (int trial = 0; trial < 10; ++trial) {
    DensityMap d;
    d.h = rng.uniform_int(5, 33);
    d.w = rng.uniform_int(5, 33);
    d.values.resize(static_cast<std::size_t>(d.h) * d.w);
    for (auto& v : d.values) v = rng.uniform();
    DensityMap ds = downsample_density(d, 4);
    EXPECT_EQ(ds.h, (d.h + 3) / 4);
    EXPECT_EQ(ds.w, (d.w + 3) / 4);
    EXPECT_NEAR(ds.sum(), d.sum(), 1e-12);
  }
}

TEST(Downsample, DensityHandBlockSums) {
  DensityMap d;
  d.h = d.w = 4;
  d.values.assign(16, 0.25);
  DensityMap ds = downsample_density(d, 2);
  ASSERT_EQ(ds.values.size(), 4u);
  for (double v : ds.values) EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_THROW(downsample_density(d, 0), std::invalid_argument);
}

TEST(Downsample, MaskMaxSemantics) {
  ConfidenceMask m;
  m.h = m.w = 4;
  m.values.assign(16, 0.0);
  ConfidenceMask zero = downsample_mask(m, 4);
  EXPECT_DOUBLE_EQ(zero.values[0], 0.0);
  m.at(2, 1) = 1.0;
  ConfidenceMask one = downsample_mask(m, 4);
  ASSERT_EQ(one.values.size(), 1u);
  EXPECT_DOUBLE_EQ(one.values[0], 1.0);
  for (double v : one.values) EXPECT_TRUE(v == 0.0 || v == 1.0);
  EXPECT_THROW(downsample_mask(m, -1), std::invalid_argument);
}

TEST(Downsample, MaskCoversEveryAnnotatedPoint) {
  Rng rng(131);
  DotAnnotation a;
  for (int i = 0; i < 9; ++i)
    a.points.push_back({rng.uniform(0.0, 63.0), rng.uniform(0.0, 63.0)});
  ConfidenceMask m = downsample_mask(render_mask(a, 64, 64), 4);
  for (const Point& p : a.points) {
    const int y = static_cast<int>(std::floor(p.y + 0.5)) / 4;
    const int x = static_cast<int>(std::floor(p.x + 0.5)) / 4;
    EXPECT_DOUBLE_EQ(m.at(y, x), 1.0);
  }
}

TEST(GroupBins, EqualWidthEdges) {
  GroupBins b = compute_bins({1, 100}, 5);
  ASSERT_EQ(b.edges.size(), 6u);
  const double want[6] = {1, 20.8, 40.6, 60.4, 80.2, 100};
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(b.edges[i], want[i], 1e-12);
  EXPECT_EQ(quantize_group(45, b), 2);  // the 41-60 bucket
  EXPECT_EQ(quantize_group(100, b), 4);
}

TEST(GroupBins, TwoGroupExample) {
  GroupBins b = compute_bins({0, 10}, 2);
  ASSERT_EQ(b.edges.size(), 3u);
  EXPECT_DOUBLE_EQ(b.edges[0], 0.0);
  EXPECT_DOUBLE_EQ(b.edges[1], 5.0);
  EXPECT_DOUBLE_EQ(b.edges[2], 10.0);
  EXPECT_EQ(quantize_group(5, b), 1);
  EXPECT_EQ(quantize_group(10, b), 1);
}

TEST(GroupBins, DegenerateRangeThrows) {
  EXPECT_THROW(compute_bins({7, 7, 7}, 5), DegenerateRangeError);
  EXPECT_THROW(compute_bins({}, 5), std::invalid_argument);
  EXPECT_THROW(compute_bins({1, 2}, 1), std::invalid_argument);
  GroupBins single = GroupBins::single(7);
  EXPECT_EQ(quantize_group(7, single), 0);
  EXPECT_EQ(quantize_group(99, single), 0);
}

TEST(GroupBins, ClampsAndMonotone) {
  GroupBins b = compute_bins({10, 90}, 5);
  EXPECT_EQ(quantize_group(-5, b), 0);
  EXPECT_EQ(quantize_group(500, b), 4);
  int prev = 0;
  for (int c = -10; c <= 120; ++c) {
    const int g = quantize_group(c, b);
    EXPECT_GE(g, prev);
    EXPECT_GE(g, 0);
    EXPECT_LT(g, 5);
    prev = g;
  }
}

TEST(DotAnnotationClip, WarnsAndClips) {
  DotAnnotation a;
  a.points.push_back({-3.0, 10.0});
  a.points.push_back({5.0, 5.0});
  a.clip_to_bounds(32, 32);
  EXPECT_EQ(a.clip_warnings, 1);
  EXPECT_DOUBLE_EQ(a.points[0].x, 0.0);
  EXPECT_DOUBLE_EQ(a.points[0].y, 10.0);
}
