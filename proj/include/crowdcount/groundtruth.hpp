#pragma once

// Supervision targets from dot annotations: Gaussian density maps whose
// integral equals the head count, binary confidence masks from pasted ones
// templates, count-preserving downsampling, and count-group quantization.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdcount/tensor.hpp"

namespace crowdcount {

inline constexpr int kKernelSize = 15;
inline constexpr double kKernelSigma = 4.0;

struct Point {
  double x = 0.0;  // column
  double y = 0.0;  // row
};

struct DotAnnotation {
  std::vector<Point> points;
  int clip_warnings = 0;

  // Moves out-of-bounds points onto the image; increments the warning
  // counter once per clipped point.
  void clip_to_bounds(int width, int height) {
    for (Point& p : points) {
      const double cx = std::clamp(p.x, 0.0, static_cast<double>(width) - 1.0);
      const double cy = std::clamp(p.y, 0.0, static_cast<double>(height) - 1.0);
      if (cx != p.x || cy != p.y) {
        p.x = cx;
        p.y = cy;
        ++clip_warnings;
      }
    }
  }
};

struct DensityMap {
  int h = 0, w = 0;
  int resolution_divisor = 1;
  std::vector<double> values;

  double& at(int y, int x) { return values[static_cast<std::size_t>(y) * w + x]; }
  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * w + x]; }

  // Neumaier-compensated: the mass-conservation contract compares sums taken
  // in different orders, so plain accumulation order must not show through.
  double sum() const {
    double s = 0.0, c = 0.0;
    for (double v : values) {
      const double t = s + v;
      c += std::fabs(s) >= std::fabs(v) ? (s - t) + v : (v - t) + s;
      s = t;
    }
    return s + c;
  }
};

struct ConfidenceMask {
  int h = 0, w = 0;
  int resolution_divisor = 1;
  std::vector<double> values;  // exactly 0.0 or 1.0

  double& at(int y, int x) { return values[static_cast<std::size_t>(y) * w + x]; }
  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * w + x]; }
};

namespace detail {

inline int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

}  // namespace detail

// Isotropic 2-D Gaussian sampled at integer offsets, divided by its own sum
// so the total mass is exactly 1.
inline Tensor gaussian_kernel(int size = kKernelSize, double sigma = kKernelSigma) {
  if (size <= 0 || size % 2 == 0)
    throw std::invalid_argument("gaussian_kernel: size must be odd and positive");
  const int c = size / 2;
  Tensor k = Tensor::zeros({size, size});
  double total = 0.0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double dy = y - c, dx = x - c;
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      k.at(y, x) = v;
      total += v;
    }
  for (auto& v : k.data()) v /= total;
  return k;
}

// One normalized kernel added per point, centered at the rounded location.
// Where the kernel overhangs the border its clipped portion is renormalized
// to unit mass first, so sum(density) equals the point count exactly.
inline DensityMap render_density(const DotAnnotation& annotation, int height, int width) {
  if (height <= 0 || width <= 0)
    throw std::invalid_argument("render_density: extents must be positive");
  DensityMap d;
  d.h = height;
  d.w = width;
  d.values.assign(static_cast<std::size_t>(height) * width, 0.0);
  const Tensor kernel = gaussian_kernel();
  const int r = kKernelSize / 2;
  for (const Point& p : annotation.points) {
    const int cx = std::clamp(detail::round_half_up(p.x), 0, width - 1);
    const int cy = std::clamp(detail::round_half_up(p.y), 0, height - 1);
    const int y0 = std::max(0, cy - r), y1 = std::min(height, cy + r + 1);
    const int x0 = std::max(0, cx - r), x1 = std::min(width, cx + r + 1);
    double clipped_mass = 0.0;
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x)
        clipped_mass += kernel.at(y - cy + r, x - cx + r);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x)
        d.at(y, x) += kernel.at(y - cy + r, x - cx + r) / clipped_mass;
  }
  return d;
}

// 15x15 all-ones square pasted at each rounded point, clipped at borders;
// overlaps combine by OR.
inline ConfidenceMask render_mask(const DotAnnotation& annotation, int height, int width) {
  if (height <= 0 || width <= 0)
    throw std::invalid_argument("render_mask: extents must be positive");
  ConfidenceMask m;
  m.h = height;
  m.w = width;
  m.values.assign(static_cast<std::size_t>(height) * width, 0.0);
  const int r = kKernelSize / 2;
  for (const Point& p : annotation.points) {
    const int cx = std::clamp(detail::round_half_up(p.x), 0, width - 1);
    const int cy = std::clamp(detail::round_half_up(p.y), 0, height - 1);
    for (int y = std::max(0, cy - r); y < std::min(height, cy + r + 1); ++y)
      for (int x = std::max(0, cx - r); x < std::min(width, cx + r + 1); ++x)
        m.at(y, x) = 1.0;
  }
  return m;
}

// Non-overlapping factor x factor block sum; partial trailing blocks are
// summed as-is, so total mass is preserved exactly.
inline DensityMap downsample_density(const DensityMap& d, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample_density: factor must be >= 1");
  DensityMap out;
  out.h = (d.h + factor - 1) / factor;
  out.w = (d.w + factor - 1) / factor;
  out.resolution_divisor = d.resolution_divisor * factor;
  out.values.assign(static_cast<std::size_t>(out.h) * out.w, 0.0);
  for (int y = 0; y < d.h; ++y)
    for (int x = 0; x < d.w; ++x) out.at(y / factor, x / factor) += d.at(y, x);
  return out;
}

// Block max: any covered head pixel keeps the reduced-resolution pixel at 1.
inline ConfidenceMask downsample_mask(const ConfidenceMask& m, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample_mask: factor must be >= 1");
  ConfidenceMask out;
  out.h = (m.h + factor - 1) / factor;
  out.w = (m.w + factor - 1) / factor;
  out.resolution_divisor = m.resolution_divisor * factor;
  out.values.assign(static_cast<std::size_t>(out.h) * out.w, 0.0);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x)
      out.at(y / factor, x / factor) = std::max(out.at(y / factor, x / factor), m.at(y, x));
  return out;
}

// Training counts all equal: no meaningful group structure exists.
struct DegenerateRangeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Equal-width partition of the training-count range into K groups; interior
// bins are left-closed, the last bin is right-closed.
struct GroupBins {
  std::vector<double> edges;  // K+1 ascending values
  int k = 0;

  double lo() const { return edges.front(); }
  double hi() const { return edges.back(); }

  static GroupBins single(double count) {
    GroupBins b;
    b.k = 1;
    b.edges = {count, count};
    return b;
  }
};

inline GroupBins compute_bins(const std::vector<int>& train_counts, int k = 5) {
  if (train_counts.empty())
    throw std::invalid_argument("compute_bins: need at least one count");
  if (k < 2) throw std::invalid_argument("compute_bins: need K >= 2");
  const auto [lo_it, hi_it] = std::minmax_element(train_counts.begin(), train_counts.end());
  const double lo = *lo_it, hi = *hi_it;
  if (lo == hi)
    throw DegenerateRangeError("compute_bins: all training counts equal " +
                               std::to_string(*lo_it));
  GroupBins bins;
  bins.k = k;
  bins.edges.resize(static_cast<std::size_t>(k) + 1);
  const double width = (hi - lo) / k;
  for (int i = 0; i <= k; ++i) bins.edges[static_cast<std::size_t>(i)] = lo + width * i;
  bins.edges.back() = hi;  // exact upper edge
  return bins;
}

// Total over all counts; out-of-range counts clamp to the first/last group.
inline int quantize_group(int count, const GroupBins& bins) {
  const double lo = bins.lo(), hi = bins.hi();
  if (bins.k <= 1 || hi <= lo) return 0;
  if (count <= lo) return 0;
  if (count >= hi) return bins.k - 1;
  const double width = (hi - lo) / bins.k;
  return std::min(bins.k - 1, static_cast<int>(std::floor((count - lo) / width)));
}

}  // namespace crowdcount
