#pragma once

// Independent references for footprint geometry, kept apart from the library's code path.

#include <cmath>
#include <cstdint>
#include <vector>

#include "vefuse/geometry.hpp"

namespace vefuse::testing {

/// IoU from explicit corner coordinates.
inline double corner_iou(const Box& a, const Box& b) {
  const double ax1 = a.x, ay1 = a.y, ax2 = a.x + a.w, ay2 = a.y + a.h;
  const double bx1 = b.x, by1 = b.y, bx2 = b.x + b.w, by2 = b.y + b.h;
  const double ix = ax2 < bx2 ? ax2 : bx2, iy = ay2 < by2 ? ay2 : by2;
  const double ox = ax1 > bx1 ? ax1 : bx1, oy = ay1 > by1 ? ay1 : by1;
  const double inter = (ix > ox && iy > oy) ? (ix - ox) * (iy - oy) : 0.0;
  const double aa = a.w * a.h, bb = b.w * b.h;
  if (aa <= 0 || bb <= 0) return 0.0;
  return inter / (aa + bb - inter);
}

/// All-pairs oracle for overlap sets.
inline std::vector<std::vector<int>> brute_force_overlaps(const std::vector<TokenFootprint>& a,
                                                          const std::vector<TokenFootprint>& b, double thr) {
  std::vector<std::vector<int>> out(a.size());
  for (std::size_t t = 0; t < a.size(); ++t)
    for (std::size_t j = 0; j < b.size(); ++j)
      if (!a[t].padding && !b[j].padding && corner_iou(a[t].box, b[j].box) > thr) out[t].push_back(static_cast<int>(j));
  return out;
}

/// Rasterization oracle: counts pixel centers of an N x N lattice inside each box. Axis-aligned
/// rectangles make the count separable (x pixels times y pixels). The default pitch 1/42000 refines
/// the 1e-3 lattice and also the 1/16, 1/6 and 1/7 token tilings, so every box edge lands on a pixel
/// boundary and the counted areas are exact.
class RasterIoU {
 public:
  explicit RasterIoU(std::int64_t n = 42000) : n_(n) {}

  double iou(const Box& a, const Box& b) const {
    const std::int64_t ax = span(a.x, a.w), ay = span(a.y, a.h);
    const std::int64_t bx = span(b.x, b.w), by = span(b.y, b.h);
    const std::int64_t ix = overlap(a.x, a.w, b.x, b.w), iy = overlap(a.y, a.h, b.y, b.h);
    const std::int64_t inter = ix * iy, uni = ax * ay + bx * by - inter;
    if (ax * ay == 0 || bx * by == 0 || uni == 0) return 0.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
  }

  std::vector<int> gold_set(const Box& gold, const std::vector<TokenFootprint>& tokens, double thr) const {
    std::vector<int> out;
    for (std::size_t j = 0; j < tokens.size(); ++j)
      if (!tokens[j].padding && iou(gold, tokens[j].box) > thr) out.push_back(static_cast<int>(j));
    return out;
  }

 private:
  // Pixel i covers [i/n, (i+1)/n); it is inside [lo, lo+len) when its center is.
  std::int64_t first(double lo) const { return static_cast<std::int64_t>(std::ceil(lo * n_ - 0.5 - 1e-9)); }
  std::int64_t count(double lo, double hi) const {
    const std::int64_t f = first(lo), l = first(hi);
    return l > f ? l - f : 0;
  }
  std::int64_t span(double lo, double len) const { return count(lo, lo + len); }
  std::int64_t overlap(double a, double al, double b, double bl) const {
    return count(a > b ? a : b, (a + al) < (b + bl) ? (a + al) : (b + bl));
  }

  std::int64_t n_;
};

}  // namespace vefuse::testing
