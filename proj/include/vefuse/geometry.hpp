#pragma once

// Axis-aligned footprint geometry in normalized image coordinates.

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vefuse/errors.hpp"

namespace vefuse {

enum class VEKind { Region = 0, Grid = 1, Patch = 2 };

inline constexpr VEKind kAllVEKinds[] = {VEKind::Region, VEKind::Grid, VEKind::Patch};

inline std::string_view ve_name(VEKind k) {
  switch (k) {
    case VEKind::Region: return "region";
    case VEKind::Grid: return "grid";
    case VEKind::Patch: return "patch";
  }
  return "?";
}

inline char ve_letter(VEKind k) { return static_cast<char>(ve_name(k)[0] - 'a' + 'A'); }

inline VEKind parse_ve_kind(std::string_view s) {
  for (VEKind k : kAllVEKinds)
    if (s == ve_name(k)) return k;
  throw ConfigurationError("unknown vision encoder '" + std::string(s) + "' (expected region, grid or patch)");
}

struct Box {
  double x = 0.0, y = 0.0, w = 0.0, h = 0.0;

  double area() const { return w * h; }
  double right() const { return x + w; }
  double bottom() const { return y + h; }
  bool valid() const {
    constexpr double tol = 1e-9;
    return w >= 0.0 && h >= 0.0 && x >= -tol && y >= -tol && x + w <= 1.0 + tol && y + h <= 1.0 + tol;
  }
  friend bool operator==(const Box&, const Box&) = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.right(), b.right()) - std::max(a.x, b.x);
  const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
  return (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
}

/// Intersection over union; 0 when either box is degenerate.
inline double iou(const Box& a, const Box& b) {
  const double aa = a.area(), ab = b.area();
  if (aa <= 0.0 || ab <= 0.0) return 0.0;
  const double inter = intersection_area(a, b);
  const double uni = aa + ab - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// A visual token's image rectangle. Padding tokens take part in no overlap set.
struct TokenFootprint {
  Box box;
  bool padding = false;
};

/// Minimum IoU (exclusive) for a token of `kind` to count as overlapping.
inline double overlap_threshold(VEKind kind) { return kind == VEKind::Region ? 0.5 : 0.1; }

/// For each token t of A, the indices j of B's non-padding tokens with iou(t, j) > threshold.
/// Padding tokens of A get empty sets.
inline std::vector<std::vector<int>> overlap_sets(std::span<const TokenFootprint> a,
                                                  std::span<const TokenFootprint> b, double threshold) {
  std::vector<std::vector<int>> sets(a.size());
  for (std::size_t t = 0; t < a.size(); ++t) {
    if (a[t].padding) continue;
    for (std::size_t j = 0; j < b.size(); ++j) {
      if (b[j].padding) continue;
      if (iou(a[t].box, b[j].box) > threshold) sets[t].push_back(static_cast<int>(j));
    }
  }
  return sets;
}

/// Tokens of a `kind` encoder whose footprint overlaps the gold box beyond the kind's threshold.
inline std::vector<int> gold_overlap_set(const Box& gold, std::span<const TokenFootprint> tokens, VEKind kind) {
  const double thr = overlap_threshold(kind);
  std::vector<int> out;
  for (std::size_t j = 0; j < tokens.size(); ++j)
    if (!tokens[j].padding && iou(gold, tokens[j].box) > thr) out.push_back(static_cast<int>(j));
  return out;
}

/// Overlap sets from every token of a source encoder into a target encoder.
struct PairOverlap {
  VEKind source;
  VEKind target;
  double threshold;
  std::vector<std::vector<int>> overlapping;      // I_{|t}
  std::vector<std::vector<int>> non_overlapping;  // target's non-padding tokens minus I_{|t}
};

struct OverlapIndex {
  std::vector<PairOverlap> pairs;
  std::vector<std::pair<VEKind, std::vector<int>>> gold;  // per encoder, for one gold box

  const PairOverlap* find(VEKind source, VEKind target) const {
    for (const auto& p : pairs)
      if (p.source == source && p.target == target) return &p;
    return nullptr;
  }
};

/// Overlap sets for the ordered pair, using the target encoder's threshold.
inline PairOverlap build_pair_overlap(VEKind source, std::span<const TokenFootprint> a, VEKind target,
                                      std::span<const TokenFootprint> b) {
  PairOverlap p{source, target, overlap_threshold(target), overlap_sets(a, b, overlap_threshold(target)), {}};
  p.non_overlapping.resize(a.size());
  for (std::size_t t = 0; t < a.size(); ++t) {
    if (a[t].padding) continue;
    const auto& in = p.overlapping[t];
    for (std::size_t j = 0; j < b.size(); ++j) {
      if (b[j].padding) continue;
      if (!std::binary_search(in.begin(), in.end(), static_cast<int>(j))) p.non_overlapping[t].push_back(static_cast<int>(j));
    }
  }
  return p;
}

}  // namespace vefuse
