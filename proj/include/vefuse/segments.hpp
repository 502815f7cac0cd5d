#pragma once

// Modality layout of a fused sequence and the attention captured over it.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vefuse/geometry.hpp"
#include "vefuse/scene.hpp"
#include "vefuse/tensor.hpp"

namespace vefuse {

enum class Modality { Cls = 0, Text = 1, Region = 2, Grid = 3, Patch = 4 };

inline Modality modality_of(VEKind k) { return static_cast<Modality>(static_cast<int>(k) + 2); }
inline bool is_visual(Modality m) { return m != Modality::Cls && m != Modality::Text; }
inline VEKind ve_of(Modality m) {
  if (!is_visual(m)) throw ConfigurationError("modality is not a vision encoder");
  return static_cast<VEKind>(static_cast<int>(m) - 2);
}

inline std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::Cls: return "cls";
    case Modality::Text: return "text";
    default: return ve_name(ve_of(m));
  }
}

inline Modality parse_modality(std::string_view s) {
  if (s == "cls") return Modality::Cls;
  if (s == "text") return Modality::Text;
  return modality_of(parse_ve_kind(s));
}

struct Segment {
  Modality modality;
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
};

/// CLS at 0, then TEXT, then one contiguous range per present encoder, in configured order.
struct SegmentMap {
  std::vector<Segment> segments;
  std::size_t length = 0;

  const Segment* find(Modality m) const {
    for (const auto& s : segments)
      if (s.modality == m) return &s;
    return nullptr;
  }

  std::vector<Modality> visual() const {
    std::vector<Modality> out;
    for (const auto& s : segments)
      if (is_visual(s.modality)) out.push_back(s.modality);
    return out;
  }

  /// Throws unless segments are disjoint, contiguous from 0 and cover [0, length).
  void check() const {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < segments.size(); ++i) {
      const auto& s = segments[i];
      if (s.begin != pos || s.end < s.begin) throw DimensionError("segment map is not contiguous");
      if ((i == 0) != (s.modality == Modality::Cls)) throw DimensionError("CLS must be the first segment");
      if (s.modality == Modality::Cls && s.size() != 1) throw DimensionError("CLS segment must hold one token");
      pos = s.end;
    }
    if (pos != length) throw DimensionError("segment map does not cover the sequence");
  }
};

/// Post-softmax weights of every layer, [heads, L, L] each, for one example.
struct AttentionRecord {
  std::uint64_t example_id = 0;
  SegmentMap segments;
  std::vector<Tensor> layers;
  // Visual footprints per present encoder, in segment order, for geometric metrics.
  std::vector<std::pair<VEKind, std::vector<TokenFootprint>>> footprints;
  std::vector<PhraseSpan> phrases;  // token offsets relative to the text segment

  std::size_t num_layers() const { return layers.size(); }
  std::size_t num_heads() const { return layers.empty() ? 0 : layers[0].shape()[0]; }
  std::size_t length() const { return segments.length; }
  double a(std::size_t layer, std::size_t head, std::size_t from, std::size_t to) const {
    const std::size_t len = length();
    return layers[layer][(head * len + from) * len + to];
  }
  const std::vector<TokenFootprint>* footprints_of(VEKind k) const {
    for (const auto& [kind, f] : footprints)
      if (kind == k) return &f;
    return nullptr;
  }
};

}  // namespace vefuse
