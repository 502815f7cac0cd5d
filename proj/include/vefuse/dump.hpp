#pragma once

// Attention dumps: <id>.json sidecar (layout, phrases, footprints, gold sets) next to an
// <id>.f32 blob holding the weights as 32-bit floats.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "vefuse/corpus.hpp"
#include "vefuse/encoders.hpp"
#include "vefuse/segments.hpp"

namespace vefuse {

inline constexpr char kDumpMagic[4] = {'V', 'F', 'A', 'D'};
inline constexpr std::uint32_t kDumpVersion = 1;

inline nlohmann::json footprint_json(const TokenFootprint& f) {
  return {{"box", box_json(f.box)}, {"padding", f.padding}};
}

inline nlohmann::json segment_map_json(const SegmentMap& s) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& g : s.segments)
    segs.push_back({{"modality", modality_name(g.modality)}, {"begin", g.begin}, {"end", g.end}});
  return {{"length", s.length}, {"segments", segs}};
}

inline SegmentMap segment_map_from_json(const nlohmann::json& j) {
  SegmentMap s;
  s.length = j.at("length");
  for (const auto& g : j.at("segments"))
    s.segments.push_back({parse_modality(g.at("modality").get<std::string>()), g.at("begin"), g.at("end")});
  s.check();
  return s;
}

/// Writes `<dir>/<example_id>.json` and `<dir>/<example_id>.f32`; returns the sidecar path.
inline std::filesystem::path write_attention_dump(const std::filesystem::path& dir, const AttentionRecord& rec) {
  std::filesystem::create_directories(dir);
  const std::string stem = std::to_string(rec.example_id);
  const auto blob = dir / (stem + ".f32");
  {
    std::ofstream out(blob, std::ios::binary);
    if (!out) throw DataError("cannot write " + blob.string());
    out.write(kDumpMagic, 4);
    detail::put(out, kDumpVersion);
    detail::put(out, static_cast<std::uint32_t>(rec.num_layers()));
    detail::put(out, static_cast<std::uint32_t>(rec.num_heads()));
    detail::put(out, static_cast<std::uint32_t>(rec.length()));
    for (const auto& t : rec.layers) {
      std::vector<float> f(t.values().begin(), t.values().end());
      out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
    }
    if (!out) throw DataError("failed writing " + blob.string());
  }

  nlohmann::json fps = nlohmann::json::object();
  for (const auto& [k, f] : rec.footprints) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : f) arr.push_back(footprint_json(t));
    fps[std::string(ve_name(k))] = arr;
  }
  nlohmann::json phrases = nlohmann::json::array();
  for (const auto& p : rec.phrases) {
    nlohmann::json gold_sets = nlohmann::json::object();
    for (const auto& [k, f] : rec.footprints) gold_sets[std::string(ve_name(k))] = gold_overlap_set(p.gold, f, k);
    phrases.push_back({{"begin", p.begin}, {"end", p.end}, {"object_id", p.object_id}, {"gold", box_json(p.gold)},
                       {"gold_sets", gold_sets}});
  }
  const nlohmann::json side = {{"format", "vefuse-attention"},
                               {"version", kDumpVersion},
                               {"example_id", rec.example_id},
                               {"blob", blob.filename().string()},
                               {"layers", rec.num_layers()},
                               {"heads", rec.num_heads()},
                               {"segment_map", segment_map_json(rec.segments)},
                               {"phrases", phrases},
                               {"footprints", fps}};
  const auto path = dir / (stem + ".json");
  std::ofstream(path) << side.dump(1) << '\n';
  return path;
}

inline AttentionRecord read_attention_dump(const std::filesystem::path& sidecar) {
  std::ifstream in(sidecar);
  if (!in) throw DataError("cannot read " + sidecar.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(sidecar.string() + ": " + e.what());
  }
  if (j.value("format", "") != "vefuse-attention") throw CompatibilityError(sidecar.string() + ": not an attention dump");
  AttentionRecord rec;
  rec.example_id = j.at("example_id");
  rec.segments = segment_map_from_json(j.at("segment_map"));
  for (auto it = j.at("footprints").begin(); it != j.at("footprints").end(); ++it) {
    std::vector<TokenFootprint> f;
    for (const auto& t : it.value()) f.push_back({box_from_json(t.at("box")), t.at("padding")});
    rec.footprints.emplace_back(parse_ve_kind(it.key()), std::move(f));
  }
  // JSON objects come back key-sorted; restore segment order.
  std::vector<std::pair<VEKind, std::vector<TokenFootprint>>> ordered;
  for (Modality m : rec.segments.visual())
    for (auto& fp : rec.footprints)
      if (fp.first == ve_of(m)) ordered.push_back(std::move(fp));
  rec.footprints = std::move(ordered);
  for (const auto& p : j.at("phrases")) rec.phrases.push_back({p.at("begin"), p.at("end"), p.at("object_id"), box_from_json(p.at("gold"))});

  const auto blob = sidecar.parent_path() / j.at("blob").get<std::string>();
  std::ifstream b(blob, std::ios::binary);
  if (!b) throw DataError("missing attention blob " + blob.string());
  const std::string what = "attention blob " + blob.string();
  char magic[4];
  if (!b.read(magic, 4) || std::memcmp(magic, kDumpMagic, 4) != 0) throw CompatibilityError(blob.string() + ": bad magic");
  if (detail::get<std::uint32_t>(b, what) != kDumpVersion) throw CompatibilityError(blob.string() + ": unsupported version");
  const auto layers = detail::get<std::uint32_t>(b, what);
  const auto heads = detail::get<std::uint32_t>(b, what);
  const auto len = detail::get<std::uint32_t>(b, what);
  if (len != rec.segments.length) throw CompatibilityError(blob.string() + ": length disagrees with sidecar");
  const std::size_t per = static_cast<std::size_t>(heads) * len * len;
  std::vector<float> f(per);
  for (std::uint32_t l = 0; l < layers; ++l) {
    if (!b.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(per * sizeof(float))))
      throw DataError("truncated " + what);
    rec.layers.emplace_back(Shape{heads, len, len}, std::vector<double>(f.begin(), f.end()));
  }
  return rec;
}

}  // namespace vefuse
