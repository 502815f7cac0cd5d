#pragma once

// Procedural scenes, their attribute rasters, templated text, and grounding annotations.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vefuse/errors.hpp"
#include "vefuse/geometry.hpp"

namespace vefuse {

inline constexpr std::array<std::string_view, 5> kShapeNames = {"circle", "square", "triangle", "star", "cross"};
inline constexpr std::array<std::string_view, 6> kColorNames = {"red", "green", "blue", "yellow", "purple", "orange"};
inline constexpr std::array<std::string_view, 3> kSizeNames = {"small", "medium", "large"};
/// Box side length in cells for each size category.
inline constexpr std::array<int, 3> kSizeCells = {3, 4, 5};

/// splitmix64 finalizer; derives independent stream seeds from structured keys.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return mix_seed(a ^ mix_seed(b)); }

struct SceneConfig {
  int width = 16;
  int height = 16;
  int min_objects = 2;
  int max_objects = 5;
  int num_shapes = 5;
  int num_colors = 6;
  bool unique_attributes = true;  // no two objects share (shape, color)
  bool allow_overlap = false;

  std::size_t channels() const { return static_cast<std::size_t>(num_shapes + num_colors + 2); }
};

inline void validate(const SceneConfig& c) {
  if (c.width < 8 || c.height < 8) throw ConfigurationError("scene canvas must be at least 8x8 cells");
  if (c.max_objects < 1 || c.min_objects < 1 || c.min_objects > c.max_objects) {
    throw ConfigurationError("scene object counts need 1 <= min_objects <= max_objects");
  }
  if (c.num_shapes < 1 || c.num_shapes > static_cast<int>(kShapeNames.size()) || c.num_colors < 1 ||
      c.num_colors > static_cast<int>(kColorNames.size())) {
    throw ConfigurationError("scene attribute counts exceed the closed vocabulary");
  }
}

struct SceneObject {
  int id = 0;
  int shape = 0;
  int color = 0;
  int size = 0;
  // Cell-aligned extent; `box` is the same rectangle normalized to [0,1].
  int cx = 0, cy = 0, cw = 0, ch = 0;
  Box box;
};

struct Scene {
  std::uint64_t scene_id = 0;
  std::uint64_t seed = 0;
  int width = 16;
  int height = 16;
  std::vector<SceneObject> objects;

  const SceneObject* object(int id) const {
    for (const auto& o : objects)
      if (o.id == id) return &o;
    return nullptr;
  }
};

/// Attribute channels per cell: shape one-hot, color one-hot, size scalar, occupancy bit.
/// Background cells are the zero vector.
struct Raster {
  int width = 0;
  int height = 0;
  std::size_t channels = 0;
  std::vector<double> data;  // [height][width][channels]

  const double* cell(int x, int y) const {
    return data.data() + (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * channels;
  }
  double* cell(int x, int y) {
    return data.data() + (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * channels;
  }
};

inline std::vector<double> attribute_encoding(const SceneObject& o, const SceneConfig& cfg) {
  std::vector<double> enc(cfg.channels(), 0.0);
  enc[static_cast<std::size_t>(o.shape)] = 1.0;
  enc[static_cast<std::size_t>(cfg.num_shapes + o.color)] = 1.0;
  enc[static_cast<std::size_t>(cfg.num_shapes + cfg.num_colors)] = static_cast<double>(o.size + 1) / 3.0;
  enc[static_cast<std::size_t>(cfg.num_shapes + cfg.num_colors + 1)] = 1.0;
  return enc;
}

/// Deterministic scene for (seed, config). Throws GenerationError when the config is infeasible.
inline Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg, std::uint64_t scene_id = 0) {
  validate(cfg);
  if (cfg.unique_attributes && cfg.max_objects > cfg.num_shapes * cfg.num_colors) {
    throw GenerationError("cannot place " + std::to_string(cfg.max_objects) + " objects with unique (shape,color) from " +
                          std::to_string(cfg.num_shapes * cfg.num_colors) + " combinations");
  }
  if (kSizeCells.front() > std::min(cfg.width, cfg.height)) throw GenerationError("canvas too small for any object");

  std::mt19937_64 rng(mix_seed(seed, 0x5ce7e));
  for (int attempt = 0; attempt < 64; ++attempt) {
    Scene s;
    s.scene_id = scene_id;
    s.seed = seed;
    s.width = cfg.width;
    s.height = cfg.height;
    const int count = std::uniform_int_distribution<int>(cfg.min_objects, cfg.max_objects)(rng);
    std::set<std::pair<int, int>> used;
    std::vector<std::vector<char>> occupied(static_cast<std::size_t>(cfg.height),
                                            std::vector<char>(static_cast<std::size_t>(cfg.width), 0));
    bool ok = true;
    for (int i = 0; i < count && ok; ++i) {
      SceneObject o;
      o.id = i;
      do {
        o.shape = std::uniform_int_distribution<int>(0, cfg.num_shapes - 1)(rng);
        o.color = std::uniform_int_distribution<int>(0, cfg.num_colors - 1)(rng);
      } while (cfg.unique_attributes && used.count({o.shape, o.color}));
      used.insert({o.shape, o.color});
      o.size = std::uniform_int_distribution<int>(0, 2)(rng);
      const int side = kSizeCells[static_cast<std::size_t>(o.size)];
      o.cw = std::min(side, cfg.width);
      o.ch = std::min(side, cfg.height);
      bool placed = false;
      for (int tries = 0; tries < 200 && !placed; ++tries) {
        o.cx = std::uniform_int_distribution<int>(0, cfg.width - o.cw)(rng);
        o.cy = std::uniform_int_distribution<int>(0, cfg.height - o.ch)(rng);
        placed = true;
        if (!cfg.allow_overlap) {
          for (int y = o.cy; y < o.cy + o.ch && placed; ++y)
            for (int x = o.cx; x < o.cx + o.cw; ++x)
              if (occupied[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)]) {
                placed = false;
                break;
              }
        }
      }
      if (!placed) {
        ok = false;
        break;
      }
      for (int y = o.cy; y < o.cy + o.ch; ++y)
        for (int x = o.cx; x < o.cx + o.cw; ++x) occupied[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)] = 1;
      o.box = {static_cast<double>(o.cx) / cfg.width, static_cast<double>(o.cy) / cfg.height,
               static_cast<double>(o.cw) / cfg.width, static_cast<double>(o.ch) / cfg.height};
      s.objects.push_back(o);
    }
    if (ok) return s;
  }
  throw GenerationError("could not place objects without overlap after 64 attempts (seed " + std::to_string(seed) + ")");
}

/// Paints objects in draw order; later objects overwrite earlier ones.
inline Raster render(const Scene& scene, const SceneConfig& cfg) {
  Raster r{scene.width, scene.height, cfg.channels(), {}};
  r.data.assign(static_cast<std::size_t>(scene.width * scene.height) * r.channels, 0.0);
  for (const auto& o : scene.objects) {
    const auto enc = attribute_encoding(o, cfg);
    for (int y = o.cy; y < o.cy + o.ch; ++y)
      for (int x = o.cx; x < o.cx + o.cw; ++x) std::copy(enc.begin(), enc.end(), r.cell(x, y));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Closed template vocabulary

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;

  Vocabulary() {
    for (std::string_view w : {"[PAD]", "[CLS]", "what", "color", "shape", "is", "the", "object", "a", "and", "?",
                               "there"})
      add(w);
    for (auto w : kShapeNames) add(w);
    for (auto w : kColorNames) add(w);
    for (auto w : kSizeNames) add(w);
  }

  std::size_t size() const { return words_.size(); }

  int id(std::string_view word) const {
    auto it = ids_.find(std::string(word));
    if (it == ids_.end()) throw DataError("word '" + std::string(word) + "' is outside the closed vocabulary");
    return it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw DataError("token id " + std::to_string(id) + " out of range");
    return words_[static_cast<std::size_t>(id)];
  }

  /// Whitespace tokenization; every word must be in the vocabulary.
  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    std::istringstream in{std::string(text)};
    std::string w;
    while (in >> w) out.push_back(id(w));
    return out;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? " " : "") + word(ids[i]);
    return s;
  }

 private:
  void add(std::string_view w) {
    ids_.emplace(std::string(w), static_cast<int>(words_.size()));
    words_.emplace_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

inline const Vocabulary& vocabulary() {
  static const Vocabulary v;
  return v;
}

// ---------------------------------------------------------------------------
// Task examples

enum class TaskKind { Matching, QA };

inline std::string_view task_name(TaskKind k) { return k == TaskKind::Matching ? "matching" : "qa"; }

inline TaskKind parse_task(std::string_view s) {
  if (s == "matching") return TaskKind::Matching;
  if (s == "qa") return TaskKind::QA;
  throw ConfigurationError("unknown task '" + std::string(s) + "' (expected matching or qa)");
}

/// A phrase in the text, annotated with the gold box of the object it denotes.
struct PhraseSpan {
  int begin = 0;  // token index into TaskExample::tokens
  int end = 0;    // exclusive; end - 1 is the phrase's last token
  int object_id = 0;
  Box gold;
};

struct TaskExample {
  std::uint64_t example_id = 0;
  TaskKind kind = TaskKind::QA;
  std::vector<int> tokens;
  std::size_t text_scene = 0;   // scene the text describes
  std::size_t image_scene = 0;  // scene shown to the model
  int label = 0;
  std::vector<PhraseSpan> phrases;

  bool image_matches_text() const { return text_scene == image_scene; }
};

struct QuestionConfig {
  bool color_questions = true;  // "what color is the <shape> ?"
  bool shape_questions = true;  // "what shape is the <color> object ?"
};

/// Size of the QA answer space for the enabled question types.
inline int qa_label_count(const SceneConfig& sc, const QuestionConfig& qc) {
  return (qc.color_questions ? sc.num_colors : 0) + (qc.shape_questions ? sc.num_shapes : 0);
}

inline int color_label(int color) { return color; }
inline int shape_label(int shape, const SceneConfig& sc, const QuestionConfig& qc) {
  return (qc.color_questions ? sc.num_colors : 0) + shape;
}

inline std::string answer_name(int label, const SceneConfig& sc, const QuestionConfig& qc) {
  if (qc.color_questions && label < sc.num_colors) return std::string(kColorNames[static_cast<std::size_t>(label)]);
  const int s = label - (qc.color_questions ? sc.num_colors : 0);
  return std::string(kShapeNames[static_cast<std::size_t>(s)]);
}

/// "a red circle and a blue square" with one phrase span per object.
inline std::pair<std::vector<int>, std::vector<PhraseSpan>> describe_scene(const Scene& scene) {
  const auto& v = vocabulary();
  std::vector<int> tokens;
  std::vector<PhraseSpan> spans;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    if (i) tokens.push_back(v.id("and"));
    const int begin = static_cast<int>(tokens.size());
    tokens.push_back(v.id("a"));
    tokens.push_back(v.id(kColorNames[static_cast<std::size_t>(o.color)]));
    tokens.push_back(v.id(kShapeNames[static_cast<std::size_t>(o.shape)]));
    spans.push_back({begin, static_cast<int>(tokens.size()), o.id, o.box});
  }
  return {tokens, spans};
}

inline std::multiset<std::pair<int, int>> attribute_signature(const Scene& s) {
  std::multiset<std::pair<int, int>> sig;
  for (const auto& o : s.objects) sig.insert({o.shape, o.color});
  return sig;
}

/// Matching example with an explicit branch: positive pairs the caption with its own scene,
/// negative with `negative_index`.
inline TaskExample make_matching_example(std::span<const Scene> corpus, std::size_t index, bool positive,
                                         std::size_t negative_index) {
  if (corpus.size() < 2) throw DataError("matching examples need a corpus of at least 2 scenes");
  if (!positive && negative_index == index) throw DataError("negative image must differ from the paired scene");
  TaskExample ex;
  ex.kind = TaskKind::Matching;
  ex.example_id = corpus[index].scene_id;
  auto [tokens, spans] = describe_scene(corpus[index]);
  ex.tokens = std::move(tokens);
  ex.phrases = std::move(spans);
  ex.text_scene = index;
  ex.image_scene = positive ? index : negative_index;
  ex.label = positive ? 1 : 0;
  return ex;
}

/// With probability 1/2 the paired scene (label 1), otherwise a different random scene whose
/// objects do not coincide with the caption's (label 0).
inline TaskExample make_matching_example(std::span<const Scene> corpus, std::size_t index, std::mt19937_64& rng) {
  if (corpus.size() < 2) throw DataError("matching examples need a corpus of at least 2 scenes");
  const bool positive = std::bernoulli_distribution(0.5)(rng);
  std::size_t neg = index;
  if (!positive) {
    const auto sig = attribute_signature(corpus[index]);
    std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 2);
    for (int tries = 0; tries < 100; ++tries) {
      neg = pick(rng);
      if (neg >= index) ++neg;
      if (attribute_signature(corpus[neg]) != sig) break;
    }
  }
  return make_matching_example(corpus, index, positive, neg);
}

/// Templated attribute question whose answer is unique in the scene.
/// Returns nullopt when no unambiguous question exists (caller resamples).
inline std::optional<TaskExample> make_qa_example(const Scene& scene, std::size_t scene_index, std::mt19937_64& rng,
                                                  const SceneConfig& sc = {}, const QuestionConfig& qc = {}) {
  if (scene.objects.empty()) return std::nullopt;
  const auto& v = vocabulary();
  std::map<int, int> shape_count, color_count;
  for (const auto& o : scene.objects) {
    ++shape_count[o.shape];
    ++color_count[o.color];
  }
  std::vector<const SceneObject*> color_targets, shape_targets;
  for (const auto& o : scene.objects) {
    if (qc.color_questions && shape_count[o.shape] == 1) color_targets.push_back(&o);
    if (qc.shape_questions && color_count[o.color] == 1) shape_targets.push_back(&o);
  }
  std::vector<int> kinds;
  if (!color_targets.empty()) kinds.push_back(0);
  if (!shape_targets.empty()) kinds.push_back(1);
  if (kinds.empty()) return std::nullopt;
  const int kind = kinds[std::uniform_int_distribution<std::size_t>(0, kinds.size() - 1)(rng)];
  const auto& pool = kind == 0 ? color_targets : shape_targets;
  const SceneObject& target = *pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];

  TaskExample ex;
  ex.kind = TaskKind::QA;
  ex.example_id = scene.scene_id;
  ex.text_scene = ex.image_scene = scene_index;
  if (kind == 0) {
    ex.tokens = v.encode("what color is the " + std::string(kShapeNames[static_cast<std::size_t>(target.shape)]) + " ?");
    ex.phrases.push_back({3, 5, target.id, target.box});
    ex.label = color_label(target.color);
  } else {
    ex.tokens = v.encode("what shape is the " + std::string(kColorNames[static_cast<std::size_t>(target.color)]) + " object ?");
    ex.phrases.push_back({3, 6, target.id, target.box});
    ex.label = shape_label(target.shape, sc, qc);
  }
  return ex;
}

}  // namespace vefuse
