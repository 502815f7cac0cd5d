#pragma once

// Seeded corpora of scenes plus task examples, and their JSON-lines serialization.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vefuse/scene.hpp"

namespace vefuse {

enum class Split : std::uint64_t { Train = 1, Validation = 2, Test = 3 };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

struct Corpus {
  TaskKind task = TaskKind::QA;
  SceneConfig scene_config;
  QuestionConfig question_config;
  std::vector<Scene> scenes;
  std::vector<TaskExample> examples;

  int label_count() const { return task == TaskKind::Matching ? 2 : qa_label_count(scene_config, question_config); }
};

/// Scene seed for (corpus seed, split, index). Splits occupy disjoint 2^40-wide index ranges
/// before mixing, so distinct (split, index) keys never share a pre-image.
inline std::uint64_t scene_seed(std::uint64_t corpus_seed, Split split, std::uint64_t index) {
  return mix_seed(corpus_seed, (static_cast<std::uint64_t>(split) << 40) | index);
}

/// One example per scene. QA scenes without an unambiguous question are regenerated from the
/// next seed in a per-index retry chain.
inline Corpus generate_corpus(TaskKind task, std::size_t num_scenes, std::uint64_t corpus_seed, Split split,
                              const SceneConfig& sc = {}, const QuestionConfig& qc = {}) {
  Corpus c;
  c.task = task;
  c.scene_config = sc;
  c.question_config = qc;
  if (task == TaskKind::QA && !qc.color_questions && !qc.shape_questions) {
    throw ConfigurationError("qa corpus needs at least one question type");
  }
  std::mt19937_64 rng(mix_seed(corpus_seed, 0xc0de0000ULL + static_cast<std::uint64_t>(split)));
  for (std::size_t i = 0; i < num_scenes; ++i) {
    const std::uint64_t id = (static_cast<std::uint64_t>(split) << 40) | i;
    std::uint64_t seed = scene_seed(corpus_seed, split, i);
    if (task == TaskKind::QA) {
      for (int retry = 0;; ++retry) {
        Scene s = generate_scene(seed, sc, id);
        if (auto ex = make_qa_example(s, i, rng, sc, qc)) {
          c.scenes.push_back(std::move(s));
          c.examples.push_back(std::move(*ex));
          break;
        }
        if (retry > 1000) throw GenerationError("no answerable question after 1000 resamples");
        seed = mix_seed(seed, 0x7e7);
      }
    } else {
      c.scenes.push_back(generate_scene(seed, sc, id));
    }
  }
  if (task == TaskKind::Matching) {
    if (num_scenes < 2) throw DataError("matching corpus needs at least 2 scenes");
    for (std::size_t i = 0; i < num_scenes; ++i) c.examples.push_back(make_matching_example(c.scenes, i, rng));
  }
  return c;
}

// ---------------------------------------------------------------------------
// JSON lines

inline nlohmann::json box_json(const Box& b) { return nlohmann::json::array({b.x, b.y, b.w, b.h}); }
inline Box box_from_json(const nlohmann::json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

inline nlohmann::json scene_json(const Scene& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects) {
    objs.push_back({{"id", o.id},
                    {"shape", kShapeNames[static_cast<std::size_t>(o.shape)]},
                    {"color", kColorNames[static_cast<std::size_t>(o.color)]},
                    {"size", kSizeNames[static_cast<std::size_t>(o.size)]},
                    {"cells", {o.cx, o.cy, o.cw, o.ch}},
                    {"box", box_json(o.box)}});
  }
  return {{"record", "scene"}, {"scene_id", s.scene_id}, {"seed", s.seed},
          {"width", s.width},  {"height", s.height},     {"objects", objs}};
}

template <std::size_t N>
int name_index(const std::array<std::string_view, N>& names, const std::string& s) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return static_cast<int>(i);
  throw DataError("unknown attribute '" + s + "'");
}

inline Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  s.scene_id = j.at("scene_id").get<std::uint64_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.width = j.at("width").get<int>();
  s.height = j.at("height").get<int>();
  for (const auto& o : j.at("objects")) {
    SceneObject so;
    so.id = o.at("id").get<int>();
    so.shape = name_index(kShapeNames, o.at("shape").get<std::string>());
    so.color = name_index(kColorNames, o.at("color").get<std::string>());
    so.size = name_index(kSizeNames, o.at("size").get<std::string>());
    const auto& cells = o.at("cells");
    so.cx = cells.at(0).get<int>();
    so.cy = cells.at(1).get<int>();
    so.cw = cells.at(2).get<int>();
    so.ch = cells.at(3).get<int>();
    so.box = box_from_json(o.at("box"));
    s.objects.push_back(so);
  }
  return s;
}

inline nlohmann::json example_json(const TaskExample& e) {
  nlohmann::json phrases = nlohmann::json::array();
  for (const auto& p : e.phrases)
    phrases.push_back({{"begin", p.begin}, {"end", p.end}, {"object_id", p.object_id}, {"gold", box_json(p.gold)}});
  return {{"record", "example"},
          {"example_id", e.example_id},
          {"task", task_name(e.kind)},
          {"text", vocabulary().decode(e.tokens)},
          {"tokens", e.tokens},
          {"text_scene", e.text_scene},
          {"image_scene", e.image_scene},
          {"label", e.label},
          {"phrases", phrases}};
}

inline TaskExample example_from_json(const nlohmann::json& j) {
  TaskExample e;
  e.example_id = j.at("example_id").get<std::uint64_t>();
  e.kind = parse_task(j.at("task").get<std::string>());
  e.tokens = j.at("tokens").get<std::vector<int>>();
  e.text_scene = j.at("text_scene").get<std::size_t>();
  e.image_scene = j.at("image_scene").get<std::size_t>();
  e.label = j.at("label").get<int>();
  for (const auto& p : j.at("phrases"))
    e.phrases.push_back({p.at("begin").get<int>(), p.at("end").get<int>(), p.at("object_id").get<int>(),
                         box_from_json(p.at("gold"))});
  return e;
}

inline void write_corpus(const Corpus& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write corpus file " + path.string());
  const auto& sc = c.scene_config;
  nlohmann::json header = {{"record", "header"},
                           {"format", "vefuse-corpus"},
                           {"version", 1},
                           {"task", task_name(c.task)},
                           {"vocab_size", vocabulary().size()},
                           {"scene_config",
                            {{"width", sc.width},
                             {"height", sc.height},
                             {"min_objects", sc.min_objects},
                             {"max_objects", sc.max_objects},
                             {"num_shapes", sc.num_shapes},
                             {"num_colors", sc.num_colors},
                             {"unique_attributes", sc.unique_attributes},
                             {"allow_overlap", sc.allow_overlap}}},
                           {"questions",
                            {{"color", c.question_config.color_questions},
                             {"shape", c.question_config.shape_questions}}},
                           {"scenes", c.scenes.size()},
                           {"examples", c.examples.size()}};
  out << header.dump() << '\n';
  for (const auto& s : c.scenes) out << scene_json(s).dump() << '\n';
  for (const auto& e : c.examples) out << example_json(e).dump() << '\n';
}

inline Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read corpus file " + path.string());
  Corpus c;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      const auto rec = j.at("record").get<std::string>();
      if (rec == "header") {
        if (j.at("format") != "vefuse-corpus") throw DataError("not a vefuse corpus");
        c.task = parse_task(j.at("task").get<std::string>());
        const auto& sc = j.at("scene_config");
        c.scene_config.width = sc.at("width");
        c.scene_config.height = sc.at("height");
        c.scene_config.min_objects = sc.at("min_objects");
        c.scene_config.max_objects = sc.at("max_objects");
        c.scene_config.num_shapes = sc.at("num_shapes");
        c.scene_config.num_colors = sc.at("num_colors");
        c.scene_config.unique_attributes = sc.at("unique_attributes");
        c.scene_config.allow_overlap = sc.at("allow_overlap");
        c.question_config.color_questions = j.at("questions").at("color");
        c.question_config.shape_questions = j.at("questions").at("shape");
        have_header = true;
      } else if (rec == "scene") {
        c.scenes.push_back(scene_from_json(j));
      } else if (rec == "example") {
        c.examples.push_back(example_from_json(j));
      } else {
        throw DataError("unknown record type '" + rec + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_header) throw DataError(path.string() + ": missing header record");
  for (const auto& e : c.examples)
    if (e.text_scene >= c.scenes.size() || e.image_scene >= c.scenes.size())
      throw DataError(path.string() + ": example references a missing scene");
  return c;
}

}  // namespace vefuse
