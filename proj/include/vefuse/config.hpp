#pragma once

// Experiment configuration and its `key = value` file format.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vefuse/encoders.hpp"
#include "vefuse/model.hpp"
#include "vefuse/scene.hpp"

namespace vefuse {

struct ExperimentConfig {
  TaskKind task = TaskKind::QA;
  std::vector<VEKind> ves = {VEKind::Region, VEKind::Grid, VEKind::Patch};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  int epochs = 10;
  int batch_size = 64;
  double lr = 5e-4;
  double warmup = 0.05;
  double weight_decay = 0.05;
  bool ve_dropout = false;
  int eval_sample = 512;
  int pool_size = 32;
  int retrieval_pools = 4;

  // corpus
  std::uint64_t corpus_seed = 7;
  int scenes = 5000;           // total; split into train / val / test
  double val_fraction = 0.1;
  double test_fraction = 0.1;
  SceneConfig scene;
  QuestionConfig questions;

  // model
  int layers = 4;
  int heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int max_text = 96;
  double dropout = 0.1;
  bool type_embeddings = true;

  VEConfig encoders;
  int workers = 1;
  std::string corpus_dir;  // empty: generate in memory
  std::string out_dir;

  int val_scenes() const { return static_cast<int>(scenes * val_fraction + 0.5); }
  int test_scenes() const { return static_cast<int>(scenes * test_fraction + 0.5); }
  int train_scenes() const { return scenes - val_scenes() - test_scenes(); }
};

inline std::string join_ves(const std::vector<VEKind>& ves, char sep = ',') {
  std::string s;
  for (VEKind k : ves) {
    if (!s.empty()) s += sep;
    s += ve_name(k);
  }
  return s;
}

inline std::vector<VEKind> parse_ve_list(const std::string& s) {
  std::vector<VEKind> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    const VEKind k = parse_ve_kind(item);
    if (std::find(out.begin(), out.end(), k) != out.end()) throw ConfigurationError("encoder '" + item + "' listed twice");
    out.push_back(k);
  }
  if (out.empty()) throw ConfigurationError("empty encoder list");
  return out;
}

inline void validate(const ExperimentConfig& c) {
  if (c.seeds.empty()) throw ConfigurationError("seeds must not be empty");
  if (c.batch_size < 1) throw ConfigurationError("batch_size must be >= 1");
  if (!(c.lr > 0.0)) throw ConfigurationError("lr must be positive");
  if (c.epochs < 0) throw ConfigurationError("epochs must be >= 0");
  if (!(c.warmup >= 0.0 && c.warmup < 1.0)) throw ConfigurationError("warmup must lie in [0,1)");
  if (c.weight_decay < 0.0) throw ConfigurationError("weight_decay must be >= 0");
  if (c.pool_size < 2) throw ConfigurationError("pool_size must be >= 2");
  if (c.eval_sample < 1) throw ConfigurationError("eval_sample must be >= 1");
  if (c.workers < 1) throw ConfigurationError("workers must be >= 1");
  if (c.val_fraction <= 0 || c.test_fraction <= 0 || c.val_fraction + c.test_fraction >= 1.0)
    throw ConfigurationError("val_fraction and test_fraction must be positive and sum below 1");
  if (c.train_scenes() < 2 || c.val_scenes() < 2 || c.test_scenes() < 2)
    throw ConfigurationError("scenes too small for a train/val/test split");
  if (c.ves.empty()) throw ConfigurationError("ves must name at least one encoder");
  if (c.ve_dropout && c.ves.size() != 2)
    throw ConfigurationError("ve_dropout training is only defined for 2-encoder models");
  validate(c.scene);
  validate(c.encoders);
}

namespace detail {

inline std::string trim(std::string s) {
  s.erase(0, s.find_first_not_of(" \t\r"));
  const auto e = s.find_last_not_of(" \t\r");
  s.erase(e == std::string::npos ? 0 : e + 1);
  return s;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigurationError("key '" + key + "': cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigurationError("key '" + key + "': expected true or false, got '" + v + "'");
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, Setter>& config_setters() {
  static const std::map<std::string, Setter> setters = [] {
    std::map<std::string, Setter> m;
    auto integer = [&m](const char* name, int ExperimentConfig::*f) {
      m[name] = [f](ExperimentConfig& c, const std::string& k, const std::string& v) { c.*f = parse_number<int>(k, v); };
    };
    auto real = [&m](const char* name, double ExperimentConfig::*f) {
      m[name] = [f](ExperimentConfig& c, const std::string& k, const std::string& v) { c.*f = parse_number<double>(k, v); };
    };
    auto flag = [&m](const char* name, bool ExperimentConfig::*f) {
      m[name] = [f](ExperimentConfig& c, const std::string& k, const std::string& v) { c.*f = parse_bool(k, v); };
    };
    m["task"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      try {
        c.task = parse_task(v);
      } catch (const std::exception&) {
        throw ConfigurationError("key '" + k + "': expected qa or matching, got '" + v + "'");
      }
    };
    m["ves"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      try {
        c.ves = parse_ve_list(v);
      } catch (const ConfigurationError& e) {
        throw ConfigurationError("key '" + k + "': " + e.what());
      }
    };
    m["seeds"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.seeds.clear();
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) c.seeds.push_back(parse_number<std::uint64_t>(k, item));
      }
    };
    integer("epochs", &ExperimentConfig::epochs);
    integer("batch_size", &ExperimentConfig::batch_size);
    real("lr", &ExperimentConfig::lr);
    real("warmup", &ExperimentConfig::warmup);
    real("weight_decay", &ExperimentConfig::weight_decay);
    flag("ve_dropout", &ExperimentConfig::ve_dropout);
    integer("eval_sample", &ExperimentConfig::eval_sample);
    integer("pool_size", &ExperimentConfig::pool_size);
    integer("retrieval_pools", &ExperimentConfig::retrieval_pools);
    m["corpus_seed"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.corpus_seed = parse_number<std::uint64_t>(k, v);
    };
    integer("scenes", &ExperimentConfig::scenes);
    real("val_fraction", &ExperimentConfig::val_fraction);
    real("test_fraction", &ExperimentConfig::test_fraction);
    integer("layers", &ExperimentConfig::layers);
    integer("heads", &ExperimentConfig::heads);
    integer("d_model", &ExperimentConfig::d_model);
    integer("d_ff", &ExperimentConfig::d_ff);
    integer("max_text", &ExperimentConfig::max_text);
    real("dropout", &ExperimentConfig::dropout);
    flag("type_embeddings", &ExperimentConfig::type_embeddings);
    integer("workers", &ExperimentConfig::workers);
    m["corpus"] = [](ExperimentConfig& c, const std::string&, const std::string& v) { c.corpus_dir = v; };
    m["out"] = [](ExperimentConfig& c, const std::string&, const std::string& v) { c.out_dir = v; };

    auto scene_int = [&m](const char* name, int SceneConfig::*f) {
      m[name] = [f](ExperimentConfig& c, const std::string& k, const std::string& v) {
        c.scene.*f = parse_number<int>(k, v);
      };
    };
    scene_int("canvas_width", &SceneConfig::width);
    scene_int("canvas_height", &SceneConfig::height);
    scene_int("min_objects", &SceneConfig::min_objects);
    scene_int("max_objects", &SceneConfig::max_objects);
    scene_int("num_shapes", &SceneConfig::num_shapes);
    scene_int("num_colors", &SceneConfig::num_colors);
    m["allow_overlap"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.scene.allow_overlap = parse_bool(k, v);
    };
    m["color_questions"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.questions.color_questions = parse_bool(k, v);
    };
    m["shape_questions"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.questions.shape_questions = parse_bool(k, v);
    };
    for (VEKind kind : kAllVEKinds) {
      const auto i = static_cast<std::size_t>(kind);
      const std::string n(ve_name(kind));
      m[n + "_tokens"] = [i](ExperimentConfig& c, const std::string& k, const std::string& v) {
        c.encoders.counts[i] = parse_number<int>(k, v);
      };
      m[n + "_dim"] = [i](ExperimentConfig& c, const std::string& k, const std::string& v) {
        c.encoders.dims[i] = parse_number<int>(k, v);
      };
    }
    m["frozen_seed"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.encoders.frozen_seed = parse_number<std::uint64_t>(k, v);
    };
    m["region_jitter"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.encoders.region_jitter = parse_number<double>(k, v);
    };
    return m;
  }();
  return setters;
}

}  // namespace detail

/// Applies one `key = value` assignment.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  const auto& s = detail::config_setters();
  auto it = s.find(key);
  if (it == s.end()) throw ConfigurationError("unknown key '" + key + "'");
  it->second(c, key, value);
}

/// Parses `key = value` lines; `#` starts a comment. Errors carry "<source>:<line>:".
inline ExperimentConfig parse_config(std::istream& in, const std::string& source = "<config>",
                                     ExperimentConfig base = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigurationError(where + "expected 'key = value', got '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigurationError(where + "missing key");
    try {
      set_config_value(base, key, value);
    } catch (const ConfigurationError& e) {
      throw ConfigurationError(where + e.what());
    }
  }
  validate(base);
  return base;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config " + path.string());
  return parse_config(in, path.string(), std::move(base));
}

/// Canonical key = value text, readable by parse_config.
inline std::string config_text(const ExperimentConfig& c) {
  std::ostringstream o;
  o.precision(17);
  std::string seeds;
  for (auto s : c.seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
  o << "task = " << task_name(c.task) << "\nves = " << join_ves(c.ves) << "\nseeds = " << seeds
    << "\nepochs = " << c.epochs << "\nbatch_size = " << c.batch_size << "\nlr = " << c.lr
    << "\nwarmup = " << c.warmup << "\nweight_decay = " << c.weight_decay
    << "\nve_dropout = " << (c.ve_dropout ? "true" : "false") << "\neval_sample = " << c.eval_sample
    << "\npool_size = " << c.pool_size << "\nretrieval_pools = " << c.retrieval_pools
    << "\ncorpus_seed = " << c.corpus_seed << "\nscenes = " << c.scenes << "\nval_fraction = " << c.val_fraction
    << "\ntest_fraction = " << c.test_fraction << "\ncanvas_width = " << c.scene.width
    << "\ncanvas_height = " << c.scene.height << "\nmin_objects = " << c.scene.min_objects
    << "\nmax_objects = " << c.scene.max_objects << "\nnum_shapes = " << c.scene.num_shapes
    << "\nnum_colors = " << c.scene.num_colors << "\nallow_overlap = " << (c.scene.allow_overlap ? "true" : "false")
    << "\ncolor_questions = " << (c.questions.color_questions ? "true" : "false")
    << "\nshape_questions = " << (c.questions.shape_questions ? "true" : "false") << "\nlayers = " << c.layers
    << "\nheads = " << c.heads << "\nd_model = " << c.d_model << "\nd_ff = " << c.d_ff
    << "\nmax_text = " << c.max_text << "\ndropout = " << c.dropout
    << "\ntype_embeddings = " << (c.type_embeddings ? "true" : "false");
  for (VEKind k : kAllVEKinds)
    o << "\n" << ve_name(k) << "_tokens = " << c.encoders.count(k) << "\n" << ve_name(k) << "_dim = " << c.encoders.dim(k);
  o << "\nfrozen_seed = " << c.encoders.frozen_seed << "\nregion_jitter = " << c.encoders.region_jitter;
  o << "\nworkers = " << c.workers;
  if (!c.corpus_dir.empty()) o << "\ncorpus = " << c.corpus_dir;
  if (!c.out_dir.empty()) o << "\nout = " << c.out_dir;
  o << "\n";
  return o.str();
}

/// Hash of everything that affects a trained cell's result (not paths, seeds list or workers).
inline std::uint64_t config_hash(const ExperimentConfig& c) {
  ExperimentConfig k = c;
  k.seeds = {0};
  k.workers = 1;
  k.corpus_dir.clear();
  k.out_dir.clear();
  return fnv1a(config_text(k));
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline ModelConfig model_config_for(const ExperimentConfig& c, const std::vector<VEKind>& ves, int labels) {
  ModelConfig m;
  m.layers = c.layers;
  m.heads = c.heads;
  m.d_model = c.d_model;
  m.d_ff = c.d_ff;
  m.vocab_size = static_cast<int>(vocabulary().size());
  m.max_text = c.max_text;
  m.ves = ves;
  m.labels = labels;
  m.type_embeddings = c.type_embeddings;
  m.dropout = c.dropout;
  m.ve_dims = c.encoders.dims;
  return m;
}

}  // namespace vefuse
