#pragma once

// Single-stream fusion transformer: [CLS] + text + projected visual tokens, pre-norm blocks,
// classification head on the CLS output.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vefuse/encoders.hpp"
#include "vefuse/optim.hpp"
#include "vefuse/segments.hpp"
#include "vefuse/tensor.hpp"

namespace vefuse {

struct ModelConfig {
  int layers = 4;
  int heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int vocab_size = 0;
  int max_text = 96;
  std::vector<VEKind> ves;
  int labels = 2;
  bool type_embeddings = true;
  double dropout = 0.1;
  std::array<int, 3> ve_dims = {48, 64, 24};

  int ve_dim(VEKind k) const { return ve_dims[static_cast<std::size_t>(k)]; }
  bool has(VEKind k) const { return std::find(ves.begin(), ves.end(), k) != ves.end(); }
};

inline void validate(const ModelConfig& c) {
  if (c.layers < 1 || c.heads < 1 || c.d_model < 2 || c.d_ff < 1) {
    throw ConfigurationError("model needs layers, heads, d_ff >= 1 and d_model >= 2");
  }
  if (c.d_model % c.heads != 0) {
    throw ConfigurationError("d_model " + std::to_string(c.d_model) + " not divisible by " + std::to_string(c.heads) +
                             " heads");
  }
  if (c.ves.empty() || c.ves.size() > 3) throw ConfigurationError("model needs 1 to 3 vision encoders");
  for (std::size_t i = 0; i < c.ves.size(); ++i)
    for (std::size_t j = i + 1; j < c.ves.size(); ++j)
      if (c.ves[i] == c.ves[j]) throw ConfigurationError("vision encoder listed twice");
  if (c.vocab_size < 2) throw ConfigurationError("vocabulary size must be >= 2");
  if (c.max_text < 1) throw ConfigurationError("max text length must be >= 1");
  if (c.labels < 2) throw ConfigurationError("task head needs at least 2 labels");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw ConfigurationError("dropout must lie in [0,1)");
}

inline nlohmann::json model_config_json(const ModelConfig& c) {
  std::vector<std::string> ves;
  for (VEKind k : c.ves) ves.emplace_back(ve_name(k));
  return {{"layers", c.layers},         {"heads", c.heads},     {"d_model", c.d_model},
          {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size}, {"max_text", c.max_text},
          {"ves", ves},                 {"labels", c.labels},   {"type_embeddings", c.type_embeddings},
          {"dropout", c.dropout},       {"ve_dims", c.ve_dims}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.d_model = j.at("d_model");
  c.d_ff = j.at("d_ff");
  c.vocab_size = j.at("vocab_size");
  c.max_text = j.at("max_text");
  c.ves.clear();
  for (const auto& v : j.at("ves")) c.ves.push_back(parse_ve_kind(v.get<std::string>()));
  c.labels = j.at("labels");
  c.type_embeddings = j.at("type_embeddings");
  c.dropout = j.at("dropout");
  c.ve_dims = j.at("ve_dims").get<std::array<int, 3>>();
  return c;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

struct ForwardOptions {
  bool capture = false;
  bool train = false;              // enables dropout; needs rng
  std::mt19937_64* rng = nullptr;
  std::vector<VEKind> drop;        // encoders whose segment is removed before assembly
};

struct ForwardResult {
  Tensor logits;  // [1, labels]
  SegmentMap segments;
  std::vector<Tensor> attention;  // per layer [heads, L, L] when captured
  bool truncated = false;
};

class FusionModel {
 public:
  /// Every parameter is drawn from its own stream keyed by (seed, name), so models that share
  /// a parameter name share its initial value regardless of which encoders are active.
  FusionModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    validate(cfg_);
    const auto d = static_cast<std::size_t>(cfg_.d_model), ff = static_cast<std::size_t>(cfg_.d_ff);
    auto normal = [&](const std::string& name, Shape shape, double sd) {
      std::mt19937_64 rng(mix_seed(seed, fnv1a(name)));
      std::normal_distribution<double> n(0.0, sd);
      std::vector<double> v(shape_numel(shape));
      for (auto& x : v) x = n(rng);
      params_[name] = Tensor(std::move(shape), std::move(v), true);
    };
    auto xavier = [&](const std::string& name, std::size_t in, std::size_t out) {
      std::mt19937_64 rng(mix_seed(seed, fnv1a(name)));
      params_[name] = xavier_uniform(in, out, rng);
    };
    auto constant = [&](const std::string& name, std::size_t n, double v) {
      params_[name] = Tensor(Shape{n}, v, true);
    };

    normal("embed.token", {static_cast<std::size_t>(cfg_.vocab_size), d}, 0.1);
    normal("embed.position", {static_cast<std::size_t>(cfg_.max_text) + 1, d}, 0.1);
    if (cfg_.type_embeddings) normal("embed.type", {4, d}, 0.1);
    for (VEKind k : cfg_.ves) {
      const std::string p = "proj." + std::string(ve_name(k));
      xavier(p + ".w1", static_cast<std::size_t>(cfg_.ve_dim(k)), d);
      constant(p + ".b1", d, 0.0);
      xavier(p + ".w2", d, d);
      constant(p + ".b2", d, 0.0);
      projections_.push_back({p, static_cast<std::size_t>(cfg_.ve_dim(k)), d});
    }
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = layer_prefix(l);
      constant(p + "ln1.gain", d, 1.0);
      constant(p + "ln1.bias", d, 0.0);
      constant(p + "ln2.gain", d, 1.0);
      constant(p + "ln2.bias", d, 0.0);
      for (const char* w : {"wq", "wk", "wv", "wo"}) xavier(p + "attn." + w, d, d);
      for (const char* b : {"bq", "bk", "bv", "bo"}) constant(p + "attn." + b, d, 0.0);
      xavier(p + "ffn.w1", d, ff);
      constant(p + "ffn.b1", ff, 0.0);
      xavier(p + "ffn.w2", ff, d);
      constant(p + "ffn.b2", d, 0.0);
    }
    constant("final.ln.gain", d, 1.0);
    constant("final.ln.bias", d, 0.0);
    xavier("head.w", d, static_cast<std::size_t>(cfg_.labels));
    constant("head.b", static_cast<std::size_t>(cfg_.labels), 0.0);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterMap& params() { return params_; }
  const ParameterMap& params() const { return params_; }
  std::size_t truncation_count() const { return truncations_->load(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.size();
    return n;
  }

  /// Assembles the fused input sequence. `tokens[i]` belongs to config().ves[i]; dropped
  /// encoders are skipped before concatenation.
  std::pair<Tensor, SegmentMap> build_input(std::span<const int> text, std::span<const VisualTokenSet* const> tokens,
                                            const std::vector<VEKind>& drop, bool* truncated = nullptr) const {
    if (tokens.size() != cfg_.ves.size()) {
      throw ConfigurationError("model expects " + std::to_string(cfg_.ves.size()) + " token sets, got " +
                               std::to_string(tokens.size()));
    }
    for (VEKind k : drop)
      if (!cfg_.has(k)) throw ConfigurationError("cannot drop inactive encoder " + std::string(ve_name(k)));

    std::size_t n = text.size();
    if (n > static_cast<std::size_t>(cfg_.max_text)) {
      n = static_cast<std::size_t>(cfg_.max_text);
      ++*truncations_;
      if (truncated) *truncated = true;
    }
    std::vector<int> ids;
    ids.reserve(n + 1);
    ids.push_back(vocabulary().id("[CLS]"));
    for (std::size_t i = 0; i < n; ++i) {
      if (text[i] < 0 || text[i] >= cfg_.vocab_size) throw DataError("token id " + std::to_string(text[i]) + " outside vocabulary");
      ids.push_back(text[i]);
    }
    std::vector<int> positions(ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);

    Tensor txt = add(embedding(params_.at("embed.token"), ids), embedding(params_.at("embed.position"), positions));
    if (cfg_.type_embeddings) txt = add_row(txt, type_row(0));

    SegmentMap seg;
    seg.segments.push_back({Modality::Cls, 0, 1});
    seg.segments.push_back({Modality::Text, 1, ids.size()});
    std::vector<Tensor> parts = {txt};
    std::size_t pos = ids.size();
    for (std::size_t i = 0; i < cfg_.ves.size(); ++i) {
      const VEKind k = cfg_.ves[i];
      if (std::find(drop.begin(), drop.end(), k) != drop.end()) continue;
      const VisualTokenSet* t = tokens[i];
      if (!t || t->kind != k) throw ConfigurationError("token set " + std::to_string(i) + " is not " + std::string(ve_name(k)));
      Tensor v = projections_[i](t->features, params_);
      if (cfg_.type_embeddings) v = add_row(v, type_row(static_cast<int>(k) + 1));
      parts.push_back(v);
      seg.segments.push_back({modality_of(k), pos, pos + t->count()});
      pos += t->count();
    }
    seg.length = pos;
    return {concat_rows(parts), std::move(seg)};
  }

  ForwardResult forward(std::span<const int> text, std::span<const VisualTokenSet* const> tokens,
                        const ForwardOptions& opt = {}) const {
    ForwardResult r;
    auto [x, seg] = build_input(text, tokens, opt.drop, &r.truncated);
    r.segments = std::move(seg);
    const bool drop_on = opt.train && cfg_.dropout > 0.0;
    if (drop_on && !opt.rng) throw ConfigurationError("training forward needs an rng for dropout");
    const auto heads = static_cast<std::size_t>(cfg_.heads);

    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = layer_prefix(l);
      const Tensor h = layer_norm(x, params_.at(p + "ln1.gain"), params_.at(p + "ln1.bias"));
      AttentionOutput att = multi_head_attention(h, heads, attention_params(p));
      Tensor a = att.output;
      if (drop_on) a = apply_dropout(a, *opt.rng);
      x = add(x, a);
      const Tensor h2 = layer_norm(x, params_.at(p + "ln2.gain"), params_.at(p + "ln2.bias"));
      Tensor f = linear(gelu(linear(h2, params_.at(p + "ffn.w1"), params_.at(p + "ffn.b1"))), params_.at(p + "ffn.w2"),
                        params_.at(p + "ffn.b2"));
      if (drop_on) f = apply_dropout(f, *opt.rng);
      x = add(x, f);
      if (!all_finite(x.values())) throw TrainingError("non-finite activation in layer " + std::to_string(l));
      if (opt.capture) r.attention.push_back(std::move(att.weights));
    }
    const Tensor cls = layer_norm(slice_rows(x, 0, 1), params_.at("final.ln.gain"), params_.at("final.ln.bias"));
    r.logits = linear(cls, params_.at("head.w"), params_.at("head.b"));
    if (!all_finite(r.logits.values())) throw TrainingError("non-finite logits");
    return r;
  }

  Tensor task_loss(const Tensor& logits, int label) const {
    if (logits.dim() != 2 || logits.cols() != static_cast<std::size_t>(cfg_.labels)) {
      throw ConfigurationError("logits " + shape_str(logits.shape()) + " do not match a " + std::to_string(cfg_.labels) +
                               "-way head");
    }
    if (label < 0 || label >= cfg_.labels) {
      throw ConfigurationError("label " + std::to_string(label) + " outside the " + std::to_string(cfg_.labels) +
                               "-way task head");
    }
    return cross_entropy(logits, {label});
  }

 private:
  static std::string layer_prefix(int l) { return "layer" + std::to_string(l) + "."; }

  Tensor type_row(int type) const { return embedding(params_.at("embed.type"), {type}); }

  AttentionParams attention_params(const std::string& p) const {
    return {params_.at(p + "attn.wq"), params_.at(p + "attn.wk"), params_.at(p + "attn.wv"), params_.at(p + "attn.wo"),
            params_.at(p + "attn.bq"), params_.at(p + "attn.bk"), params_.at(p + "attn.bv"), params_.at(p + "attn.bo")};
  }

  Tensor apply_dropout(const Tensor& x, std::mt19937_64& rng) const {
    std::bernoulli_distribution keep(1.0 - cfg_.dropout);
    std::vector<char> mask(x.size());
    for (auto& m : mask) m = keep(rng);
    return dropout_mask(x, mask, cfg_.dropout);
  }

  ModelConfig cfg_;
  ParameterMap params_;
  std::vector<ProjectionMLP> projections_;
  std::shared_ptr<std::atomic<std::size_t>> truncations_ = std::make_shared<std::atomic<std::size_t>>(0);
};

// ---------------------------------------------------------------------------
// Checkpoints: a flat binary of named parameters plus a JSON manifest beside it.

inline constexpr char kCheckpointMagic[4] = {'V', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t file_fnv1a(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::uint64_t h = 1469598103934665603ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    h = fnv1a(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
    if (!in) break;
  }
  return h;
}

inline void write_parameters(const std::filesystem::path& path, const ParameterMap& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 4);
  detail::put(out, kCheckpointVersion);
  detail::put(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::put(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put(out, static_cast<std::uint32_t>(t.dim()));
    for (std::size_t s : t.shape()) detail::put(out, static_cast<std::uint64_t>(s));
    out.write(reinterpret_cast<const char*>(t.values().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

inline ParameterMap read_parameters(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  const std::string what = "checkpoint " + path.string();
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CompatibilityError(path.string() + ": not a checkpoint");
  if (detail::get<std::uint32_t>(in, what) != kCheckpointVersion)
    throw CompatibilityError(path.string() + ": unsupported checkpoint version");
  const auto n = detail::get<std::uint32_t>(in, what);
  ParameterMap out;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto len = detail::get<std::uint32_t>(in, what);
    if (len > 4096) throw DataError("corrupt " + what);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw DataError("truncated " + what);
    const auto nd = detail::get<std::uint32_t>(in, what);
    if (nd > 8) throw DataError("corrupt " + what);
    Shape shape;
    for (std::uint32_t k = 0; k < nd; ++k) shape.push_back(detail::get<std::uint64_t>(in, what));
    std::vector<double> v(shape_numel(shape));
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double))))
      throw DataError("truncated " + what);
    out[name] = Tensor(std::move(shape), std::move(v), true);
  }
  return out;
}

/// Writes `<dir>/model.bin` and `<dir>/model.json`; `extra` is merged into the manifest.
inline void save_checkpoint(const FusionModel& model, const std::filesystem::path& dir,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  const auto bin = dir / "model.bin";
  write_parameters(bin, model.params());
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, t] : model.params()) names.push_back({{"name", name}, {"shape", t.shape()}});
  nlohmann::json manifest = {{"format", "vefuse-checkpoint"},
                             {"version", kCheckpointVersion},
                             {"model", model_config_json(model.config())},
                             {"parameters", names},
                             {"parameter_count", model.parameter_count()},
                             {"fnv1a64", file_fnv1a(bin)}};
  for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();
  std::ofstream(dir / "model.json") << manifest.dump(2) << '\n';
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw DataError("missing checkpoint manifest " + (dir / "model.json").string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "model.json").string() + ": " + e.what());
  }
}

/// Rebuilds the model described by the manifest and loads its parameters.
inline FusionModel load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = read_checkpoint_manifest(dir);
  if (manifest.value("format", "") != "vefuse-checkpoint") throw CompatibilityError(dir.string() + ": not a checkpoint");
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(manifest.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw CompatibilityError(dir.string() + ": bad model block: " + e.what());
  }
  const auto bin = dir / "model.bin";
  if (manifest.contains("fnv1a64") && manifest["fnv1a64"].get<std::uint64_t>() != file_fnv1a(bin))
    throw DataError(bin.string() + ": checksum mismatch");
  FusionModel model(cfg, 0);
  ParameterMap loaded = read_parameters(bin);
  if (loaded.size() != model.params().size()) throw CompatibilityError(dir.string() + ": parameter set differs from model");
  for (auto& [name, p] : model.params()) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw CompatibilityError(dir.string() + ": missing parameter " + name);
    if (it->second.shape() != p.shape())
      throw CompatibilityError(dir.string() + ": parameter " + name + " has shape " + shape_str(it->second.shape()) +
                               ", model expects " + shape_str(p.shape()));
    std::copy(it->second.values().begin(), it->second.values().end(), p.mutable_values().begin());
  }
  return model;
}

}  // namespace vefuse
