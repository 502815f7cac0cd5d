#pragma once

// Attention metrics over captured records: CLS shares, modality flow, surplus attention on
// overlapping tokens, phrase grounding, and encoder-drop evaluation.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "vefuse/segments.hpp"
#include "vefuse/training.hpp"

namespace vefuse {

// ---------------------------------------------------------------------------
// Per-record metrics on one layer's [heads, L, L] weights

/// shares[h][s] = sum of CLS attention over segment s (segment order, CLS included).
struct ClsShares {
  std::vector<Modality> modalities;
  std::vector<std::vector<double>> per_head;
  std::vector<double> mean;  // over heads
};

inline ClsShares cls_attention(const Tensor& w, const SegmentMap& seg) {
  const std::size_t heads = w.shape()[0], len = seg.length;
  ClsShares out;
  for (const auto& s : seg.segments) out.modalities.push_back(s.modality);
  out.per_head.assign(heads, std::vector<double>(seg.segments.size(), 0.0));
  out.mean.assign(seg.segments.size(), 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const double* row = w.values().data() + h * len * len;  // CLS is query 0
    for (std::size_t s = 0; s < seg.segments.size(); ++s) {
      double acc = 0.0;
      for (std::size_t j = seg.segments[s].begin; j < seg.segments[s].end; ++j) acc += row[j];
      out.per_head[h][s] = acc;
    }
  }
  for (std::size_t s = 0; s < out.mean.size(); ++s) {
    for (std::size_t h = 0; h < heads; ++h) out.mean[s] += out.per_head[h][s];
    out.mean[s] /= static_cast<double>(heads);
  }
  return out;
}

/// flow[h][m][n] over the non-CLS segments; cls_mass[h][m] is the per-source-token mass sent to CLS.
/// An empty source segment leaves its row absent.
struct FlowMatrix {
  std::vector<Modality> modalities;
  std::vector<std::vector<std::vector<std::optional<double>>>> per_head;
  std::vector<std::vector<std::optional<double>>> cls_mass;
  std::vector<std::vector<std::optional<double>>> mean;
  std::vector<std::optional<double>> mean_cls_mass;
};

inline FlowMatrix cross_modal_flow(const Tensor& w, const SegmentMap& seg) {
  const std::size_t heads = w.shape()[0], len = seg.length;
  FlowMatrix f;
  std::vector<const Segment*> segs;
  for (const auto& s : seg.segments)
    if (s.modality != Modality::Cls) {
      segs.push_back(&s);
      f.modalities.push_back(s.modality);
    }
  const Segment* cls = seg.find(Modality::Cls);
  const std::size_t k = segs.size();
  f.per_head.assign(heads, std::vector<std::vector<std::optional<double>>>(k, std::vector<std::optional<double>>(k)));
  f.cls_mass.assign(heads, std::vector<std::optional<double>>(k));
  f.mean.assign(k, std::vector<std::optional<double>>(k));
  f.mean_cls_mass.assign(k, std::nullopt);
  for (std::size_t m = 0; m < k; ++m) {
    const Segment& src = *segs[m];
    if (src.size() == 0) continue;
    // Divide rather than multiply by 1/|M|: keeps uniform rows exact when weights are dyadic.
    const double size = static_cast<double>(src.size());
    double mean_cls = 0.0;
    std::vector<double> mean_row(k, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      const double* base = w.values().data() + h * len * len;
      std::vector<double> acc(k, 0.0);
      double to_cls = 0.0;
      for (std::size_t i = src.begin; i < src.end; ++i) {
        const double* row = base + i * len;
        for (std::size_t n = 0; n < k; ++n)
          for (std::size_t j = segs[n]->begin; j < segs[n]->end; ++j) acc[n] += row[j];
        if (cls) to_cls += row[cls->begin];
      }
      for (std::size_t n = 0; n < k; ++n) {
        f.per_head[h][m][n] = acc[n] / size;
        mean_row[n] += acc[n] / size;
      }
      f.cls_mass[h][m] = to_cls / size;
      mean_cls += to_cls / size;
    }
    for (std::size_t n = 0; n < k; ++n) f.mean[m][n] = mean_row[n] / static_cast<double>(heads);
    f.mean_cls_mass[m] = mean_cls / static_cast<double>(heads);
  }
  return f;
}

/// Token-level surplus sums for one ordered encoder pair; `sum / n` is the reported surplus.
struct SurplusCell {
  VEKind source;
  VEKind target;
  std::vector<double> surplus_sum;  // per head, over evaluable source tokens
  std::vector<double> total_sum;    // per head, attention to the whole target segment, over non-padding sources
  std::size_t n = 0;                // evaluable source tokens (non-empty I_t and I\t)
  std::size_t n_total = 0;          // non-padding source tokens
};

/// One cell per ordered pair of distinct encoders present in the record.
inline std::vector<SurplusCell> surplus_attention(const Tensor& w, const SegmentMap& seg, const OverlapIndex& index,
                                                  const std::vector<std::pair<VEKind, std::vector<TokenFootprint>>>& fps) {
  const std::size_t heads = w.shape()[0], len = seg.length;
  std::vector<SurplusCell> out;
  for (const Modality ma : seg.visual())
    for (const Modality mb : seg.visual()) {
      if (ma == mb) continue;
      const VEKind a = ve_of(ma), b = ve_of(mb);
      const PairOverlap* p = index.find(a, b);
      if (!p) throw ConfigurationError("overlap index lacks pair " + std::string(ve_name(a)) + "->" + std::string(ve_name(b)));
      const Segment& sa = *seg.find(ma);
      const Segment& sb = *seg.find(mb);
      const std::vector<TokenFootprint>* fa = nullptr;
      for (const auto& [k, f] : fps)
        if (k == a) fa = &f;
      SurplusCell cell{a, b, std::vector<double>(heads, 0.0), std::vector<double>(heads, 0.0), 0, 0};
      for (std::size_t t = 0; t < sa.size(); ++t) {
        if (fa && (*fa)[t].padding) continue;
        ++cell.n_total;
        const auto& in = p->overlapping[t];
        const auto& out_set = p->non_overlapping[t];
        const bool evaluable = !in.empty() && !out_set.empty();
        if (evaluable) ++cell.n;
        for (std::size_t h = 0; h < heads; ++h) {
          const double* row = w.values().data() + (h * len + sa.begin + t) * len + sb.begin;
          double tot = 0.0;
          for (std::size_t j = 0; j < sb.size(); ++j) tot += row[j];
          cell.total_sum[h] += tot;
          if (!evaluable) continue;
          double s_in = 0.0, s_out = 0.0;
          for (int j : in) s_in += row[j];
          for (int j : out_set) s_out += row[j];
          cell.surplus_sum[h] += s_in / static_cast<double>(in.size()) - s_out / static_cast<double>(out_set.size());
        }
      }
      out.push_back(std::move(cell));
    }
  return out;
}

/// Builds every ordered-pair overlap entry for the encoders in `fps`.
inline OverlapIndex build_overlap_index(const std::vector<std::pair<VEKind, std::vector<TokenFootprint>>>& fps) {
  OverlapIndex idx;
  for (const auto& [a, fa] : fps)
    for (const auto& [b, fb] : fps)
      if (a != b) idx.pairs.push_back(build_pair_overlap(a, fa, b, fb));
  return idx;
}

/// Counts for one (head, encoder): phrases with a non-empty gold set, and how many hit it.
struct GroundingCell {
  VEKind ve;
  std::vector<std::size_t> correct;  // per head
  std::size_t evaluated = 0;
  std::size_t empty_gold = 0;  // phrases dropped because no token overlaps the gold box
};

/// Lowest index wins ties.
inline std::size_t argmax_first(const double* v, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline std::vector<GroundingCell> grounding_accuracy(const Tensor& w, const AttentionRecord& rec) {
  const std::size_t heads = w.shape()[0], len = rec.length();
  const Segment* text = rec.segments.find(Modality::Text);
  std::vector<GroundingCell> out;
  for (const Modality mv : rec.segments.visual()) {
    const VEKind k = ve_of(mv);
    const Segment& sv = *rec.segments.find(mv);
    const auto* fps = rec.footprints_of(k);
    if (!fps) throw ConfigurationError("record lacks footprints for " + std::string(ve_name(k)));
    GroundingCell cell{k, std::vector<std::size_t>(heads, 0), 0, 0};
    for (const auto& ph : rec.phrases) {
      if (ph.end <= ph.begin || !text || static_cast<std::size_t>(ph.end) > text->size()) continue;
      const auto gold = gold_overlap_set(ph.gold, *fps, k);
      if (gold.empty()) {
        ++cell.empty_gold;
        continue;
      }
      ++cell.evaluated;
      const std::size_t from = text->begin + static_cast<std::size_t>(ph.end - 1);
      for (std::size_t h = 0; h < heads; ++h) {
        const double* row = w.values().data() + (h * len + from) * len + sv.begin;
        const int best = static_cast<int>(argmax_first(row, sv.size()));
        if (std::binary_search(gold.begin(), gold.end(), best)) ++cell.correct[h];
      }
    }
    out.push_back(std::move(cell));
  }
  return out;
}

/// Mean over layers, as one more [heads, L, L] tensor.
inline Tensor layer_average(const std::vector<Tensor>& layers) {
  if (layers.empty()) throw ConfigurationError("record has no attention layers");
  std::vector<double> v(layers[0].size(), 0.0);
  for (const auto& t : layers)
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += t[i];
  for (auto& x : v) x /= static_cast<double>(layers.size());
  return Tensor(layers[0].shape(), std::move(v));
}

// ---------------------------------------------------------------------------
// Aggregation across examples and seeds

struct SeedStats {
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t n = 0;
};

inline SeedStats aggregate(const std::vector<double>& xs) {
  SeedStats s;
  s.n = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(v / static_cast<double>(xs.size()));
  return s;
}

/// One line of a metric CSV. layer is an index, "avg" (mean over layers) ; head is an index
/// or "mean" (over heads).
struct MetricRow {
  std::string layer;
  std::string head;
  std::string source;
  std::string target;
  double value = 0.0;
  std::size_t n = 0;
};

struct MetricTable {
  std::string name;
  std::vector<MetricRow> rows;

  const MetricRow* find(std::string_view layer, std::string_view head, std::string_view source,
                        std::string_view target) const {
    for (const auto& r : rows)
      if (r.layer == layer && r.head == head && r.source == source && r.target == target) return &r;
    return nullptr;
  }
};

inline std::string format_double(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

inline void write_metric_csv(const MetricTable& t, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "layer,head,source,target,value,n\n";
  for (const auto& r : t.rows)
    out << r.layer << ',' << r.head << ',' << r.source << ',' << r.target << ',' << format_double(r.value) << ','
        << r.n << '\n';
}

inline MetricTable read_metric_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  MetricTable t;
  t.name = path.stem().string();
  std::string line;
  if (!std::getline(in, line) || line != "layer,head,source,target,value,n")
    throw DataError(path.string() + ": unexpected header");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
    try {
      t.rows.push_back({f[0], f[1], f[2], f[3], std::stod(f[4]), static_cast<std::size_t>(std::stoull(f[5]))});
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  return t;
}

enum class LayerSelection { Last, All };

inline LayerSelection parse_layer_selection(std::string_view s) {
  if (s == "last") return LayerSelection::Last;
  if (s == "all") return LayerSelection::All;
  throw ConfigurationError("layer selection must be 'last' or 'all', got '" + std::string(s) + "'");
}

/// Streams records in and keeps running sums per (layer, head, source, target).
class AttentionAnalyzer {
 public:
  explicit AttentionAnalyzer(LayerSelection sel = LayerSelection::Last) : sel_(sel) {}

  void add(const AttentionRecord& rec) {
    if (rec.layers.empty()) throw ConfigurationError("record " + std::to_string(rec.example_id) + " has no attention");
    rec.segments.check();
    const std::size_t nl = rec.num_layers();
    if (num_heads_ == 0) num_heads_ = rec.num_heads();
    if (rec.num_heads() != num_heads_) throw ConfigurationError("records disagree on head count");
    const OverlapIndex index = build_overlap_index(rec.footprints);
    if (rec.phrases.empty()) ++skipped_;
    ++records_;

    std::vector<std::pair<std::string, const Tensor*>> views;
    Tensor avg;
    if (sel_ == LayerSelection::Last) {
      views.emplace_back(std::to_string(nl - 1), &rec.layers.back());
    } else {
      for (std::size_t l = 0; l < nl; ++l) views.emplace_back(std::to_string(l), &rec.layers[l]);
      avg = layer_average(rec.layers);
      views.emplace_back("avg", &avg);
    }
    for (const auto& [layer, w] : views) add_view(layer, *w, rec, index);
  }

  std::size_t records() const { return records_; }
  std::size_t skipped() const { return skipped_; }

  MetricTable cls_table() const { return table("cls_attention", cls_); }
  MetricTable flow_table() const { return table("modality_flow", flow_); }
  MetricTable surplus_table() const { return table("surplus_attention", surplus_); }
  MetricTable surplus_total_table() const { return table("surplus_total", total_); }
  MetricTable grounding_table() const { return table("grounding_accuracy", grounding_); }

  /// Phrases skipped for an empty gold set, per encoder.
  const std::map<std::string, std::size_t>& empty_gold() const { return empty_gold_; }

 private:
  using Key = std::tuple<std::string, std::string, std::string, std::string>;
  struct Acc {
    double sum = 0.0;
    std::size_t n = 0;
  };
  using Sums = std::map<Key, Acc>;

  static std::string head_label(std::size_t h) { return std::to_string(h); }

  void add_view(const std::string& layer, const Tensor& w, const AttentionRecord& rec, const OverlapIndex& index) {
    const std::size_t heads = w.shape()[0];
    const auto& seg = rec.segments;

    const ClsShares cs = cls_attention(w, seg);
    for (std::size_t s = 0; s < cs.modalities.size(); ++s) {
      const std::string tgt(modality_name(cs.modalities[s]));
      for (std::size_t h = 0; h < heads; ++h) bump(cls_, {layer, head_label(h), "cls", tgt}, cs.per_head[h][s], 1);
      bump(cls_, {layer, "mean", "cls", tgt}, cs.mean[s], 1);
    }

    const FlowMatrix f = cross_modal_flow(w, seg);
    for (std::size_t m = 0; m < f.modalities.size(); ++m) {
      const std::string src(modality_name(f.modalities[m]));
      if (!f.mean_cls_mass[m]) continue;
      for (std::size_t n = 0; n < f.modalities.size(); ++n) {
        const std::string tgt(modality_name(f.modalities[n]));
        for (std::size_t h = 0; h < heads; ++h) bump(flow_, {layer, head_label(h), src, tgt}, *f.per_head[h][m][n], 1);
        bump(flow_, {layer, "mean", src, tgt}, *f.mean[m][n], 1);
      }
      for (std::size_t h = 0; h < heads; ++h) bump(flow_, {layer, head_label(h), src, "cls"}, *f.cls_mass[h][m], 1);
      bump(flow_, {layer, "mean", src, "cls"}, *f.mean_cls_mass[m], 1);
    }

    for (const auto& c : surplus_attention(w, seg, index, rec.footprints)) {
      const std::string src(ve_name(c.source)), tgt(ve_name(c.target));
      double s_mean = 0.0, t_mean = 0.0;
      for (std::size_t h = 0; h < heads; ++h) {
        bump(surplus_, {layer, head_label(h), src, tgt}, c.surplus_sum[h], c.n);
        bump(total_, {layer, head_label(h), src, tgt}, c.total_sum[h], c.n_total);
        s_mean += c.surplus_sum[h] / static_cast<double>(heads);
        t_mean += c.total_sum[h] / static_cast<double>(heads);
      }
      bump(surplus_, {layer, "mean", src, tgt}, s_mean, c.n);
      bump(total_, {layer, "mean", src, tgt}, t_mean, c.n_total);
    }

    for (const auto& g : grounding_accuracy(w, rec)) {
      const std::string ve(ve_name(g.ve));
      for (std::size_t h = 0; h < heads; ++h)
        bump(grounding_, {layer, head_label(h), "text", ve}, static_cast<double>(g.correct[h]), g.evaluated);
      if (layer == first_layer_label(rec)) empty_gold_[ve] += g.empty_gold;
    }
  }

  std::string first_layer_label(const AttentionRecord& rec) const {
    return sel_ == LayerSelection::Last ? std::to_string(rec.num_layers() - 1) : "0";
  }

  static void bump(Sums& s, const Key& k, double sum, std::size_t n) {
    auto& a = s[k];
    a.sum += sum;
    a.n += n;
  }

  static MetricTable table(std::string name, const Sums& sums) {
    MetricTable t;
    t.name = std::move(name);
    for (const auto& [k, a] : sums) {
      if (a.n == 0) continue;  // absent: nothing evaluable
      t.rows.push_back({std::get<0>(k), std::get<1>(k), std::get<2>(k), std::get<3>(k),
                        a.sum / static_cast<double>(a.n), a.n});
    }
    return t;
  }

  LayerSelection sel_;
  std::size_t num_heads_ = 0;
  std::size_t records_ = 0;
  std::size_t skipped_ = 0;
  Sums cls_, flow_, surplus_, total_, grounding_;
  std::map<std::string, std::size_t> empty_gold_;
};

// ---------------------------------------------------------------------------
// Capturing records from a model

/// Runs the model on up to `sample` examples with attention capture. Phrases are attached only
/// when the image is the scene the text describes, since gold boxes refer to that scene.
inline std::vector<AttentionRecord> capture_records(const FusionModel& model, const PreparedSplit& data,
                                                    std::size_t sample, const std::vector<VEKind>& drop = {}) {
  const auto& ves = model.config().ves;
  const std::size_t n = sample == 0 ? data.corpus.examples.size() : std::min(sample, data.corpus.examples.size());
  std::vector<AttentionRecord> out;
  out.reserve(n);
  ForwardOptions fo;
  fo.capture = true;
  fo.drop = drop;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = data.corpus.examples[i];
    const auto inputs = data.inputs(e, ves);
    auto r = model.forward(e.tokens, inputs, fo);
    AttentionRecord rec;
    rec.example_id = e.example_id;
    rec.segments = std::move(r.segments);
    rec.layers = std::move(r.attention);
    for (std::size_t v = 0; v < ves.size(); ++v)
      if (std::find(drop.begin(), drop.end(), ves[v]) == drop.end()) rec.footprints.emplace_back(ves[v], inputs[v]->footprints);
    if (e.image_matches_text()) rec.phrases = e.phrases;
    out.push_back(std::move(rec));
  }
  return out;
}

/// Uniform attention over the record's own layout; used for calibration and as the
/// grounding baseline's scaffold.
inline AttentionRecord uniform_like(const AttentionRecord& r) {
  AttentionRecord u = r;
  const double v = 1.0 / static_cast<double>(r.length());
  for (auto& t : u.layers) t = Tensor(t.shape(), v);
  return u;
}

/// Attention rows drawn from a flat Dirichlet, i.e. normalized exponentials.
inline AttentionRecord random_like(const AttentionRecord& r, std::mt19937_64& rng) {
  AttentionRecord u = r;
  std::exponential_distribution<double> e(1.0);
  const std::size_t len = r.length();
  for (auto& t : u.layers) {
    std::vector<double> v(t.size());
    for (std::size_t row = 0; row < v.size() / len; ++row) {
      double s = 0.0;
      for (std::size_t j = 0; j < len; ++j) s += (v[row * len + j] = e(rng));
      for (std::size_t j = 0; j < len; ++j) v[row * len + j] /= s;
    }
    t = Tensor(t.shape(), std::move(v));
  }
  return u;
}

// ---------------------------------------------------------------------------
// Encoder drop at test time

struct DropEval {
  VEKind dropped;
  EvalMetrics full;
  EvalMetrics without;
  std::optional<double> accuracy_decrease;
  std::optional<double> r1_decrease;
};

/// (full - dropped) / full, absent when full is 0.
inline std::optional<double> relative_decrease(double full, double dropped) {
  if (full == 0.0) return std::nullopt;
  return (full - dropped) / full;
}

inline DropEval drop_ve_eval(const FusionModel& model, const PreparedSplit& data, VEKind ve, std::size_t sample,
                             std::size_t pool_size, std::size_t pools, const EvalMetrics* full = nullptr) {
  if (model.config().ves.size() < 2) throw ConfigurationError("dropping an encoder needs a model with >= 2 encoders");
  if (!model.config().has(ve)) throw ConfigurationError("model has no " + std::string(ve_name(ve)) + " encoder");
  DropEval d{ve, full ? *full : evaluate(model, data, sample, {}, pool_size, pools),
             evaluate(model, data, sample, {ve}, pool_size, pools), std::nullopt, std::nullopt};
  d.accuracy_decrease = relative_decrease(d.full.accuracy, d.without.accuracy);
  if (d.full.recall_at_1 && d.without.recall_at_1) d.r1_decrease = relative_decrease(*d.full.recall_at_1, *d.without.recall_at_1);
  return d;
}

inline MetricTable drop_table(const std::vector<DropEval>& evals) {
  MetricTable t;
  t.name = "drop_ve";
  for (const auto& d : evals) {
    const std::string ve(ve_name(d.dropped));
    if (d.accuracy_decrease) t.rows.push_back({"-", "-", ve, "accuracy", *d.accuracy_decrease, d.full.n});
    if (d.r1_decrease) t.rows.push_back({"-", "-", ve, "r1", *d.r1_decrease, d.full.n});
  }
  return t;
}

inline nlohmann::json drop_json(const DropEval& d) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"dropped", ve_name(d.dropped)},
          {"full", metrics_json(d.full)},
          {"without", metrics_json(d.without)},
          {"accuracy_decrease", opt(d.accuracy_decrease)},
          {"r1_decrease", opt(d.r1_decrease)}};
}

// ---------------------------------------------------------------------------
// Summary helpers over metric tables

/// Head-mean value of `source -> target` at `layer`, if present.
inline std::optional<double> table_value(const MetricTable& t, std::string_view layer, std::string_view head,
                                         std::string_view source, std::string_view target) {
  const auto* r = t.find(layer, head, source, target);
  if (!r) return std::nullopt;
  return r->value;
}

/// Best per-head grounding accuracy for one encoder at one layer (or over all layers with layer "").
inline std::optional<double> best_head_grounding(const MetricTable& g, std::string_view ve, std::string_view layer = "") {
  std::optional<double> best;
  for (const auto& r : g.rows) {
    if (r.target != ve || r.head == "mean" || r.layer == "avg") continue;
    if (!layer.empty() && r.layer != layer) continue;
    if (!best || r.value > *best) best = r.value;
  }
  return best;
}

}  // namespace vefuse
