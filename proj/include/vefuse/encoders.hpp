#pragma once

// Frozen synthetic vision encoders (region / grid / patch) and the trainable projection MLPs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include "vefuse/geometry.hpp"
#include "vefuse/optim.hpp"
#include "vefuse/scene.hpp"
#include "vefuse/tensor.hpp"

namespace vefuse {

struct VisualTokenSet {
  VEKind kind = VEKind::Region;
  Tensor features;  // [count, dim], never requires grad
  std::vector<TokenFootprint> footprints;

  std::size_t count() const { return footprints.size(); }
  std::size_t dim() const { return features.cols(); }
};

struct VEConfig {
  std::array<int, 3> counts = {36, 36, 49};
  std::array<int, 3> dims = {48, 64, 24};
  std::uint64_t frozen_seed = 0x7e5eedULL;
  double region_jitter = 0.02;

  int count(VEKind k) const { return counts[static_cast<std::size_t>(k)]; }
  int dim(VEKind k) const { return dims[static_cast<std::size_t>(k)]; }
};

inline int exact_sqrt(int n) {
  const int s = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  return s * s == n ? s : -1;
}

inline void validate(const VEConfig& c) {
  for (VEKind k : kAllVEKinds) {
    if (c.count(k) < 1) throw ConfigurationError(std::string(ve_name(k)) + " token count must be >= 1");
    if (c.dim(k) < 1) throw ConfigurationError(std::string(ve_name(k)) + " feature dim must be >= 1");
  }
  if (c.dim(VEKind::Region) < 7) throw ConfigurationError("region feature dim must exceed the 6 salience/geometry fields");
  if (exact_sqrt(c.count(VEKind::Grid)) < 0) throw ConfigurationError("grid token count must be a perfect square");
  if (exact_sqrt(c.count(VEKind::Patch)) < 0) throw ConfigurationError("patch token count must be a perfect square");
  if (c.region_jitter < 0) throw ConfigurationError("region jitter must be non-negative");
}

namespace detail {

inline Tensor frozen_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double gain = 1.0) {
  std::normal_distribution<double> n(0.0, gain / std::sqrt(static_cast<double>(rows)));
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = n(rng);
  return Tensor(Shape{rows, cols}, std::move(v));
}

inline Tensor frozen_vector(std::size_t n, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> d(0.0, stddev);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return Tensor(Shape{n}, std::move(v));
}

// Sinusoidal code of an integer position, transformer style.
inline void sinusoid(std::size_t pos, double* out, std::size_t dim) {
  for (std::size_t i = 0; i < dim; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
    out[i] = (i % 2 == 0) ? std::sin(static_cast<double>(pos) * freq) : std::cos(static_cast<double>(pos) * freq);
  }
}

// Area-weighted mean of raster channels over a normalized box.
inline std::vector<double> pool_box(const Raster& r, const Box& b) {
  std::vector<double> acc(r.channels, 0.0);
  double total = 0.0;
  const double cw = 1.0 / r.width, ch = 1.0 / r.height;
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x / cw)));
  const int x1 = std::min(r.width, static_cast<int>(std::ceil(b.right() / cw)));
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y / ch)));
  const int y1 = std::min(r.height, static_cast<int>(std::ceil(b.bottom() / ch)));
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const double a = intersection_area(b, {x * cw, y * ch, cw, ch});
      if (a <= 0) continue;
      total += a;
      const double* c = r.cell(x, y);
      for (std::size_t k = 0; k < r.channels; ++k) acc[k] += a * c[k];
    }
  if (total > 0)
    for (auto& v : acc) v /= total;
  return acc;
}

}  // namespace detail

/// The three frozen encoders. Weights are drawn once from the frozen seed, per encoder kind.
class VisionEncoders {
 public:
  VisionEncoders(VEConfig cfg, std::size_t channels) : cfg_(cfg), channels_(channels) {
    validate(cfg_);
    {
      std::mt19937_64 rng(mix_seed(cfg_.frozen_seed, 0xA));
      const auto out = static_cast<std::size_t>(cfg_.dim(VEKind::Region) - 6);
      region_w_ = detail::frozen_matrix(channels_, out, rng, 2.0);
      region_b_ = detail::frozen_vector(out, rng, 0.1);
    }
    {
      std::mt19937_64 rng(mix_seed(cfg_.frozen_seed, 0xB));
      const auto out = static_cast<std::size_t>(cfg_.dim(VEKind::Grid));
      grid_cell_w_ = detail::frozen_matrix(channels_, kGridHidden, rng, 2.0);
      grid_cell_b_ = detail::frozen_vector(kGridHidden, rng, 0.1);
      grid_mix_w_ = detail::frozen_matrix(9 * kGridHidden, out, rng, 1.5);
      grid_mix_b_ = detail::frozen_vector(out, rng, 0.1);
    }
    {
      std::mt19937_64 rng(mix_seed(cfg_.frozen_seed, 0xC));
      const auto d = static_cast<std::size_t>(cfg_.dim(VEKind::Patch));
      patch_rng_seed_ = mix_seed(cfg_.frozen_seed, 0xC0);
      mix_.wq = detail::frozen_matrix(d, d, rng);
      mix_.wk = detail::frozen_matrix(d, d, rng);
      mix_.wv = detail::frozen_matrix(d, d, rng);
      mix_.wo = detail::frozen_matrix(d, d, rng, 0.5);
      mix_.bq = Tensor(Shape{d}, 0.0);
      mix_.bk = Tensor(Shape{d}, 0.0);
      mix_.bv = Tensor(Shape{d}, 0.0);
      mix_.bo = Tensor(Shape{d}, 0.0);
    }
  }

  const VEConfig& config() const { return cfg_; }
  std::size_t channels() const { return channels_; }
  int grid_side() const { return exact_sqrt(cfg_.count(VEKind::Grid)); }
  int patch_side() const { return exact_sqrt(cfg_.count(VEKind::Patch)); }

  /// Every frozen tensor, for gradient-accumulator inspection.
  std::vector<Tensor> frozen_parameters() const {
    std::vector<Tensor> out = {region_w_, region_b_, grid_cell_w_, grid_cell_b_, grid_mix_w_, grid_mix_b_,
                               mix_.wq,   mix_.wk,   mix_.wv,      mix_.wo,      mix_.bq,     mix_.bk,
                               mix_.bv,   mix_.bo};
    std::lock_guard<std::mutex> lock(patch_mutex_);
    for (const auto& [k, w] : patch_w_cache_) out.push_back(w);
    return out;
  }

  VisualTokenSet encode(VEKind kind, const Scene& scene, const Raster& raster) const {
    switch (kind) {
      case VEKind::Region: return region_encode(scene, raster);
      case VEKind::Grid: return grid_encode(raster);
      case VEKind::Patch: return patch_encode(raster);
    }
    throw ConfigurationError("unknown encoder kind");
  }

  /// Object proposals (jittered boxes) first, then full-canvas padding with zero salience.
  VisualTokenSet region_encode(const Scene& scene, const Raster& raster) const {
    check_raster(raster);
    const auto k = static_cast<std::size_t>(cfg_.count(VEKind::Region));
    const auto dim = static_cast<std::size_t>(cfg_.dim(VEKind::Region));
    std::mt19937_64 rng(mix_seed(cfg_.frozen_seed, mix_seed(scene.seed, scene.scene_id)));
    std::normal_distribution<double> jitter(0.0, cfg_.region_jitter);

    std::vector<TokenFootprint> fps;
    for (const auto& o : scene.objects) {
      if (fps.size() == k) break;
      double x0 = o.box.x + jitter(rng), y0 = o.box.y + jitter(rng);
      double x1 = o.box.right() + jitter(rng), y1 = o.box.bottom() + jitter(rng);
      x0 = std::clamp(x0, 0.0, 1.0), x1 = std::clamp(x1, 0.0, 1.0);
      y0 = std::clamp(y0, 0.0, 1.0), y1 = std::clamp(y1, 0.0, 1.0);
      if (x1 < x0) std::swap(x0, x1);
      if (y1 < y0) std::swap(y0, y1);
      fps.push_back({{x0, y0, x1 - x0, y1 - y0}, false});
    }
    while (fps.size() < k) fps.push_back({{0.0, 0.0, 1.0, 1.0}, true});

    const std::size_t out = dim - 6;
    std::vector<double> pooled(k * channels_);
    for (std::size_t t = 0; t < k; ++t) {
      const auto p = detail::pool_box(raster, fps[t].box);
      std::copy(p.begin(), p.end(), pooled.begin() + static_cast<std::ptrdiff_t>(t * channels_));
    }
    const Tensor h = tanh(linear(Tensor(Shape{k, channels_}, std::move(pooled)), region_w_, region_b_));
    std::vector<double> feat(k * dim);
    for (std::size_t t = 0; t < k; ++t) {
      double* row = feat.data() + t * dim;
      for (std::size_t j = 0; j < out; ++j) row[j] = h.at(t, j);
      const Box& b = fps[t].box;
      row[out] = fps[t].padding ? 0.0 : 1.0;
      row[out + 1] = b.x;
      row[out + 2] = b.y;
      row[out + 3] = b.w;
      row[out + 4] = b.h;
      row[out + 5] = b.w * b.h;
    }
    return {VEKind::Region, Tensor(Shape{k, dim}, std::move(feat)), std::move(fps)};
  }

  /// Per-cell map, one 3x3 mixing pass (replicate padding), then adaptive max pooling.
  VisualTokenSet grid_encode(const Raster& raster) const {
    check_raster(raster);
    const int s = grid_side();
    if (raster.width < s || raster.height < s) {
      throw ConfigurationError("raster " + std::to_string(raster.width) + "x" + std::to_string(raster.height) +
                               " smaller than the " + std::to_string(s) + "x" + std::to_string(s) + " pooled grid");
    }
    const int w = raster.width, hgt = raster.height;
    const auto cells = static_cast<std::size_t>(w * hgt);
    const auto dim = static_cast<std::size_t>(cfg_.dim(VEKind::Grid));
    const Tensor h1 = tanh(linear(Tensor(Shape{cells, channels_}, raster.data), grid_cell_w_, grid_cell_b_));

    std::vector<double> nb(cells * 9 * kGridHidden);
    for (int y = 0; y < hgt; ++y)
      for (int x = 0; x < w; ++x) {
        double* dst = nb.data() + static_cast<std::size_t>(y * w + x) * 9 * kGridHidden;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int sx = std::clamp(x + dx, 0, w - 1), sy = std::clamp(y + dy, 0, hgt - 1);
            const double* src = h1.values().data() + static_cast<std::size_t>(sy * w + sx) * kGridHidden;
            std::copy(src, src + kGridHidden, dst);
            dst += kGridHidden;
          }
      }
    const Tensor h2 = tanh(linear(Tensor(Shape{cells, 9 * kGridHidden}, std::move(nb)), grid_mix_w_, grid_mix_b_));

    const auto k = static_cast<std::size_t>(s * s);
    std::vector<double> feat(k * dim, -std::numeric_limits<double>::infinity());
    std::vector<TokenFootprint> fps;
    for (int i = 0; i < s; ++i) {
      const int ya = i * hgt / s, yb = (i + 1) * hgt / s;
      for (int j = 0; j < s; ++j) {
        const int xa = j * w / s, xb = (j + 1) * w / s;
        double* row = feat.data() + static_cast<std::size_t>(i * s + j) * dim;
        for (int y = ya; y < yb; ++y)
          for (int x = xa; x < xb; ++x) {
            const double* src = h2.values().data() + static_cast<std::size_t>(y * w + x) * dim;
            for (std::size_t c = 0; c < dim; ++c) row[c] = std::max(row[c], src[c]);
          }
        fps.push_back({edge_box(xa, xb, w, ya, yb, hgt), false});
      }
    }
    return {VEKind::Grid, Tensor(Shape{k, dim}, std::move(feat)), std::move(fps)};
  }

  /// Nearest-neighbour resize to a multiple of the patch side, linear patch embedding plus a
  /// sinusoidal index code, then one single-head self-attention pass with a residual.
  VisualTokenSet patch_encode(const Raster& raster) const {
    check_raster(raster);
    const int p = patch_side();
    const int cps = (std::max(raster.width, raster.height) + p - 1) / p;  // cells per patch side
    const int side = p * cps;
    const auto dim = static_cast<std::size_t>(cfg_.dim(VEKind::Patch));
    const auto in = static_cast<std::size_t>(cps * cps) * channels_;
    const Tensor& w = patch_weight(in);

    const auto k = static_cast<std::size_t>(p * p);
    std::vector<double> flat(k * in);
    for (int pi = 0; pi < p; ++pi)
      for (int pj = 0; pj < p; ++pj) {
        double* dst = flat.data() + static_cast<std::size_t>(pi * p + pj) * in;
        for (int y = 0; y < cps; ++y)
          for (int x = 0; x < cps; ++x) {
            const int sy = (pi * cps + y) * raster.height / side, sx = (pj * cps + x) * raster.width / side;
            const double* src = raster.cell(sx, sy);
            std::copy(src, src + channels_, dst);
            dst += channels_;
          }
      }
    Tensor e = linear(Tensor(Shape{k, in}, std::move(flat)), w, Tensor(Shape{dim}, 0.0));
    std::vector<double> code(k * dim);
    for (std::size_t t = 0; t < k; ++t) detail::sinusoid(t, code.data() + t * dim, dim);
    e = add(e, Tensor(Shape{k, dim}, std::move(code)));
    const Tensor mixed = add(e, multi_head_attention(e, 1, mix_).output);

    std::vector<TokenFootprint> fps;
    for (int pi = 0; pi < p; ++pi)
      for (int pj = 0; pj < p; ++pj)
        fps.push_back({edge_box(pj, pj + 1, p, pi, pi + 1, p), false});
    return {VEKind::Patch, mixed.clone(), std::move(fps)};
  }

 private:
  static constexpr std::size_t kGridHidden = 32;

  // Widths taken as edge differences so neighbouring tiles share exactly the same boundary.
  static Box edge_box(int x0, int x1, int nx, int y0, int y1, int ny) {
    const double a = static_cast<double>(x0) / nx, b = static_cast<double>(x1) / nx;
    const double c = static_cast<double>(y0) / ny, d = static_cast<double>(y1) / ny;
    return {a, c, b - a, d - c};
  }

  void check_raster(const Raster& r) const {
    if (r.channels != channels_) {
      throw ConfigurationError("raster has " + std::to_string(r.channels) + " channels, encoders expect " +
                               std::to_string(channels_));
    }
  }

  // The patch embedding's input width depends on the raster size; one frozen matrix per width.
  const Tensor& patch_weight(std::size_t in) const {
    std::lock_guard<std::mutex> lock(patch_mutex_);
    for (const auto& [n, w] : patch_w_cache_)
      if (n == in) return w;
    // Mostly tied across the cells of a patch (a mean-pooled cell code), plus a weaker untied
    // part that keeps the layout inside the patch.
    std::mt19937_64 rng(mix_seed(patch_rng_seed_, in));
    const auto dim = static_cast<std::size_t>(cfg_.dim(VEKind::Patch));
    const std::size_t cells = in / channels_;
    const Tensor tied = detail::frozen_matrix(channels_, dim, rng, 2.0);
    Tensor w = detail::frozen_matrix(in, dim, rng, 0.5);
    auto wv = w.mutable_values();
    for (std::size_t r = 0; r < in; ++r)
      for (std::size_t j = 0; j < dim; ++j) wv[r * dim + j] += tied.at(r % channels_, j) / static_cast<double>(cells);
    patch_w_cache_.emplace_back(in, std::move(w));
    return patch_w_cache_.back().second;
  }

  VEConfig cfg_;
  std::size_t channels_;
  Tensor region_w_, region_b_;
  Tensor grid_cell_w_, grid_cell_b_, grid_mix_w_, grid_mix_b_;
  std::uint64_t patch_rng_seed_ = 0;
  AttentionParams mix_;
  mutable std::mutex patch_mutex_;
  mutable std::deque<std::pair<std::size_t, Tensor>> patch_w_cache_;
};

// ---------------------------------------------------------------------------
// Projection into the model dimension

/// Two-layer MLP (in -> d -> d, GELU between) whose parameters live in a shared ParameterMap.
struct ProjectionMLP {
  std::string prefix;  // e.g. "proj.region"
  std::size_t in_dim = 0;
  std::size_t model_dim = 0;

  static ProjectionMLP create(VEKind kind, std::size_t in_dim, std::size_t model_dim, ParameterMap& params,
                              std::mt19937_64& rng) {
    ProjectionMLP m{"proj." + std::string(ve_name(kind)), in_dim, model_dim};
    params[m.prefix + ".w1"] = xavier_uniform(in_dim, model_dim, rng);
    params[m.prefix + ".b1"] = Tensor(Shape{model_dim}, 0.0, true);
    params[m.prefix + ".w2"] = xavier_uniform(model_dim, model_dim, rng);
    params[m.prefix + ".b2"] = Tensor(Shape{model_dim}, 0.0, true);
    return m;
  }

  Tensor operator()(const Tensor& tokens, const ParameterMap& params) const {
    if (tokens.dim() != 2 || tokens.cols() != in_dim) {
      throw ConfigurationError(prefix + ": expects token dim " + std::to_string(in_dim) + ", got " +
                               shape_str(tokens.shape()));
    }
    const Tensor h = gelu(linear(tokens, params.at(prefix + ".w1"), params.at(prefix + ".b1")));
    return linear(h, params.at(prefix + ".w2"), params.at(prefix + ".b2"));
  }
};

// ---------------------------------------------------------------------------
// Token cache: one file per encoder kind holding the token sets of many scenes.

inline constexpr char kTokenCacheMagic[4] = {'V', 'F', 'T', 'C'};
inline constexpr std::uint32_t kTokenCacheVersion = 1;

namespace detail {
template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError("truncated " + what);
  return v;
}
}  // namespace detail

inline void write_token_cache(const std::filesystem::path& path, VEKind kind, const std::vector<VisualTokenSet>& sets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write token cache " + path.string());
  const std::uint32_t count = sets.empty() ? 0 : static_cast<std::uint32_t>(sets[0].count());
  const std::uint32_t dim = sets.empty() ? 0 : static_cast<std::uint32_t>(sets[0].dim());
  out.write(kTokenCacheMagic, 4);
  detail::put(out, kTokenCacheVersion);
  detail::put(out, static_cast<std::uint32_t>(kind));
  detail::put(out, count);
  detail::put(out, dim);
  detail::put(out, static_cast<std::uint64_t>(sets.size()));
  for (const auto& s : sets) {
    if (s.kind != kind || s.count() != count || s.dim() != dim) throw DataError("token cache: inconsistent token sets");
    out.write(reinterpret_cast<const char*>(s.features.values().data()),
              static_cast<std::streamsize>(s.features.size() * sizeof(double)));
    for (const auto& f : s.footprints) {
      for (double v : {f.box.x, f.box.y, f.box.w, f.box.h}) detail::put(out, v);
      detail::put(out, static_cast<std::uint8_t>(f.padding));
    }
  }
  if (!out) throw DataError("failed writing token cache " + path.string());
}

inline std::vector<VisualTokenSet> read_token_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read token cache " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kTokenCacheMagic, 4) != 0)
    throw DataError(path.string() + ": not a token cache");
  const std::string what = "token cache " + path.string();
  if (detail::get<std::uint32_t>(in, what) != kTokenCacheVersion) throw DataError(path.string() + ": unsupported version");
  const auto kind_raw = detail::get<std::uint32_t>(in, what);
  if (kind_raw > 2) throw DataError(path.string() + ": bad encoder kind");
  const auto count = detail::get<std::uint32_t>(in, what);
  const auto dim = detail::get<std::uint32_t>(in, what);
  const auto n = detail::get<std::uint64_t>(in, what);
  std::vector<VisualTokenSet> sets;
  sets.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::vector<double> feat(static_cast<std::size_t>(count) * dim);
    if (!in.read(reinterpret_cast<char*>(feat.data()), static_cast<std::streamsize>(feat.size() * sizeof(double))))
      throw DataError("truncated " + what);
    VisualTokenSet s{static_cast<VEKind>(kind_raw), Tensor(Shape{count, dim}, std::move(feat)), {}};
    for (std::uint32_t t = 0; t < count; ++t) {
      TokenFootprint f;
      f.box.x = detail::get<double>(in, what);
      f.box.y = detail::get<double>(in, what);
      f.box.w = detail::get<double>(in, what);
      f.box.h = detail::get<double>(in, what);
      f.padding = detail::get<std::uint8_t>(in, what) != 0;
      s.footprints.push_back(f);
    }
    sets.push_back(std::move(s));
  }
  return sets;
}

}  // namespace vefuse
