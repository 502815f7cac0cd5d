#include <gtest/gtest.h>

#include <filesystem>

#include "testing/gradcheck.hpp"
#include "vefuse/corpus.hpp"
#include "vefuse/encoders.hpp"

using namespace vefuse;

namespace {

const SceneConfig kScene;

const VisionEncoders& encoders() {
  static const VisionEncoders e(VEConfig{}, kScene.channels());
  return e;
}

Scene scene_for(std::uint64_t seed) { return generate_scene(seed, kScene, seed); }

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

// Logistic regression by full-batch gradient descent on standardized features.
double probe_accuracy(const std::vector<std::vector<double>>& xtr, const std::vector<int>& ytr,
                      const std::vector<std::vector<double>>& xte, const std::vector<int>& yte) {
  const std::size_t d = xtr[0].size();
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (const auto& x : xtr)
    for (std::size_t j = 0; j < d; ++j) mu[j] += x[j] / xtr.size();
  for (const auto& x : xtr)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (x[j] - mu[j]) * (x[j] - mu[j]) / xtr.size();
  for (auto& s : sd) s = std::sqrt(s) + 1e-9;
  auto z = [&](const std::vector<double>& x) {
    std::vector<double> o(d);
    for (std::size_t j = 0; j < d; ++j) o[j] = (x[j] - mu[j]) / sd[j];
    return o;
  };
  std::vector<std::vector<double>> ztr, zte;
  for (const auto& x : xtr) ztr.push_back(z(x));
  for (const auto& x : xte) zte.push_back(z(x));
  std::vector<double> w(d, 0.0);
  double b = 0.0;
  for (int it = 0; it < 1500; ++it) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < ztr.size(); ++i) {
      double s = b;
      for (std::size_t j = 0; j < d; ++j) s += w[j] * ztr[i][j];
      const double err = 1.0 / (1.0 + std::exp(-s)) - ytr[i];
      for (std::size_t j = 0; j < d; ++j) gw[j] += err * ztr[i][j];
      gb += err;
    }
    for (std::size_t j = 0; j < d; ++j) w[j] -= 0.5 * gw[j] / ztr.size();
    b -= 0.5 * gb / ztr.size();
  }
  int correct = 0;
  for (std::size_t i = 0; i < zte.size(); ++i) {
    double s = b;
    for (std::size_t j = 0; j < d; ++j) s += w[j] * zte[i][j];
    correct += (s > 0) == (yte[i] == 1);
  }
  return static_cast<double>(correct) / zte.size();
}

}  // namespace

TEST(Encoders, TokenCountsAndDims) {
  const Scene s = scene_for(1);
  const Raster r = render(s, kScene);
  const VEConfig cfg;
  for (VEKind k : kAllVEKinds) {
    const auto t = encoders().encode(k, s, r);
    EXPECT_EQ(t.kind, k);
    EXPECT_EQ(t.count(), static_cast<std::size_t>(cfg.count(k)));
    EXPECT_EQ(t.features.rows(), t.count());
    EXPECT_EQ(t.dim(), static_cast<std::size_t>(cfg.dim(k)));
    EXPECT_FALSE(t.features.requires_grad());
  }
  EXPECT_EQ(encoders().patch_encode(r).count(), 49u);
}

TEST(Encoders, GridAndPatchFootprintsTileTheCanvas) {
  const Scene s = scene_for(2);
  const Raster r = render(s, kScene);
  for (VEKind k : {VEKind::Grid, VEKind::Patch}) {
    const auto t = encoders().encode(k, s, r);
    double area = 0.0;
    for (std::size_t i = 0; i < t.count(); ++i) {
      EXPECT_TRUE(t.footprints[i].box.valid());
      EXPECT_FALSE(t.footprints[i].padding);
      area += t.footprints[i].box.area();
      for (std::size_t j = i + 1; j < t.count(); ++j)
        EXPECT_EQ(intersection_area(t.footprints[i].box, t.footprints[j].box), 0.0) << ve_name(k) << i << "," << j;
    }
    EXPECT_NEAR(area, 1.0, 1e-9) << ve_name(k);
  }
}

TEST(Encoders, RegionFootprintsInsideCanvasAndGeometryTail) {
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    const Scene s = scene_for(seed);
    const auto t = encoders().region_encode(s, render(s, kScene));
    const std::size_t dim = t.dim();
    for (std::size_t i = 0; i < t.count(); ++i) {
      const Box& b = t.footprints[i].box;
      ASSERT_TRUE(b.valid());
      EXPECT_EQ(t.footprints[i].padding, i >= s.objects.size());
      EXPECT_EQ(t.features.at(i, dim - 6), i < s.objects.size() ? 1.0 : 0.0);
      EXPECT_EQ(t.features.at(i, dim - 5), b.x);
      EXPECT_EQ(t.features.at(i, dim - 4), b.y);
      EXPECT_EQ(t.features.at(i, dim - 3), b.w);
      EXPECT_EQ(t.features.at(i, dim - 2), b.h);
      EXPECT_EQ(t.features.at(i, dim - 1), b.w * b.h);
    }
  }
}

TEST(Encoders, SingleObjectProposalCoversObject) {
  SceneConfig one = kScene;
  one.min_objects = one.max_objects = 1;
  int high = 0, above_region = 0;
  double worst = 1.0;
  const int n = 1000;
  for (int seed = 0; seed < n; ++seed) {
    const Scene s = generate_scene(static_cast<std::uint64_t>(seed), one, static_cast<std::uint64_t>(seed));
    const auto t = encoders().region_encode(s, render(s, one));
    int salient = 0;
    for (const auto& f : t.footprints) salient += !f.padding;
    ASSERT_EQ(salient, 1);
    const double v = iou(t.footprints[0].box, s.objects[0].box);
    high += v >= 0.7;
    above_region += v > overlap_threshold(VEKind::Region);
    worst = std::min(worst, v);
  }
  // Frozen from an IoU oracle run over this corpus. Corner noise of 0.02 on 3-cell boxes keeps
  // 84% of proposals at IoU >= 0.7 and 99.5% above the region overlap threshold.
  EXPECT_EQ(high, 840);
  EXPECT_EQ(above_region, 995);
  EXPECT_NEAR(worst, 0.416633, 1e-6);
}

TEST(Encoders, BackgroundRasterGivesIdenticalGridTokens) {
  const Raster r{16, 16, kScene.channels(), std::vector<double>(16 * 16 * kScene.channels(), 0.0)};
  const auto t = encoders().grid_encode(r);
  for (std::size_t i = 1; i < t.count(); ++i)
    for (std::size_t c = 0; c < t.dim(); ++c) ASSERT_EQ(t.features.at(i, c), t.features.at(0, c));
}

TEST(Encoders, GridRejectsRasterSmallerThanPool) {
  const Raster r{4, 4, kScene.channels(), std::vector<double>(4 * 4 * kScene.channels(), 0.0)};
  EXPECT_THROW(encoders().grid_encode(r), ConfigurationError);
}

TEST(Encoders, ChannelMismatchIsConfigurationError) {
  const Raster r{16, 16, 3, std::vector<double>(16 * 16 * 3, 0.0)};
  EXPECT_THROW(encoders().patch_encode(r), ConfigurationError);
}

TEST(Encoders, ConfigValidation) {
  VEConfig c;
  c.counts[1] = 35;
  EXPECT_THROW(VisionEncoders(c, 13), ConfigurationError);
  c = VEConfig{};
  c.counts[2] = 50;
  EXPECT_THROW(VisionEncoders(c, 13), ConfigurationError);
  c = VEConfig{};
  c.counts[0] = 0;
  EXPECT_THROW(VisionEncoders(c, 13), ConfigurationError);
}

TEST(Encoders, PatchMixingIsGlobal) {
  // Flipping any single cell changes every patch token.
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Scene s = scene_for(seed);
    const Raster r = render(s, kScene);
    const auto base = encoders().patch_encode(r);
    for (int y = 0; y < 16; y += 5)
      for (int x = 0; x < 16; x += 3) {
        Raster p = r;
        double* c = p.cell(x, y);
        c[0] = 1.0 - c[0];
        const auto t = encoders().patch_encode(p);
        for (std::size_t i = 0; i < 49; ++i) {
          bool differs = false;
          for (std::size_t j = 0; j < t.dim(); ++j) differs |= t.features.at(i, j) != base.features.at(i, j);
          ASSERT_TRUE(differs) << "seed " << seed << " cell " << x << "," << y << " token " << i;
        }
      }
  }
}

TEST(Encoders, Deterministic) {
  const Scene s = scene_for(9);
  const Raster r = render(s, kScene);
  const VisionEncoders fresh(VEConfig{}, kScene.channels());
  for (VEKind k : kAllVEKinds) {
    EXPECT_TRUE(bit_equal(encoders().encode(k, s, r).features, encoders().encode(k, s, r).features));
    EXPECT_TRUE(bit_equal(encoders().encode(k, s, r).features, fresh.encode(k, s, r).features));
  }
  VEConfig other;
  other.frozen_seed = 1;
  const VisionEncoders diff(other, kScene.channels());
  EXPECT_FALSE(bit_equal(encoders().encode(VEKind::Grid, s, r).features, diff.encode(VEKind::Grid, s, r).features));
}

TEST(Encoders, LinearProbeDetectsRed) {
  std::vector<std::vector<double>> x[3], xt[3];
  std::vector<int> y, yt;
  auto has_red = [](const Scene& s) {
    for (const auto& o : s.objects)
      if (o.color == 0) return 1;
    return 0;
  };
  for (int i = 0; i < 1500; ++i) {
    const Scene s = scene_for(mix_seed(77, static_cast<std::uint64_t>(i)));
    const Raster r = render(s, kScene);
    const bool test = i >= 1000;
    (test ? yt : y).push_back(has_red(s));
    for (VEKind k : kAllVEKinds) {
      const auto t = encoders().encode(k, s, r);
      std::vector<double> mean(t.dim(), 0.0);
      for (std::size_t a = 0; a < t.count(); ++a)
        for (std::size_t c = 0; c < t.dim(); ++c) mean[c] += t.features.at(a, c) / t.count();
      (test ? xt : x)[static_cast<int>(k)].push_back(mean);
    }
  }
  for (VEKind k : kAllVEKinds) {
    const double acc = probe_accuracy(x[static_cast<int>(k)], y, xt[static_cast<int>(k)], yt);
    EXPECT_GT(acc, 0.9) << ve_name(k);
    RecordProperty(std::string("probe_") + std::string(ve_name(k)), std::to_string(acc));
  }
}

TEST(Projection, ZeroWeightsGiveBias) {
  ParameterMap params;
  std::mt19937_64 rng(1);
  auto mlp = ProjectionMLP::create(VEKind::Grid, 64, 16, params, rng);
  for (auto& [name, t] : params) std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0);
  auto b2 = params.at("proj.grid.b2").mutable_values();
  for (std::size_t i = 0; i < b2.size(); ++i) b2[i] = 0.25 * i;
  const Scene s = scene_for(3);
  const auto tokens = encoders().grid_encode(render(s, kScene));
  const Tensor out = mlp(tokens.features, params);
  ASSERT_EQ(out.shape(), (Shape{36, 16}));
  for (std::size_t r = 0; r < 36; ++r)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(out.at(r, c), 0.25 * c);
}

TEST(Projection, OutputDimIsModelDimForEveryKind) {
  ParameterMap params;
  std::mt19937_64 rng(2);
  const Scene s = scene_for(4);
  const Raster r = render(s, kScene);
  for (VEKind k : kAllVEKinds) {
    const auto t = encoders().encode(k, s, r);
    auto mlp = ProjectionMLP::create(k, t.dim(), 32, params, rng);
    EXPECT_EQ(mlp(t.features, params).shape(), (Shape{t.count(), 32}));
  }
  auto mlp = ProjectionMLP::create(VEKind::Region, 47, 32, params, rng);
  EXPECT_THROW(mlp(encoders().region_encode(s, r).features, params), ConfigurationError);
}

TEST(Projection, GradCheckAndFrozenEncodersStayZero) {
  ParameterMap params;
  std::mt19937_64 rng(3);
  const Scene s = scene_for(5);
  const Raster r = render(s, kScene);
  const auto t = encoders().encode(VEKind::Patch, s, r);
  auto mlp = ProjectionMLP::create(VEKind::Patch, t.dim(), 8, params, rng);
  std::vector<Tensor> inputs;
  for (auto& [n, p] : params) inputs.push_back(p);
  auto loss = [&] { return vefuse::testing::weighted_sum(mlp(t.features, params), 11); };
  for (double err : vefuse::testing::gradcheck(loss, inputs)) EXPECT_LT(err, 1e-4);

  // Frozen encoder weights never enter the graph, so their accumulators stay empty.
  for (int step = 0; step < 3; ++step) {
    const auto toks = encoders().encode(VEKind::Region, s, r);
    auto m = ProjectionMLP::create(VEKind::Region, toks.dim(), 8, params, rng);
    backward(sum(m(toks.features, params)));
  }
  for (const auto& w : encoders().frozen_parameters()) {
    for (double g : w.grad()) EXPECT_EQ(g, 0.0);
    EXPECT_FALSE(w.requires_grad());
  }
}

TEST(TokenCache, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "vefuse_cache_test";
  std::filesystem::create_directories(dir);
  for (VEKind k : kAllVEKinds) {
    std::vector<VisualTokenSet> sets;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const Scene s = scene_for(seed);
      sets.push_back(encoders().encode(k, s, render(s, kScene)));
    }
    const auto path = dir / (std::string(ve_name(k)) + ".vftc");
    write_token_cache(path, k, sets);
    const auto back = read_token_cache(path);
    ASSERT_EQ(back.size(), sets.size());
    for (std::size_t i = 0; i < sets.size(); ++i) {
      EXPECT_EQ(back[i].kind, k);
      EXPECT_TRUE(bit_equal(back[i].features, sets[i].features));
      for (std::size_t t = 0; t < sets[i].count(); ++t) {
        EXPECT_EQ(back[i].footprints[t].box, sets[i].footprints[t].box);
        EXPECT_EQ(back[i].footprints[t].padding, sets[i].footprints[t].padding);
      }
    }
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
    EXPECT_THROW(read_token_cache(path), DataError);
  }
  std::ofstream(dir / "bad.vftc") << "nope";
  EXPECT_THROW(read_token_cache(dir / "bad.vftc"), DataError);
  std::filesystem::remove_all(dir);
}
