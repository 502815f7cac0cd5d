#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "vefuse/corpus.hpp"

using namespace vefuse;

namespace {

bool same_scene(const Scene& a, const Scene& b) {
  if (a.objects.size() != b.objects.size() || a.scene_id != b.scene_id || a.seed != b.seed) return false;
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    const auto &x = a.objects[i], &y = b.objects[i];
    if (x.id != y.id || x.shape != y.shape || x.color != y.color || x.size != y.size || !(x.box == y.box)) return false;
  }
  return true;
}

// Re-resolves a phrase or question against the scene by reading its words.
const SceneObject* resolve_by_inspection(const Scene& scene, const std::vector<std::string>& words) {
  int shape = -1, color = -1;
  for (const auto& w : words) {
    for (std::size_t i = 0; i < kShapeNames.size(); ++i)
      if (w == kShapeNames[i]) shape = static_cast<int>(i);
    for (std::size_t i = 0; i < kColorNames.size(); ++i)
      if (w == kColorNames[i]) color = static_cast<int>(i);
  }
  const SceneObject* found = nullptr;
  for (const auto& o : scene.objects) {
    if ((shape < 0 || o.shape == shape) && (color < 0 || o.color == color)) {
      if (found) return nullptr;  // ambiguous
      found = &o;
    }
  }
  return found;
}

std::vector<std::string> words_of(const std::vector<int>& ids, int begin, int end) {
  std::vector<std::string> w;
  for (int i = begin; i < end; ++i) w.push_back(vocabulary().word(ids[static_cast<std::size_t>(i)]));
  return w;
}

}  // namespace

TEST(GenerateScene, Deterministic) {
  SceneConfig cfg;
  EXPECT_TRUE(same_scene(generate_scene(0, cfg), generate_scene(0, cfg)));
  EXPECT_FALSE(same_scene(generate_scene(0, cfg), generate_scene(1, cfg)));
}

TEST(GenerateScene, SingleObjectConfig) {
  SceneConfig cfg;
  cfg.min_objects = cfg.max_objects = 1;
  for (std::uint64_t s = 0; s < 20; ++s) EXPECT_EQ(generate_scene(s, cfg).objects.size(), 1u);
}

TEST(GenerateScene, InfeasibleUniquenessIsGenerationError) {
  SceneConfig cfg;
  cfg.num_shapes = 2;
  cfg.num_colors = 2;
  cfg.min_objects = 5;
  cfg.max_objects = 5;
  EXPECT_THROW(generate_scene(0, cfg), GenerationError);
}

TEST(GenerateScene, RejectsSmallCanvas) {
  SceneConfig cfg;
  cfg.width = 7;
  EXPECT_THROW(generate_scene(0, cfg), ConfigurationError);
}

TEST(GenerateScene, CorpusInvariants) {
  SceneConfig cfg;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Scene s = generate_scene(seed, cfg);
    ASSERT_GE(s.objects.size(), 1u);
    ASSERT_LE(s.objects.size(), static_cast<std::size_t>(cfg.max_objects));
    std::set<int> ids;
    std::set<std::pair<int, int>> attrs;
    for (const auto& o : s.objects) {
      EXPECT_TRUE(ids.insert(o.id).second);
      EXPECT_TRUE(attrs.insert({o.shape, o.color}).second) << "duplicate (shape,color) in scene " << seed;
      EXPECT_GT(o.box.w, 0.0);
      EXPECT_GT(o.box.h, 0.0);
      EXPECT_LE(o.box.x + o.box.w, 1.0);
      EXPECT_LE(o.box.y + o.box.h, 1.0);
    }
  }
}

TEST(Render, BackgroundIsZero) {
  SceneConfig cfg;
  Scene s = generate_scene(3, cfg);
  Raster r = render(s, cfg);
  std::vector<std::vector<char>> covered(16, std::vector<char>(16, 0));
  for (const auto& o : s.objects)
    for (int y = o.cy; y < o.cy + o.ch; ++y)
      for (int x = o.cx; x < o.cx + o.cw; ++x) covered[y][x] = 1;
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      if (!covered[y][x])
        for (std::size_t c = 0; c < r.channels; ++c) EXPECT_EQ(r.cell(x, y)[c], 0.0);
}

TEST(Render, FullCanvasObject) {
  SceneConfig cfg;
  Scene s;
  SceneObject o;
  o.shape = 2;
  o.color = 4;
  o.size = 2;
  o.cw = 16;
  o.ch = 16;
  o.box = {0, 0, 1, 1};
  s.objects.push_back(o);
  Raster r = render(s, cfg);
  const auto enc = attribute_encoding(o, cfg);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (std::size_t c = 0; c < r.channels; ++c) ASSERT_EQ(r.cell(x, y)[c], enc[c]);
}

// Independent rasterizer: a cell belongs to the last object whose normalized box contains its center.
TEST(Render, MatchesCellCenterOracle) {
  SceneConfig cfg;
  cfg.allow_overlap = true;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Scene s = generate_scene(seed, cfg);
    Raster r = render(s, cfg);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        const double px = (x + 0.5) / 16.0, py = (y + 0.5) / 16.0;
        std::vector<double> expected(cfg.channels(), 0.0);
        for (const auto& o : s.objects)
          if (px > o.box.x && px < o.box.right() && py > o.box.y && py < o.box.bottom())
            expected = attribute_encoding(o, cfg);
        for (std::size_t c = 0; c < r.channels; ++c) ASSERT_EQ(r.cell(x, y)[c], expected[c]) << seed;
      }
  }
}

TEST(MatchingExample, ForcedBranches) {
  std::vector<Scene> corpus = {generate_scene(1, {}, 1), generate_scene(2, {}, 2), generate_scene(3, {}, 3)};
  auto pos = make_matching_example(corpus, 1, true, 1);
  EXPECT_EQ(pos.label, 1);
  EXPECT_EQ(pos.image_scene, 1u);
  auto neg = make_matching_example(corpus, 1, false, 2);
  EXPECT_EQ(neg.label, 0);
  EXPECT_NE(neg.image_scene, neg.text_scene);
  EXPECT_EQ(neg.phrases.size(), corpus[1].objects.size());
}

TEST(MatchingExample, CorpusTooSmall) {
  std::vector<Scene> corpus = {generate_scene(1, {})};
  std::mt19937_64 rng(0);
  EXPECT_THROW(make_matching_example(corpus, 0, rng), DataError);
}

TEST(MatchingExample, PositiveFractionIsHalf) {
  std::vector<Scene> corpus;
  for (std::uint64_t i = 0; i < 50; ++i) corpus.push_back(generate_scene(i, {}, i));
  std::mt19937_64 rng(17);
  int positives = 0;
  for (int i = 0; i < 10000; ++i) {
    auto ex = make_matching_example(corpus, static_cast<std::size_t>(i % 50), rng);
    positives += ex.label;
    ASSERT_EQ(ex.label == 1, ex.image_scene == ex.text_scene);
  }
  EXPECT_NEAR(positives / 10000.0, 0.5, 0.02);
}

TEST(MatchingExample, PhraseSpansResolveToGoldBoxes) {
  std::vector<Scene> corpus;
  for (std::uint64_t i = 0; i < 200; ++i) corpus.push_back(generate_scene(i, {}, i));
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    auto ex = make_matching_example(corpus, i, true, i);
    for (const auto& p : ex.phrases) {
      const SceneObject* o = resolve_by_inspection(corpus[i], words_of(ex.tokens, p.begin, p.end));
      ASSERT_NE(o, nullptr);
      EXPECT_EQ(o->id, p.object_id);
      EXPECT_EQ(o->box, p.gold);
      EXPECT_EQ(vocabulary().word(ex.tokens[static_cast<std::size_t>(p.end - 1)]), kShapeNames[static_cast<std::size_t>(o->shape)]);
    }
  }
}

TEST(QAExample, SingleRedCircle) {
  Scene s;
  SceneObject o;
  o.shape = 0;  // circle
  o.color = 0;  // red
  o.cx = 2, o.cy = 3, o.cw = 4, o.ch = 4;
  o.box = {2 / 16.0, 3 / 16.0, 0.25, 0.25};
  s.objects.push_back(o);
  QuestionConfig colors_only{true, false};
  std::mt19937_64 rng(0);
  auto ex = make_qa_example(s, 0, rng, {}, colors_only);
  ASSERT_TRUE(ex);
  EXPECT_EQ(vocabulary().decode(ex->tokens), "what color is the circle ?");
  EXPECT_EQ(answer_name(ex->label, {}, colors_only), "red");
  ASSERT_EQ(ex->phrases.size(), 1u);
  EXPECT_EQ(ex->phrases[0].gold, o.box);
}

TEST(QAExample, DeterministicForSameSeed) {
  Scene s = generate_scene(9, {});
  std::mt19937_64 a(5), b(5);
  auto x = make_qa_example(s, 0, a), y = make_qa_example(s, 0, b);
  ASSERT_TRUE(x && y);
  EXPECT_EQ(x->tokens, y->tokens);
  EXPECT_EQ(x->label, y->label);
}

TEST(QAExample, AmbiguousSceneSignalsResample) {
  Scene s;
  SceneObject a, b;
  a.id = 0, a.shape = 0, a.color = 0;
  b.id = 1, b.shape = 0, b.color = 0;
  s.objects = {a, b};
  std::mt19937_64 rng(0);
  EXPECT_FALSE(make_qa_example(s, 0, rng).has_value());
}

TEST(QAExample, InspectionOracleAgreesOnThousandExamples) {
  Corpus c = generate_corpus(TaskKind::QA, 1000, 42, Split::Train);
  ASSERT_EQ(c.examples.size(), 1000u);
  for (const auto& ex : c.examples) {
    const Scene& s = c.scenes[ex.image_scene];
    const auto q = words_of(ex.tokens, 0, static_cast<int>(ex.tokens.size()));
    const SceneObject* target = resolve_by_inspection(s, q);
    ASSERT_NE(target, nullptr) << vocabulary().decode(ex.tokens);
    const int expected = q[1] == "color" ? color_label(target->color) : shape_label(target->shape, c.scene_config, c.question_config);
    EXPECT_EQ(ex.label, expected);
    ASSERT_EQ(ex.phrases.size(), 1u);
    EXPECT_EQ(ex.phrases[0].gold, target->box);
    EXPECT_LT(ex.phrases[0].end - 1, static_cast<int>(ex.tokens.size()));
  }
}

TEST(QAExample, LabelBalanceWithinTwentyPercent) {
  Corpus c = generate_corpus(TaskKind::QA, 10000, 7, Split::Train);
  std::map<int, int> counts;
  for (const auto& ex : c.examples) ++counts[ex.label];
  const double uniform = 10000.0 / c.label_count();
  ASSERT_EQ(counts.size(), static_cast<std::size_t>(c.label_count()));
  for (auto [label, n] : counts) EXPECT_NEAR(n / uniform, 1.0, 0.2) << answer_name(label, {}, {});
}

TEST(Corpus, VocabularyClosedAndTextBounded) {
  for (TaskKind task : {TaskKind::QA, TaskKind::Matching}) {
    Corpus c = generate_corpus(task, 500, 3, Split::Validation);
    for (const auto& ex : c.examples) {
      EXPECT_LE(ex.tokens.size(), 96u);
      for (int t : ex.tokens) {
        EXPECT_GE(t, 0);
        EXPECT_LT(static_cast<std::size_t>(t), vocabulary().size());
      }
      EXPECT_GE(ex.label, 0);
      EXPECT_LT(ex.label, c.label_count());
    }
  }
}

TEST(Corpus, SplitsUseDisjointSeeds) {
  std::set<std::uint64_t> seen;
  for (Split s : {Split::Train, Split::Validation, Split::Test})
    for (std::uint64_t i = 0; i < 2000; ++i) EXPECT_TRUE(seen.insert(scene_seed(11, s, i)).second);
}

TEST(Corpus, JsonLinesRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "vefuse_corpus_roundtrip.jsonl";
  for (TaskKind task : {TaskKind::QA, TaskKind::Matching}) {
    Corpus c = generate_corpus(task, 64, 5, Split::Test);
    write_corpus(c, path);
    Corpus back = read_corpus(path);
    ASSERT_EQ(back.task, task);
    ASSERT_EQ(back.scenes.size(), c.scenes.size());
    ASSERT_EQ(back.examples.size(), c.examples.size());
    for (std::size_t i = 0; i < c.scenes.size(); ++i) {
      EXPECT_TRUE(same_scene(back.scenes[i], c.scenes[i]));
      const Raster r1 = render(c.scenes[i], c.scene_config), r2 = render(back.scenes[i], back.scene_config);
      EXPECT_EQ(r1.data, r2.data);
    }
    for (std::size_t i = 0; i < c.examples.size(); ++i) {
      EXPECT_EQ(back.examples[i].tokens, c.examples[i].tokens);
      EXPECT_EQ(back.examples[i].label, c.examples[i].label);
      EXPECT_EQ(back.examples[i].image_scene, c.examples[i].image_scene);
      ASSERT_EQ(back.examples[i].phrases.size(), c.examples[i].phrases.size());
      for (std::size_t p = 0; p < c.examples[i].phrases.size(); ++p)
        EXPECT_EQ(back.examples[i].phrases[p].gold, c.examples[i].phrases[p].gold);
    }
  }
  std::filesystem::remove(path);
}
