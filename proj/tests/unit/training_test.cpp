#include <gtest/gtest.h>

#include <filesystem>

#include "vefuse/analysis.hpp"
#include "vefuse/training.hpp"

using namespace vefuse;

namespace {

ExperimentConfig tiny(TaskKind task = TaskKind::QA) {
  ExperimentConfig c;
  c.task = task;
  c.scenes = 120;
  c.epochs = 1;
  c.batch_size = 16;
  c.layers = 1;
  c.heads = 2;
  c.d_model = 16;
  c.d_ff = 16;
  c.dropout = 0.0;
  c.eval_sample = 12;
  c.pool_size = 4;
  c.retrieval_pools = 2;
  c.lr = 1e-3;
  return c;
}

const VisionEncoders& encoders() {
  static const VisionEncoders e(VEConfig{}, SceneConfig{}.channels());
  return e;
}

bool same_params(const FusionModel& a, const FusionModel& b) {
  for (const auto& [name, p] : a.params()) {
    const auto& q = b.params().at(name);
    if (!std::equal(p.values().begin(), p.values().end(), q.values().begin())) return false;
  }
  return true;
}

}  // namespace

TEST(VeDropout, UniformOverThreeChoices) {
  std::mt19937_64 rng(2024);
  std::array<int, 3> counts{};
  const int n = 30000;
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(sample_ve_dropout(rng))];
  for (int c : counts) EXPECT_NEAR(static_cast<double>(c) / n, 1.0 / 3.0, 0.01);
  EXPECT_THROW(sample_ve_dropout(rng, 3), ConfigurationError);
  EXPECT_THROW(sample_ve_dropout(rng, 1), ConfigurationError);
}

TEST(VeDropout, ChoiceNamesAnEncoder) {
  const std::vector<VEKind> ves = {VEKind::Grid, VEKind::Patch};
  EXPECT_EQ(dropped_encoders(DropChoice::First, ves), std::vector<VEKind>{VEKind::Grid});
  EXPECT_EQ(dropped_encoders(DropChoice::Second, ves), std::vector<VEKind>{VEKind::Patch});
  EXPECT_TRUE(dropped_encoders(DropChoice::None, ves).empty());
}

TEST(RecallAt1, HandBuiltPools) {
  // Perfect diagonal.
  EXPECT_EQ(recall_at_1({{3, 1, 0}, {0, 2, 1}, {1, 0, 5}}), std::make_pair(1.0, 1.0));
  // Caption 0 prefers image 1; image 1 still ranks its own caption first.
  const auto [i2t, t2i] = recall_at_1({{1, 2, 0}, {0, 3, 0}, {0, 0, 1}});
  EXPECT_DOUBLE_EQ(t2i, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(i2t, 1.0);
  // A tie with the true pair is a miss.
  EXPECT_EQ(recall_at_1({{1, 1}, {0, 1}}), std::make_pair(0.5, 0.5));
  EXPECT_EQ(recall_at_1({{0, 0}, {0, 0}}), std::make_pair(0.0, 0.0));
  EXPECT_THROW(recall_at_1({{1}}), ConfigurationError);
}

TEST(RecallAt1, RandomScoresGiveOneOverN) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> z;
  const std::size_t n = 8;
  const int pools = 4000;
  double a = 0, b = 0;
  for (int p = 0; p < pools; ++p) {
    std::vector<std::vector<double>> s(n, std::vector<double>(n));
    for (auto& row : s)
      for (auto& v : row) v = z(rng);
    const auto [x, y] = recall_at_1(s);
    a += x;
    b += y;
  }
  // Each R@1 is a mean of 8 Bernoulli(1/8); over 4000 pools the sd is about 0.0018.
  EXPECT_NEAR(a / pools, 1.0 / n, 0.01);
  EXPECT_NEAR(b / pools, 1.0 / n, 0.01);
}

TEST(Training, ZeroEpochsKeepsInitialization) {
  auto c = tiny();
  c.epochs = 0;
  const Dataset d = load_dataset(c, encoders(), {VEKind::Grid});
  auto [m, r] = train_model(c, {VEKind::Grid}, 4, d);
  EXPECT_EQ(r.best_epoch, 0);
  EXPECT_EQ(r.steps, 0u);
  EXPECT_TRUE(same_params(m, FusionModel(m.config(), 4)));
}

TEST(Training, DeterministicPerSeed) {
  auto c = tiny();
  const std::vector<VEKind> ves = {VEKind::Region, VEKind::Grid};
  c.ves = ves;
  c.ve_dropout = true;
  c.dropout = 0.1;
  const Dataset d = load_dataset(c, encoders(), ves);
  auto [a, ra] = train_model(c, ves, 5, d);
  auto [b, rb] = train_model(c, ves, 5, d);
  auto [x, rx] = train_model(c, ves, 6, d);
  EXPECT_TRUE(same_params(a, b));
  EXPECT_EQ(ra.epoch_loss, rb.epoch_loss);
  EXPECT_FALSE(same_params(a, x));
  EXPECT_EQ(ra.steps, (d.train.corpus.examples.size() + 15) / 16);
}

TEST(Training, FrozenEncodersUntouchedByAnEpoch) {
  const auto c = tiny();
  const std::vector<VEKind> ves = {VEKind::Region, VEKind::Grid, VEKind::Patch};
  const Dataset d = load_dataset(c, encoders(), ves);
  std::vector<std::vector<double>> before;
  for (const auto& w : encoders().frozen_parameters()) before.emplace_back(w.values().begin(), w.values().end());
  const auto features_before = d.train.token_set(0, VEKind::Patch).features.clone();

  auto [m, r] = train_model(c, ves, 1, d);
  EXPECT_GT(r.steps, 0u);
  const auto after = encoders().frozen_parameters();
  ASSERT_EQ(after.size(), before.size());
  for (std::size_t i = 0; i < after.size(); ++i) {
    EXPECT_FALSE(after[i].requires_grad());
    for (double g : after[i].grad()) ASSERT_EQ(g, 0.0);
    EXPECT_TRUE(std::equal(before[i].begin(), before[i].end(), after[i].values().begin()));
  }
  const auto& f = d.train.token_set(0, VEKind::Patch).features;
  EXPECT_TRUE(std::equal(f.values().begin(), f.values().end(), features_before.values().begin()));
  EXPECT_FALSE(f.requires_grad());
}

TEST(Training, VeDropoutNeedsTwoEncoders) {
  auto c = tiny();
  c.ve_dropout = true;
  c.ves = {VEKind::Grid};
  EXPECT_THROW(validate(c), ConfigurationError);
  c.ves = {VEKind::Region, VEKind::Grid};
  const Dataset d = load_dataset(c, encoders(), {VEKind::Grid});
  EXPECT_THROW(train_model(c, {VEKind::Grid}, 1, d), ConfigurationError);
}

TEST(Training, NonFiniteLossIsReported) {
  auto c = tiny();
  c.lr = 1e300;
  c.warmup = 0.0;
  c.epochs = 2;
  const Dataset d = load_dataset(c, encoders(), {VEKind::Grid});
  EXPECT_THROW(train_model(c, {VEKind::Grid}, 1, d), std::runtime_error);
}

TEST(Evaluate, MatchingReportsRecall) {
  const auto c = tiny(TaskKind::Matching);
  const Dataset d = load_dataset(c, encoders(), {VEKind::Region});
  auto [m, r] = train_model(c, {VEKind::Region}, 2, d);
  ASSERT_TRUE(r.test.recall_at_1.has_value());
  EXPECT_DOUBLE_EQ(*r.test.recall_at_1, (*r.test.r1_image_to_text + *r.test.r1_text_to_image) / 2);
  EXPECT_EQ(r.test.n, 12u);
  const auto j = metrics_json(r.test);
  EXPECT_TRUE(j.contains("recall_at_1"));
  // QA has no retrieval metric.
  const auto q = tiny();
  const Dataset dq = load_dataset(q, encoders(), {VEKind::Region});
  const FusionModel qa(model_config_for(q, {VEKind::Region}, dq.test.corpus.label_count()), 1);
  EXPECT_FALSE(evaluate(qa, dq.test, 5, {}, 4, 2).recall_at_1.has_value());
}

TEST(Evaluate, DroppingAnInactiveEncoderIsRejected) {
  const auto c = tiny();
  const Dataset d = load_dataset(c, encoders(), {VEKind::Grid});
  const FusionModel m(model_config_for(c, {VEKind::Grid}, d.test.corpus.label_count()), 1);
  EXPECT_THROW(evaluate(m, d.test, 4, {VEKind::Patch}), ConfigurationError);
  // Dropping the only encoder leaves a text-only model, which still evaluates.
  EXPECT_EQ(evaluate(m, d.test, 4, {VEKind::Grid}).n, 4u);
}

TEST(CaptureRecords, PhrasesOnlyForMatchingImages) {
  const auto c = tiny(TaskKind::Matching);
  const std::vector<VEKind> ves = {VEKind::Region, VEKind::Patch};
  const Dataset d = load_dataset(c, encoders(), ves);
  const FusionModel m(model_config_for(c, ves, 2), 3);
  const auto recs = capture_records(m, d.test, 10);
  ASSERT_EQ(recs.size(), 10u);
  std::size_t with = 0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto& e = d.test.corpus.examples[i];
    EXPECT_EQ(recs[i].example_id, e.example_id);
    EXPECT_EQ(recs[i].num_layers(), 1u);
    EXPECT_EQ(recs[i].footprints.size(), 2u);
    EXPECT_EQ(recs[i].phrases.empty(), !e.image_matches_text() || e.phrases.empty());
    with += !recs[i].phrases.empty();
  }
  EXPECT_GT(with, 0u);
  const auto dropped = capture_records(m, d.test, 3, {VEKind::Region});
  EXPECT_EQ(dropped[0].footprints.size(), 1u);
  EXPECT_EQ(dropped[0].footprints[0].first, VEKind::Patch);
  EXPECT_EQ(capture_records(m, d.test, 0).size(), d.test.corpus.examples.size());
}

TEST(LoadDataset, ReadsWrittenCorpusAndReportsMissingSplits) {
  const auto dir = std::filesystem::temp_directory_path() / "vefuse_dataset_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  auto c = tiny();
  const auto splits = generate_splits(c);
  for (std::size_t i = 0; i < 3; ++i) write_corpus(splits[i], split_path(dir, static_cast<Split>(i + 1)));
  c.corpus_dir = dir.string();
  const Dataset d = load_dataset(c, encoders(), {VEKind::Grid});
  EXPECT_EQ(d.train.corpus.examples.size(), splits[0].examples.size());
  c.task = TaskKind::Matching;
  EXPECT_THROW(load_dataset(c, encoders(), {VEKind::Grid}), CompatibilityError);
  c.task = TaskKind::QA;
  std::filesystem::remove(split_path(dir, Split::Validation));
  EXPECT_THROW(load_dataset(c, encoders(), {VEKind::Grid}), DataError);
  std::filesystem::remove_all(dir);
}
