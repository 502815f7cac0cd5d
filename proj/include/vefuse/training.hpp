#pragma once

// Corpus preparation, training with best-validation checkpointing, evaluation, and the
// encoder-combination experiment matrix.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <thread>

#include <json.hpp>

#include "vefuse/config.hpp"
#include "vefuse/corpus.hpp"
#include "vefuse/encoders.hpp"
#include "vefuse/model.hpp"

namespace vefuse {

/// A corpus split with its frozen visual tokens precomputed per scene.
struct PreparedSplit {
  Split split = Split::Train;
  Corpus corpus;
  std::vector<std::array<std::optional<VisualTokenSet>, 3>> tokens;  // per scene, per VE kind

  const VisualTokenSet& token_set(std::size_t scene, VEKind k) const {
    const auto& t = tokens.at(scene)[static_cast<std::size_t>(k)];
    if (!t) throw ConfigurationError("encoder " + std::string(ve_name(k)) + " was not prepared for this split");
    return *t;
  }

  /// Token-set pointers for an example, in the order of `ves`.
  std::vector<const VisualTokenSet*> inputs(const TaskExample& e, const std::vector<VEKind>& ves) const {
    std::vector<const VisualTokenSet*> out;
    for (VEKind k : ves) out.push_back(&token_set(e.image_scene, k));
    return out;
  }
};

inline PreparedSplit prepare_split(Corpus corpus, Split split, const VisionEncoders& enc,
                                   const std::vector<VEKind>& ves) {
  PreparedSplit p;
  p.split = split;
  p.corpus = std::move(corpus);
  p.tokens.resize(p.corpus.scenes.size());
  for (std::size_t i = 0; i < p.corpus.scenes.size(); ++i) {
    const Raster r = render(p.corpus.scenes[i], p.corpus.scene_config);
    for (VEKind k : ves) p.tokens[i][static_cast<std::size_t>(k)] = enc.encode(k, p.corpus.scenes[i], r);
  }
  return p;
}

struct Dataset {
  PreparedSplit train, val, test;
};

inline std::array<Corpus, 3> generate_splits(const ExperimentConfig& c) {
  return {generate_corpus(c.task, static_cast<std::size_t>(c.train_scenes()), c.corpus_seed, Split::Train, c.scene,
                          c.questions),
          generate_corpus(c.task, static_cast<std::size_t>(c.val_scenes()), c.corpus_seed, Split::Validation, c.scene,
                          c.questions),
          generate_corpus(c.task, static_cast<std::size_t>(c.test_scenes()), c.corpus_seed, Split::Test, c.scene,
                          c.questions)};
}

inline std::filesystem::path split_path(const std::filesystem::path& dir, Split s) {
  return dir / (std::string(split_name(s)) + ".jsonl");
}

/// Reads `<dir>/{train,val,test}.jsonl` when a corpus directory is configured, otherwise generates.
inline Dataset load_dataset(const ExperimentConfig& c, const VisionEncoders& enc, const std::vector<VEKind>& ves) {
  std::array<Corpus, 3> splits;
  if (!c.corpus_dir.empty()) {
    for (Split s : {Split::Train, Split::Validation, Split::Test}) {
      const auto path = split_path(c.corpus_dir, s);
      if (!std::filesystem::exists(path)) throw DataError("missing corpus split " + path.string());
      auto& split = splits[static_cast<std::size_t>(s) - 1];
      split = read_corpus(path);
      if (split.task != c.task)
        throw CompatibilityError(path.string() + " holds a " + std::string(task_name(split.task)) +
                                 " corpus, config asks for " + std::string(task_name(c.task)));
    }
  } else {
    splits = generate_splits(c);
  }
  return {prepare_split(std::move(splits[0]), Split::Train, enc, ves),
          prepare_split(std::move(splits[1]), Split::Validation, enc, ves),
          prepare_split(std::move(splits[2]), Split::Test, enc, ves)};
}

// ---------------------------------------------------------------------------
// VE-dropout

enum class DropChoice { First = 0, Second = 1, None = 2 };

inline std::string_view drop_choice_name(DropChoice d) {
  switch (d) {
    case DropChoice::First: return "first";
    case DropChoice::Second: return "second";
    case DropChoice::None: return "none";
  }
  return "?";
}

/// One of first / second / none with probability 1/3 each. Only defined for two encoders.
inline DropChoice sample_ve_dropout(std::mt19937_64& rng, std::size_t num_ves = 2) {
  if (num_ves != 2) {
    throw ConfigurationError("encoder dropout is only supported for 2-encoder models, got " + std::to_string(num_ves));
  }
  return static_cast<DropChoice>(std::uniform_int_distribution<int>(0, 2)(rng));
}

inline std::vector<VEKind> dropped_encoders(DropChoice d, const std::vector<VEKind>& ves) {
  if (d == DropChoice::None) return {};
  return {ves.at(static_cast<std::size_t>(d))};
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalMetrics {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t n = 0;
  std::optional<double> recall_at_1;  // matching only: mean of image->text and text->image
  std::optional<double> r1_image_to_text;
  std::optional<double> r1_text_to_image;
};

inline nlohmann::json metrics_json(const EvalMetrics& m) {
  nlohmann::json j = {{"accuracy", m.accuracy}, {"loss", m.loss}, {"n", m.n}};
  if (m.recall_at_1) {
    j["recall_at_1"] = *m.recall_at_1;
    j["r1_image_to_text"] = *m.r1_image_to_text;
    j["r1_text_to_image"] = *m.r1_text_to_image;
  }
  return j;
}

/// R@1 in both directions for a square score matrix scores[caption][image]; the true pairs lie
/// on the diagonal. A ranking hit requires the diagonal entry to be the strict unique maximum,
/// so ties count as misses.
inline std::pair<double, double> recall_at_1(const std::vector<std::vector<double>>& scores) {
  const std::size_t n = scores.size();
  if (n < 2) throw ConfigurationError("retrieval pool needs at least 2 candidates");
  int t2i = 0, i2t = 0;
  for (std::size_t c = 0; c < n; ++c) {
    bool best = true;
    for (std::size_t i = 0; i < n; ++i)
      if (i != c && scores[c][i] >= scores[c][c]) best = false;
    t2i += best;
  }
  for (std::size_t i = 0; i < n; ++i) {
    bool best = true;
    for (std::size_t c = 0; c < n; ++c)
      if (c != i && scores[c][i] >= scores[i][i]) best = false;
    i2t += best;
  }
  return {static_cast<double>(i2t) / n, static_cast<double>(t2i) / n};
}

inline double match_score(const Tensor& logits) { return logits[1] - logits[0]; }

/// Accuracy and mean loss over the first `sample` examples; for matching also R@1 over
/// `pools` disjoint pools of `pool_size` consecutive scenes with their own captions.
inline EvalMetrics evaluate(const FusionModel& model, const PreparedSplit& data, std::size_t sample,
                            const std::vector<VEKind>& drop = {}, std::size_t pool_size = 32, std::size_t pools = 0) {
  NoGradGuard ng;
  const auto& ves = model.config().ves;
  EvalMetrics m;
  const std::size_t n = std::min(sample, data.corpus.examples.size());
  ForwardOptions opt;
  opt.drop = drop;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = data.corpus.examples[i];
    const auto inputs = data.inputs(e, ves);
    const auto r = model.forward(e.tokens, inputs, opt);
    m.loss += model.task_loss(r.logits, e.label).item();
    std::size_t arg = 0;
    for (std::size_t c = 1; c < r.logits.size(); ++c)
      if (r.logits[c] > r.logits[arg]) arg = c;
    m.accuracy += static_cast<int>(arg) == e.label;
  }
  m.n = n;
  if (n > 0) {
    m.accuracy /= static_cast<double>(n);
    m.loss /= static_cast<double>(n);
  }
  if (data.corpus.task == TaskKind::Matching && pools > 0) {
    if (pool_size < 2) throw ConfigurationError("retrieval pool needs at least 2 candidates");
    const std::size_t avail = data.corpus.scenes.size() / pool_size;
    const std::size_t np = std::min(pools, avail);
    if (np == 0) throw ConfigurationError("split has fewer scenes than one retrieval pool");
    double i2t = 0, t2i = 0;
    for (std::size_t p = 0; p < np; ++p) {
      std::vector<std::vector<double>> scores(pool_size, std::vector<double>(pool_size));
      for (std::size_t c = 0; c < pool_size; ++c) {
        const auto caption = describe_scene(data.corpus.scenes[p * pool_size + c]).first;
        for (std::size_t im = 0; im < pool_size; ++im) {
          std::vector<const VisualTokenSet*> inputs;
          for (VEKind k : ves) inputs.push_back(&data.token_set(p * pool_size + im, k));
          scores[c][im] = match_score(model.forward(caption, inputs, opt).logits);
        }
      }
      const auto [a, b] = recall_at_1(scores);
      i2t += a;
      t2i += b;
    }
    m.r1_image_to_text = i2t / np;
    m.r1_text_to_image = t2i / np;
    m.recall_at_1 = (i2t + t2i) / (2.0 * np);
  }
  return m;
}

inline double selection_metric(const EvalMetrics& m) { return m.accuracy; }

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: keep checkpoint in memory only
  bool verbose = false;
  std::function<void(const std::string&)> log;  // per-epoch lines
};

struct TrainResult {
  int best_epoch = 0;  // 0 = initialization
  EvalMetrics best_val;
  EvalMetrics test;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_val;
  std::size_t steps = 0;
  double seconds = 0.0;
  std::size_t truncations = 0;
};

/// Trains one (encoder combination, seed) cell. The returned model holds the best-validation
/// parameters; test metrics are computed with them.
inline std::pair<FusionModel, TrainResult> train_model(const ExperimentConfig& cfg, const std::vector<VEKind>& ves,
                                                       std::uint64_t seed, const Dataset& data,
                                                       const TrainOptions& topt = {}) {
  validate(cfg);
  if (cfg.ve_dropout && ves.size() != 2)
    throw ConfigurationError("encoder dropout is only supported for 2-encoder models");
  const auto t0 = std::chrono::steady_clock::now();
  FusionModel model(model_config_for(cfg, ves, data.train.corpus.label_count()), seed);
  const auto& train = data.train.corpus.examples;
  const std::size_t steps_per_epoch = (train.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                      static_cast<std::size_t>(cfg.batch_size);
  OptimizerState opt;
  opt.schedule = {cfg.lr, cfg.warmup, steps_per_epoch * static_cast<std::size_t>(cfg.epochs)};
  opt.weight_decay = cfg.weight_decay;

  std::mt19937_64 order_rng(mix_seed(seed, 0x0dde));
  std::mt19937_64 dropout_rng(mix_seed(seed, 0xd209));
  std::mt19937_64 ve_drop_rng(mix_seed(seed, 0x7ed0));
  const auto val_n = static_cast<std::size_t>(cfg.eval_sample);

  TrainResult res;
  res.best_val = evaluate(model, data.val, val_n);
  ParameterMap best;
  for (const auto& [name, p] : model.params()) best[name] = p.clone();
  auto emit = [&](const std::string& s) {
    if (topt.log) topt.log(s);
  };
  emit("epoch 0 val_acc " + std::to_string(res.best_val.accuracy));

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double total = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t lo = b * static_cast<std::size_t>(cfg.batch_size);
      const std::size_t hi = std::min(train.size(), lo + static_cast<std::size_t>(cfg.batch_size));
      ForwardOptions fo;
      fo.train = true;
      fo.rng = &dropout_rng;
      if (cfg.ve_dropout) fo.drop = dropped_encoders(sample_ve_dropout(ve_drop_rng, ves.size()), ves);
      zero_grads(model.params());
      const double inv = 1.0 / static_cast<double>(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) {
        const auto& e = train[order[i]];
        const auto inputs = data.train.inputs(e, ves);
        const auto r = model.forward(e.tokens, inputs, fo);
        const Tensor loss = model.task_loss(r.logits, e.label);
        if (!std::isfinite(loss.item()))
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", example " +
                              std::to_string(e.example_id));
        total += loss.item();
        backward(scale(loss, inv));
      }
      adamw_step(opt, model.params());
      ++res.steps;
    }
    res.epoch_loss.push_back(total / static_cast<double>(train.size()));
    const EvalMetrics val = evaluate(model, data.val, val_n);
    res.epoch_val.push_back(val.accuracy);
    emit("epoch " + std::to_string(epoch) + " loss " + std::to_string(res.epoch_loss.back()) + " val_acc " +
         std::to_string(val.accuracy));
    if (selection_metric(val) > selection_metric(res.best_val)) {
      res.best_val = val;
      res.best_epoch = epoch;
      for (const auto& [name, p] : model.params())
        std::copy(p.values().begin(), p.values().end(), best[name].mutable_values().begin());
    }
  }
  for (auto& [name, p] : model.params()) {
    std::copy(best[name].values().begin(), best[name].values().end(), p.mutable_values().begin());
    p.zero_grad();
  }
  res.test = evaluate(model, data.test, val_n, {}, static_cast<std::size_t>(cfg.pool_size),
                      static_cast<std::size_t>(cfg.retrieval_pools));
  res.truncations = model.truncation_count();
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(model), std::move(res)};
}

}  // namespace vefuse
