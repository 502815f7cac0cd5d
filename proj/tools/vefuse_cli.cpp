// vefuse command line: corpus generation, training, attention analysis and charts.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "vefuse/analysis.hpp"
#include "vefuse/dump.hpp"
#include "vefuse/matrix.hpp"
#include "vefuse/report.hpp"

namespace fs = std::filesystem;
using namespace vefuse;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kMissing = 3, kIncompatible = 4 };

fs::path output_root() {
  const char* e = std::getenv("VEFUSE_OUT");
  return (e && *e) ? fs::path(e) : fs::path("vefuse_out");
}

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* app, Common& c, const char* out_help) {
  app->add_option("-c,--config", c.config, "key = value experiment config");
  app->add_option("--set", c.sets, "override one config key (key=value), repeatable");
  app->add_option("-o,--out", c.out, out_help);
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigurationError("--set expects key=value, got '" + kv + "'");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    try {
      set_config_value(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    } catch (const ConfigurationError& e) {
      throw ConfigurationError("--set " + kv + ": " + e.what());
    }
  }
  validate(cfg);
  return cfg;
}

void say(const std::string& s) { std::cout << s << std::endl; }

nlohmann::json provenance(const ExperimentConfig& cfg) {
  std::vector<std::uint64_t> seeds(cfg.seeds.begin(), cfg.seeds.end());
  return {{"tool", "vefuse"}, {"version", kVersion}, {"config_hash", hex64(config_hash(cfg))}, {"seeds", seeds},
          {"config", config_text(cfg)}};
}

// ---------------------------------------------------------------------------

int cmd_generate(const Common& common, bool cache) {
  ExperimentConfig cfg = load(common);
  const fs::path dir = common.out.empty() ? output_root() / "corpus" : fs::path(common.out);
  fs::create_directories(dir);
  auto splits = generate_splits(cfg);
  nlohmann::json counts = nlohmann::json::object();
  for (std::size_t i = 0; i < 3; ++i) {
    const Split s = static_cast<Split>(i + 1);
    write_corpus(splits[i], split_path(dir, s));
    counts[std::string(split_name(s))] = {{"scenes", splits[i].scenes.size()}, {"examples", splits[i].examples.size()}};
  }
  if (cache) {
    const VisionEncoders enc(cfg.encoders, cfg.scene.channels());
    fs::create_directories(dir / "cache");
    for (std::size_t i = 0; i < 3; ++i) {
      const Split s = static_cast<Split>(i + 1);
      const PreparedSplit p = prepare_split(splits[i], s, enc, cfg.ves);
      for (VEKind k : cfg.ves) {
        std::vector<VisualTokenSet> sets;
        for (std::size_t n = 0; n < p.corpus.scenes.size(); ++n) sets.push_back(p.token_set(n, k));
        write_token_cache(dir / "cache" / (std::string(split_name(s)) + "." + std::string(ve_name(k)) + ".vftc"), k, sets);
      }
    }
  }
  nlohmann::json manifest = {{"format", "vefuse-corpus"},
                             {"task", task_name(cfg.task)},
                             {"labels", splits[0].label_count()},
                             {"splits", counts},
                             {"token_cache", cache},
                             {"provenance", provenance(cfg)}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  say("wrote " + std::string(task_name(cfg.task)) + " corpus to " + dir.string() + ": " + counts.dump());
  return kOk;
}

int cmd_train_matrix(const Common& common, const std::string& ves, const std::string& seeds, const std::string& corpus,
                     bool resume, int workers, std::size_t max_ves) {
  ExperimentConfig cfg = load(common);
  if (!ves.empty()) set_config_value(cfg, "ves", ves);
  if (!seeds.empty()) set_config_value(cfg, "seeds", seeds);
  if (!corpus.empty()) cfg.corpus_dir = corpus;
  if (workers > 0) cfg.workers = workers;
  cfg.out_dir = common.out.empty() ? (output_root() / "matrix").string() : common.out;
  validate(cfg);
  if (!cfg.corpus_dir.empty() && !fs::exists(cfg.corpus_dir)) throw DataError("corpus directory " + cfg.corpus_dir + " does not exist");

  const VisionEncoders enc(cfg.encoders, cfg.scene.channels());
  MatrixOptions mo;
  mo.resume = resume;
  mo.max_size = max_ves;
  mo.log = say;
  const auto res = run_matrix(cfg, enc, mo);
  const fs::path out = cfg.out_dir;
  write_results_csv(res.rows, out / "results.csv");
  const std::string table = results_text(res.rows);
  write_text(out / "results.txt", table);
  write_text(out / "results.svg", results_chart_svg(res.rows));
  nlohmann::json summary = {{"provenance", provenance(cfg)}, {"trained", res.trained}, {"resumed", res.resumed}};
  std::ofstream(out / "summary.json") << summary.dump(2) << '\n';
  std::cout << table;
  say(std::to_string(res.trained) + " cells trained, " + std::to_string(res.resumed) + " resumed; results in " + out.string());
  const bool any_failed = std::any_of(res.rows.begin(), res.rows.end(), [](const MatrixRow& r) { return r.failed > 0; });
  return any_failed ? kInternal : kOk;
}

int cmd_train(const Common& common, const std::string& ves, std::uint64_t seed, const std::string& corpus) {
  ExperimentConfig cfg = load(common);
  if (!ves.empty()) set_config_value(cfg, "ves", ves);
  if (!corpus.empty()) cfg.corpus_dir = corpus;
  cfg.seeds = {seed};
  cfg.out_dir = common.out.empty() ? (output_root() / "runs").string() : common.out;
  validate(cfg);
  const VisionEncoders enc(cfg.encoders, cfg.scene.channels());
  const Dataset data = load_dataset(cfg, enc, cfg.ves);
  const auto cell = run_cell(cfg, cfg.ves, seed, data, {});
  say(cell_dir(cfg.out_dir, cfg.ves, seed).string() + "/manifest.json");
  if (!cell.ok) {
    std::cerr << "training failed: " << cell.error << '\n';
    return kInternal;
  }
  say("test accuracy " + svg::num(cell.accuracy(), 4) + (cell.r1() ? ", R@1 " + svg::num(*cell.r1(), 4) : ""));
  return kOk;
}

struct AnalyzeArgs {
  std::string checkpoint;
  std::string corpus;
  std::string split = "test";
  int sample = -1;
  std::string layer = "last";
  std::string drop = "none";
  int dumps = 0;
};

int cmd_analyze(const Common& common, const AnalyzeArgs& a) {
  const fs::path ckpt = a.checkpoint;
  if (!fs::exists(ckpt / "model.json")) throw DataError("no checkpoint at " + ckpt.string());
  // Default config: the one the cell was trained with.
  Common c = common;
  if (c.config.empty() && fs::exists(ckpt.parent_path() / "config.txt")) c.config = (ckpt.parent_path() / "config.txt").string();
  ExperimentConfig cfg = load(c);
  if (!a.corpus.empty()) cfg.corpus_dir = a.corpus;
  if (a.sample >= 0) cfg.eval_sample = a.sample;
  const LayerSelection sel = parse_layer_selection(a.layer);

  const FusionModel model = load_checkpoint(ckpt);
  const auto& mc = model.config();
  for (VEKind k : mc.ves)
    if (mc.ve_dim(k) != cfg.encoders.dim(k))
      throw CompatibilityError("checkpoint expects " + std::string(ve_name(k)) + " features of dim " +
                               std::to_string(mc.ve_dim(k)) + ", encoders emit " + std::to_string(cfg.encoders.dim(k)));
  const VisionEncoders enc(cfg.encoders, cfg.scene.channels());
  cfg.ves = mc.ves;
  const Dataset data = load_dataset(cfg, enc, mc.ves);
  if (data.test.corpus.label_count() != mc.labels)
    throw CompatibilityError("checkpoint has a " + std::to_string(mc.labels) + "-way head, " +
                             std::string(task_name(cfg.task)) + " corpus has " +
                             std::to_string(data.test.corpus.label_count()) + " labels");
  const PreparedSplit& split = a.split == "val" ? data.val : a.split == "train" ? data.train : data.test;
  if (a.split != "val" && a.split != "train" && a.split != "test") throw ConfigurationError("--split must be train, val or test");

  const fs::path out = common.out.empty() ? output_root() / "analysis" : fs::path(common.out);
  fs::create_directories(out);
  const auto sample = static_cast<std::size_t>(cfg.eval_sample);
  const auto records = capture_records(model, split, sample);
  AttentionAnalyzer an(sel);
  for (const auto& r : records) an.add(r);
  for (int i = 0; i < a.dumps && i < static_cast<int>(records.size()); ++i) write_attention_dump(out / "dumps", records[static_cast<std::size_t>(i)]);

  std::vector<DropEval> drops;
  if (a.drop != "none") {
    if (mc.ves.size() < 2) throw ConfigurationError("--drop-ve needs a model with at least two encoders");
    std::vector<VEKind> which;
    if (a.drop == "first" || a.drop == "both") which.push_back(mc.ves[0]);
    if (a.drop == "second" || a.drop == "both") which.push_back(mc.ves[1]);
    if (which.empty()) which.push_back(parse_ve_kind(a.drop));
    const EvalMetrics full = evaluate(model, split, sample, {}, static_cast<std::size_t>(cfg.pool_size),
                                      static_cast<std::size_t>(cfg.retrieval_pools));
    for (VEKind k : which)
      drops.push_back(drop_ve_eval(model, split, k, sample, static_cast<std::size_t>(cfg.pool_size),
                                   static_cast<std::size_t>(cfg.retrieval_pools), &full));
  }

  write_metric_csv(an.cls_table(), out / "cls_attention.csv");
  write_metric_csv(an.flow_table(), out / "modality_flow.csv");
  write_metric_csv(an.surplus_table(), out / "surplus_attention.csv");
  write_metric_csv(an.surplus_total_table(), out / "surplus_total.csv");
  write_metric_csv(an.grounding_table(), out / "grounding_accuracy.csv");
  write_metric_csv(drop_table(drops), out / "drop_ve.csv");
  const auto charts = render_charts(out);

  nlohmann::json drop_j = nlohmann::json::array();
  for (const auto& d : drops) drop_j.push_back(drop_json(d));
  nlohmann::json summary = {{"provenance", provenance(cfg)},
                            {"checkpoint", ckpt.string()},
                            {"checkpoint_manifest", read_checkpoint_manifest(ckpt)},
                            {"split", a.split},
                            {"layers", a.layer},
                            {"records", an.records()},
                            {"records_without_phrases", an.skipped()},
                            {"phrases_with_empty_gold_set", an.empty_gold()},
                            {"drop_ve", drop_j}};
  summary["checkpoint_manifest"].erase("parameters");
  std::ofstream(out / "summary.json") << summary.dump(2) << '\n';
  say("analyzed " + std::to_string(an.records()) + " examples; " + std::to_string(charts.size()) + " charts in " +
      out.string());
  return kOk;
}

MatrixRow row_from_csv(const std::vector<std::string>& f) {
  MatrixRow r;
  std::string combo = f[0];
  for (std::size_t p; (p = combo.find('+')) != std::string::npos;) {
    r.ves.push_back(parse_ve_kind(combo.substr(0, p)));
    combo.erase(0, p + 1);
  }
  r.ves.push_back(parse_ve_kind(combo));
  r.ok = std::stoul(f[2]);
  r.failed = std::stoul(f[3]);
  if (!f[4].empty()) r.accuracy = {std::stod(f[4]), std::stod(f[5]), r.ok};
  if (f.size() > 7 && !f[6].empty()) r.r1 = SeedStats{std::stod(f[6]), std::stod(f[7]), r.ok};
  return r;
}

int cmd_report(const std::string& in, const std::string& layer) {
  const fs::path dir = in.empty() ? output_root() / "analysis" : fs::path(in);
  if (!fs::is_directory(dir)) throw DataError("no such directory " + dir.string());
  auto charts = render_charts(dir, layer);
  if (fs::exists(dir / "results.csv")) {
    std::ifstream f(dir / "results.csv");
    std::string line;
    std::getline(f, line);
    std::vector<MatrixRow> rows;
    while (std::getline(f, line)) {
      std::vector<std::string> cells;
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
      while (cells.size() < 9) cells.emplace_back();
      try {
        rows.push_back(row_from_csv(cells));
      } catch (const std::logic_error&) {
        throw DataError((dir / "results.csv").string() + ": malformed row '" + line + "'");
      }
    }
    write_text(dir / "results.svg", results_chart_svg(rows));
    write_text(dir / "results.txt", results_text(rows));
    charts.push_back(dir / "results.svg");
  }
  if (charts.empty()) throw DataError(dir.string() + " holds no metric CSVs or results table");
  for (const auto& c : charts) say(c.string());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fusion-transformer attention experiments on synthetic scenes. Default output root: $VEFUSE_OUT or ./vefuse_out"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  Common gen_c;
  bool cache = false;
  auto* gen = app.add_subcommand("generate", "write a seeded corpus (train/val/test JSONL + manifest)");
  add_common(gen, gen_c, "corpus directory (default <root>/corpus)");
  gen->add_flag("--cache", cache, "also write per-encoder token caches");

  Common mat_c;
  std::string mat_ves, mat_seeds, mat_corpus;
  bool resume = false;
  int workers = 0;
  std::size_t max_ves = 0;
  auto* mat = app.add_subcommand("train-matrix", "train every encoder combination over the seeds");
  add_common(mat, mat_c, "matrix directory (default <root>/matrix)");
  mat->add_option("--ves", mat_ves, "encoders to combine, e.g. region,grid");
  mat->add_option("--seeds", mat_seeds, "comma-separated seeds");
  mat->add_option("--corpus", mat_corpus, "corpus directory from 'generate'");
  mat->add_flag("--resume", resume, "skip cells whose manifest matches the config");
  mat->add_option("--workers", workers, "parallel cells");
  mat->add_option("--max-ves", max_ves, "skip combinations with more encoders than this");

  Common tr_c;
  std::string tr_ves, tr_corpus;
  std::uint64_t tr_seed = 1;
  auto* tr = app.add_subcommand("train", "train one encoder combination with one seed");
  add_common(tr, tr_c, "run directory (default <root>/runs)");
  tr->add_option("--ves", tr_ves, "encoders, e.g. region,grid");
  tr->add_option("--seed", tr_seed, "seed");
  tr->add_option("--corpus", tr_corpus, "corpus directory from 'generate'");

  Common an_c;
  AnalyzeArgs an_a;
  auto* an = app.add_subcommand("analyze", "attention metrics, drop evaluation and charts for a checkpoint");
  add_common(an, an_c, "bundle directory (default <root>/analysis)");
  an->add_option("--checkpoint", an_a.checkpoint, "checkpoint directory (holds model.json)")->required();
  an->add_option("--corpus", an_a.corpus, "corpus directory from 'generate'");
  an->add_option("--split", an_a.split, "train, val or test");
  an->add_option("--sample", an_a.sample, "examples to analyze (0 = all)");
  an->add_option("--layer", an_a.layer, "last or all")->check(CLI::IsMember({"last", "all"}));
  an->add_option("--drop-ve", an_a.drop, "none, first, second, both or an encoder name");
  an->add_option("--dump", an_a.dumps, "write attention dumps for the first N examples");

  std::string rep_in, rep_layer;
  auto* rep = app.add_subcommand("report", "redraw SVG charts from the CSVs in a bundle or matrix directory");
  rep->add_option("-i,--in", rep_in, "directory with metric CSVs or results.csv");
  rep->add_option("--layer", rep_layer, "layer label to draw (default: last)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_generate(gen_c, cache);
    if (*mat) return cmd_train_matrix(mat_c, mat_ves, mat_seeds, mat_corpus, resume, workers, max_ves);
    if (*tr) return cmd_train(tr_c, tr_ves, tr_seed, tr_corpus);
    if (*an) return cmd_analyze(an_c, an_a);
    if (*rep) return cmd_report(rep_in, rep_layer);
  } catch (const ConfigurationError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kConfig;
  } catch (const DimensionError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kConfig;
  } catch (const CompatibilityError& e) {
    std::cerr << "incompatible input: " << e.what() << '\n';
    return kIncompatible;
  } catch (const DataError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kMissing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInternal;
  }
  return kInternal;
}
