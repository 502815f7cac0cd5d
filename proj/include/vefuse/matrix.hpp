#pragma once

// Experiment matrix: every encoder combination x seed, one directory per cell with a
// manifest, resumable, summarized as a mean/std table.

#include <algorithm>
#include <atomic>
#include <bit>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "vefuse/analysis.hpp"
#include "vefuse/config.hpp"
#include "vefuse/training.hpp"

namespace vefuse {

/// Non-empty subsets of `ves` in canonical order: singles, then pairs, then the triple, each
/// in encoder order (region, grid, patch).
inline std::vector<std::vector<VEKind>> combinations(const std::vector<VEKind>& ves) {
  std::vector<VEKind> sorted = ves;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::vector<VEKind>> out;
  const std::size_t n = sorted.size();
  for (std::size_t size = 1; size <= n; ++size)
    for (unsigned mask = 1; mask < (1u << n); ++mask) {
      if (static_cast<std::size_t>(std::popcount(mask)) != size) continue;
      std::vector<VEKind> c;
      for (std::size_t i = 0; i < n; ++i)
        if (mask & (1u << i)) c.push_back(sorted[i]);
      out.push_back(std::move(c));
    }
  // Within a size, keep lexicographic order by encoder index.
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.size() != b.size()) return a.size() < b.size();
    return a < b;
  });
  return out;
}

inline std::string combo_name(const std::vector<VEKind>& ves) { return join_ves(ves, '+'); }

inline std::filesystem::path cell_dir(const std::filesystem::path& out, const std::vector<VEKind>& ves, std::uint64_t seed) {
  return out / combo_name(ves) / ("seed" + std::to_string(seed));
}

/// Hash of everything that determines a cell's result except its seed.
inline std::uint64_t cell_hash(const ExperimentConfig& base, const std::vector<VEKind>& ves) {
  ExperimentConfig c = base;
  c.ves = ves;
  return config_hash(c);
}

struct CellResult {
  std::vector<VEKind> ves;
  std::uint64_t seed = 0;
  bool ok = false;
  bool resumed = false;
  std::string error;
  nlohmann::json manifest;

  double accuracy() const { return manifest.at("test").at("accuracy"); }
  std::optional<double> r1() const {
    const auto& t = manifest.at("test");
    if (!t.contains("recall_at_1")) return std::nullopt;
    return t.at("recall_at_1").get<double>();
  }
};

struct MatrixRow {
  std::vector<VEKind> ves;
  std::size_t ok = 0;
  std::size_t failed = 0;
  SeedStats accuracy;
  std::optional<SeedStats> r1;
};

struct MatrixResult {
  std::vector<CellResult> cells;
  std::vector<MatrixRow> rows;
  std::size_t trained = 0;
  std::size_t resumed = 0;
};

inline std::optional<nlohmann::json> read_cell_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) return std::nullopt;
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;  // a torn manifest means the cell is redone
  }
}

struct MatrixOptions {
  bool resume = false;
  bool save_checkpoints = true;
  std::size_t max_size = 0;  // largest combination to train; 0 = all
  std::function<void(const std::string&)> log;
};

/// Trains one cell and writes its manifest (and checkpoint). Never throws for training
/// failures; they are recorded in the manifest with status "failed".
inline CellResult run_cell(const ExperimentConfig& cfg, const std::vector<VEKind>& ves, std::uint64_t seed,
                           const Dataset& data, const MatrixOptions& mo) {
  CellResult r{ves, seed, false, false, {}, {}};
  const auto dir = cfg.out_dir.empty() ? std::filesystem::path() : cell_dir(cfg.out_dir, ves, seed);
  const std::string hash = hex64(cell_hash(cfg, ves));
  nlohmann::json m = {{"format", "vefuse-cell"}, {"combo", combo_name(ves)}, {"seed", seed}, {"config_hash", hash},
                      {"task", task_name(cfg.task)}};
  try {
    auto [model, res] = train_model(cfg, ves, seed, data);
    m["status"] = "ok";
    m["best_epoch"] = res.best_epoch;
    m["validation"] = metrics_json(res.best_val);
    m["test"] = metrics_json(res.test);
    m["epoch_loss"] = res.epoch_loss;
    m["epoch_val"] = res.epoch_val;
    m["steps"] = res.steps;
    m["seconds"] = res.seconds;
    m["truncations"] = res.truncations;
    if (!dir.empty() && mo.save_checkpoints) {
      save_checkpoint(model, dir / "checkpoint", {{"seed", seed}, {"config_hash", hash}});
      m["checkpoint"] = (dir / "checkpoint").string();
    }
    r.ok = true;
  } catch (const std::exception& e) {
    m["status"] = "failed";
    m["error"] = e.what();
    r.error = e.what();
  }
  if (!dir.empty()) {
    std::filesystem::create_directories(dir);
    ExperimentConfig own = cfg;
    own.ves = ves;
    own.seeds = {seed};
    std::ofstream(dir / "config.txt") << config_text(own);
    // Write then rename so an interrupted run never leaves a manifest that looks complete.
    const auto tmp = dir / "manifest.json.tmp";
    std::ofstream(tmp) << m.dump(2) << '\n';
    std::filesystem::rename(tmp, dir / "manifest.json");
  }
  r.manifest = std::move(m);
  return r;
}

inline std::vector<MatrixRow> summarize(const std::vector<CellResult>& cells,
                                        const std::vector<std::vector<VEKind>>& combos) {
  std::vector<MatrixRow> rows;
  for (const auto& ves : combos) {
    MatrixRow row;
    row.ves = ves;
    std::vector<double> acc, r1;
    for (const auto& c : cells) {
      if (c.ves != ves) continue;
      if (!c.ok) {
        ++row.failed;
        continue;
      }
      ++row.ok;
      acc.push_back(c.accuracy());
      if (auto v = c.r1()) r1.push_back(*v);
    }
    row.accuracy = aggregate(acc);
    if (!r1.empty()) row.r1 = aggregate(r1);
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Runs (or resumes) every combination of cfg.ves over cfg.seeds.
inline MatrixResult run_matrix(const ExperimentConfig& cfg, const VisionEncoders& enc, const MatrixOptions& mo = {}) {
  validate(cfg);
  auto combos = combinations(cfg.ves);
  if (mo.max_size) std::erase_if(combos, [&](const auto& c) { return c.size() > mo.max_size; });
  struct Job {
    std::vector<VEKind> ves;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& c : combos)
    for (auto s : cfg.seeds) jobs.push_back({c, s});

  MatrixResult result;
  result.cells.resize(jobs.size());
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (mo.resume && !cfg.out_dir.empty()) {
      const auto m = read_cell_manifest(cell_dir(cfg.out_dir, jobs[i].ves, jobs[i].seed));
      if (m && m->value("status", "") == "ok" && m->value("config_hash", "") == hex64(cell_hash(cfg, jobs[i].ves))) {
        result.cells[i] = {jobs[i].ves, jobs[i].seed, true, true, {}, *m};
        ++result.resumed;
        continue;
      }
    }
    todo.push_back(i);
  }

  if (!todo.empty()) {
    const Dataset data = load_dataset(cfg, enc, cfg.ves);
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
      for (std::size_t k; (k = next++) < todo.size();) {
        const Job& j = jobs[todo[k]];
        result.cells[todo[k]] = run_cell(cfg, j.ves, j.seed, data, mo);
        if (mo.log) {
          const auto& c = result.cells[todo[k]];
          std::lock_guard<std::mutex> lock(log_mutex);
          std::ostringstream o;
          o << combo_name(j.ves) << " seed " << j.seed << ": ";
          if (c.ok)
            o << "test accuracy " << std::fixed << std::setprecision(4) << c.accuracy();
          else
            o << "FAILED (" << c.error << ")";
          mo.log(o.str());
        }
      }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), todo.size()));
    std::vector<std::thread> threads;
    for (std::size_t t = 1; t < n; ++t) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
    result.trained = todo.size();
  }
  result.rows = summarize(result.cells, combos);
  return result;
}

// ---------------------------------------------------------------------------
// Results table

inline void write_results_csv(const std::vector<MatrixRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "combo,num_ves,seeds_ok,seeds_failed,accuracy_mean,accuracy_std,r1_mean,r1_std,status\n";
  for (const auto& r : rows) {
    out << combo_name(r.ves) << ',' << r.ves.size() << ',' << r.ok << ',' << r.failed << ',';
    if (r.ok)
      out << format_double(r.accuracy.mean) << ',' << format_double(r.accuracy.std);
    else
      out << ',';
    out << ',';
    if (r.r1) out << format_double(r.r1->mean) << ',' << format_double(r.r1->std);
    else out << ',';
    out << ',' << (r.failed == 0 ? "ok" : (r.ok ? "partial" : "failed")) << '\n';
  }
}

/// Aligned text version, percentages with mean +- std.
inline std::string results_text(const std::vector<MatrixRow>& rows) {
  const bool any_r1 = std::any_of(rows.begin(), rows.end(), [](const MatrixRow& r) { return r.r1.has_value(); });
  std::size_t w = 5;
  for (const auto& r : rows) w = std::max(w, combo_name(r.ves).size());
  auto pct = [](const SeedStats& s) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(2) << 100.0 * s.mean << " +- " << std::setprecision(2) << 100.0 * s.std;
    return o.str();
  };
  std::ostringstream o;
  o << std::left << std::setw(static_cast<int>(w)) << "combo" << "  " << std::setw(5) << "seeds" << "  " << std::setw(16)
    << "accuracy";
  if (any_r1) o << "  " << std::setw(16) << "R@1";
  o << "  status\n";
  for (const auto& r : rows) {
    o << std::setw(static_cast<int>(w)) << combo_name(r.ves) << "  " << std::setw(5) << r.ok << "  " << std::setw(16)
      << (r.ok ? pct(r.accuracy) : "-");
    if (any_r1) o << "  " << std::setw(16) << (r.r1 ? pct(*r.r1) : "-");
    o << "  " << (r.failed == 0 ? "ok" : (r.ok ? "partial" : "failed")) << '\n';
  }
  return o.str();
}

}  // namespace vefuse
