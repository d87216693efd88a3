#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrsearch/engine.hpp"
#include "attrsearch/trainer.hpp"

namespace attrsearch {

struct AblationConfig {
  std::vector<Variant> variants{kAllVariants.begin(), kAllVariants.end()};
  std::vector<std::size_t> ks{10, 20, 30};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  TrainConfig train;
  // When set, every trained checkpoint is written to <dir>/<variant>_seed<s>.ckpt.
  std::filesystem::path checkpoint_dir;
  std::function<void(const std::string&)> log;
  // Called with each seed's stage-1 result before the variants branch off.
  std::function<void(std::uint64_t, const TrainResult&)> on_stage1;
};

struct AblationCell {
  std::vector<double> values;  // one per seed, in seed order
  double mean = 0.0;
  double spread = 0.0;  // sample standard deviation, 0 for one seed
};

struct AblationTable {
  AttributeSchema schema;
  std::vector<Variant> variants;  // ladder order
  std::vector<std::size_t> ks;
  std::vector<std::uint64_t> seeds;
  // cells[variant][k][column]; columns are the attributes then "avg"
  std::map<Variant, std::vector<std::vector<AblationCell>>> cells;
  std::map<Variant, std::vector<EvalResult>> evaluations;  // per seed

  const AblationCell& average(Variant v, std::size_t k) const {
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (ks[i] == k) return cells.at(v)[i].back();
    throw ArgumentError("ablation table has no K=" + std::to_string(k));
  }

  std::string csv() const {
    std::ostringstream os;
    os << "variant,K";
    for (const auto& a : schema.attributes()) os << ',' << a.name << "_mean," << a.name << "_spread";
    os << ",avg_mean,avg_spread\n" << std::fixed << std::setprecision(6);
    for (Variant v : variants) {
      for (std::size_t i = 0; i < ks.size(); ++i) {
        os << to_string(v) << ',' << ks[i];
        for (const AblationCell& c : cells.at(v)[i]) os << ',' << c.mean << ',' << c.spread;
        os << '\n';
      }
    }
    return os.str();
  }

  std::string text(std::size_t k) const {
    std::ostringstream os;
    os << std::left << std::setw(8) << "variant";
    for (const auto& a : schema.attributes()) os << std::setw(18) << a.name;
    os << "avg\n" << std::fixed << std::setprecision(3);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      if (ks[i] != k) continue;
      for (Variant v : variants) {
        os << std::setw(8) << to_string(v);
        for (const AblationCell& c : cells.at(v)[i]) {
          std::ostringstream cell;
          cell << std::fixed << std::setprecision(3) << c.mean << "+-" << c.spread;
          os << std::setw(18) << cell.str();
        }
        os << '\n';
      }
    }
    return os.str();
  }
};

inline AblationCell summarize(std::vector<double> values) {
  AblationCell c;
  c.values = std::move(values);
  if (c.values.empty()) return c;
  double sum = 0.0;
  for (double v : c.values) sum += v;
  c.mean = sum / static_cast<double>(c.values.size());
  if (c.values.size() > 1) {
    double ss = 0.0;
    for (double v : c.values) ss += (v - c.mean) * (v - c.mean);
    c.spread = std::sqrt(ss / static_cast<double>(c.values.size() - 1));
  }
  return c;
}

/// Trains every (variant, seed), evaluates on the query split against the
/// gallery split, and aggregates per cell. Stage 1 is shared by all variants of
/// a seed and stage 2 by variants with the same stage-2 flags.
inline AblationTable ablation_run(const Dataset& data, const AblationConfig& cfg) {
  if (cfg.variants.empty()) throw ArgumentError("ablation: at least one variant required");
  if (cfg.seeds.empty()) throw ArgumentError("ablation: at least one seed required");
  AblationTable table;
  table.schema = data.schema();
  for (Variant v : kAllVariants)
    if (std::find(cfg.variants.begin(), cfg.variants.end(), v) != cfg.variants.end()) table.variants.push_back(v);
  table.ks = cfg.ks;
  std::sort(table.ks.begin(), table.ks.end());
  table.ks.erase(std::unique(table.ks.begin(), table.ks.end()), table.ks.end());
  table.seeds = cfg.seeds;
  const auto gallery = data.subset(data.split().gallery);
  const auto queries = data.subset(data.split().query);
  auto log = [&](const std::string& s) {
    if (cfg.log) cfg.log(s);
  };

  for (std::uint64_t seed : cfg.seeds) {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    Trainer trainer(data, tc);
    log("seed " + std::to_string(seed) + ": stage 1");
    const TrainResult s1 = trainer.stage1();
    if (cfg.on_stage1) cfg.on_stage1(seed, s1);
    std::map<int, TrainResult> stage2_cache;
    for (Variant v : table.variants) {
      const int key = Trainer::stage2_key(VariantConfig::of(v));
      auto it = stage2_cache.find(key);
      if (it == stage2_cache.end()) {
        log("seed " + std::to_string(seed) + ": stage 2 for " + to_string(v));
        it = stage2_cache.emplace(key, trainer.stage2(s1, v)).first;
      }
      log("seed " + std::to_string(seed) + ": stage 3 for " + to_string(v));
      const TrainResult done = trainer.stage3(it->second, v);
      if (!cfg.checkpoint_dir.empty()) {
        done.model.save(cfg.checkpoint_dir / (to_string(v) + "_seed" + std::to_string(seed) + ".ckpt"));
      }
      const GalleryIndex index = index_gallery(done.model, gallery);
      table.evaluations[v].push_back(evaluate(index, done.model, queries, table.ks));
      log(to_string(v) + " seed " + std::to_string(seed) + ": avg@" + std::to_string(table.ks.front()) + " = " +
          std::to_string(table.evaluations[v].back().average.front()));
    }
  }

  const std::size_t A = table.schema.attribute_count();
  for (Variant v : table.variants) {
    auto& rows = table.cells[v];
    for (std::size_t i = 0; i < table.ks.size(); ++i) {
      std::vector<AblationCell> row;
      for (std::size_t col = 0; col <= A; ++col) {
        std::vector<double> vals;
        for (const EvalResult& e : table.evaluations[v]) vals.push_back(col < A ? e.accuracy[i][col] : e.average[i]);
        row.push_back(summarize(vals));
      }
      rows.push_back(row);
    }
  }
  return table;
}

}  // namespace attrsearch
