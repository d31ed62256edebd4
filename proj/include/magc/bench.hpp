// SPDX-License-Identifier: Apache-2.0
//
// Strategy sweeps over (L, S) producing one record per (strategy, L, S, seed).

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "magc/engine.hpp"
#include "magc/ledger.hpp"
#include "magc/model.hpp"
#include "magc/planner.hpp"
#include "magc/trainer.hpp"

namespace magc {

struct BenchRecord {
  StrategyKind strategy = StrategyKind::gc_off;
  std::size_t layers = 0;
  std::size_t seq = 0;
  std::optional<std::size_t> l;
  std::optional<std::size_t> s;
  std::optional<std::uint64_t> peak_units;
  std::optional<double> predicted_units;
  std::optional<std::uint64_t> overhead_units;
  std::optional<std::uint64_t> step_evals;
  std::optional<double> wall_ms;
  std::uint64_t seed = 0;
  bool budget_exceeded = false;
};

struct BenchOptions {
  std::vector<std::size_t> layers{8};
  std::size_t dim = 16;
  std::size_t heads = 2;
  std::size_t state = 4;
  unsigned seq_min_pow = 8;
  unsigned seq_max_pow = 10;
  std::vector<StrategyKind> strategies{StrategyKind::gc_off, StrategyKind::gc_on,
                                       StrategyKind::sqrt_gc, StrategyKind::magc};
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> budget_units;
  std::size_t granularity = 1;
  bool paper_faithful = false;
  std::size_t repeats = 1;  // wall time is the median over repeats
};

inline const char* kBenchCsvHeader =
    "strategy,L,S,l,s,peak_units,predicted_units,overhead_units,step_evals,wall_ms,seed";

/// Granularity used for a sequence of length S under the given options.
inline std::size_t effective_granularity(const BenchOptions& o, std::size_t seq) {
  if (o.paper_faithful && seq >= kPaperGranularity) return kPaperGranularity;
  return std::min(o.granularity, seq);
}

template <typename T>
BenchRecord bench_one(const Model<T>& model, const Tensor<T>& x, const Tensor<T>& target,
                      StrategyKind kind, const BenchOptions& o) {
  const std::size_t L = model.num_layers(), S = x.extent(0);
  BenchRecord rec;
  rec.strategy = kind;
  rec.layers = L;
  rec.seq = S;
  rec.seed = o.seed;

  Strategy strategy{kind, std::nullopt};
  if (kind == StrategyKind::magc) {
    const std::size_t g = effective_granularity(o, S);
    const auto report = optimal_plan(L, S, engine_constants(model.config, sizeof(T)), g);
    strategy.plan = CheckpointPlan{report.l_star, report.s_star, g};
    rec.predicted_units = report.predicted_units;
  }
  if (auto plan = strategy.grid_plan(L, S)) {
    rec.l = plan->l;
    rec.s = plan->s;
  }

  std::vector<double> times;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, o.repeats); ++r) {
    ActivationLedger ledger(o.budget_units);
    try {
      auto res = run_strategy(model, x, target, strategy, ledger);
      if (r == 0) {
        rec.peak_units = res.metrics.peak_units;
        rec.overhead_units = res.metrics.overhead_units;
        rec.step_evals = res.metrics.step_evals;
      }
      times.push_back(res.metrics.wall_ms);
    } catch (const BudgetExceeded&) {
      rec.budget_exceeded = true;
      rec.peak_units.reset();
      rec.overhead_units.reset();
      rec.step_evals.reset();
      return rec;
    }
  }
  std::sort(times.begin(), times.end());
  rec.wall_ms = times[times.size() / 2];
  return rec;
}

/// Records ordered by (strategy as listed, L, S).
template <typename T>
std::vector<BenchRecord> run_bench(const BenchOptions& o) {
  if (o.seq_min_pow > o.seq_max_pow || o.seq_max_pow > 30) {
    throw ContractError("bench: invalid sequence power range");
  }
  std::vector<BenchRecord> out;
  std::vector<std::vector<BenchRecord>> by_strategy(o.strategies.size());
  for (std::size_t L : o.layers) {
    auto cfg = ModelConfig::make(L, o.dim, o.heads, o.state);
    const auto model = Model<T>::create(cfg, o.seed);
    for (unsigned p = o.seq_min_pow; p <= o.seq_max_pow; ++p) {
      const std::size_t S = std::size_t{1} << p;
      const auto data = gen_task<T>({TaskKind::delayed_copy, S, o.dim, 1, o.seed});
      for (std::size_t k = 0; k < o.strategies.size(); ++k) {
        by_strategy[k].push_back(bench_one(model, data.x, data.target, o.strategies[k], o));
      }
    }
  }
  for (auto& v : by_strategy) out.insert(out.end(), v.begin(), v.end());
  return out;
}

namespace detail {
template <typename V>
std::string fmt_opt(const std::optional<V>& v, bool exceeded) {
  if (exceeded) return "-";
  if (!v) return "null";
  if constexpr (std::is_floating_point_v<V>) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return buf;
  } else {
    return std::to_string(*v);
  }
}
}  // namespace detail

/// Budget-exceeded runs carry "-" in the measured columns; fields that do
/// not apply to a strategy are "null".
inline void write_bench_csv(std::ostream& os, const std::vector<BenchRecord>& recs) {
  os << kBenchCsvHeader << '\n';
  for (const auto& r : recs) {
    const bool ex = r.budget_exceeded;
    os << strategy_name(r.strategy) << ',' << r.layers << ',' << r.seq << ','
       << detail::fmt_opt(r.l, false) << ',' << detail::fmt_opt(r.s, false) << ','
       << detail::fmt_opt(r.peak_units, ex) << ',' << detail::fmt_opt(r.predicted_units, false)
       << ',' << detail::fmt_opt(r.overhead_units, ex) << ','
       << detail::fmt_opt(r.step_evals, ex) << ',' << detail::fmt_opt(r.wall_ms, ex) << ','
       << r.seed << '\n';
  }
}

/// Two-column "S overhead" blocks, one per (strategy, L), separated by blank lines.
inline void write_plot_data(std::ostream& os, const std::vector<BenchRecord>& recs) {
  std::string current;
  for (const auto& r : recs) {
    const std::string key =
        std::string(strategy_name(r.strategy)) + " L=" + std::to_string(r.layers);
    if (key != current) {
      if (!current.empty()) os << "\n\n";
      os << "# " << key << '\n';
      current = key;
    }
    if (!r.budget_exceeded && r.overhead_units) os << r.seq << ' ' << *r.overhead_units << '\n';
  }
}

}  // namespace magc
