// SPDX-License-Identifier: Apache-2.0
//
// Multi-axis gradient checkpointing over the (layer, time) grid.
//
// Forward stores two checkpoint families:
//   L_ckpt[(i, j)]  input block to the bottom layer of layer-block j over
//                   sequence block i (j >= 1; j = 0 reads the input sequence)
//   S_ckpt[(i, j)]  state of every layer in layer-block j at the left time
//                   boundary of sequence block i (i >= 1; i = 0 is zero)
// Backward visits sequence blocks last-to-first and layer blocks top-down,
// restoring one grid cell at a time from those seeds and carrying a gradient
// frontier (grad_x down the layers, grad_h back in time per layer).
//
// Indices are zero-based throughout: cell (i, j) covers steps
// [i*s, min((i+1)*s, S)) and layers [j*l, min((j+1)*l, L)).

#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "magc/ledger.hpp"
#include "magc/model.hpp"
#include "magc/ssd.hpp"
#include "magc/tensor.hpp"

namespace magc {

inline constexpr std::size_t kPaperGranularity = 256;

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

inline std::size_t ceil_sqrt(std::size_t n) {
  auto r = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
  while (r * r > n) --r;
  while (r * r < n) ++r;
  return r;
}

struct CheckpointPlan {
  std::size_t l = 1;
  std::size_t s = 1;
  std::size_t granularity = 1;

  /// With `paper_faithful`, sequences of 256+ steps require s to be a multiple of 256.
  void validate(std::size_t layers, std::size_t seq, bool paper_faithful = false) const {
    if (l < 1 || l > layers) {
      throw ContractError("plan: layer interval " + std::to_string(l) + " outside [1, " +
                          std::to_string(layers) + "]");
    }
    if (s < 1 || s > seq) {
      throw ContractError("plan: sequence interval " + std::to_string(s) + " outside [1, " +
                          std::to_string(seq) + "]");
    }
    if (granularity < 1 || s % granularity != 0) {
      throw ContractError("plan: granularity " + std::to_string(granularity) +
                          " does not divide s = " + std::to_string(s));
    }
    if (paper_faithful && seq >= kPaperGranularity && granularity != kPaperGranularity) {
      throw ContractError("plan: paper-faithful mode requires granularity 256 for S >= 256");
    }
  }

  friend bool operator==(const CheckpointPlan&, const CheckpointPlan&) = default;
};

struct GridGeometry {
  std::size_t layers = 1;
  std::size_t seq = 1;
  std::size_t l = 1;
  std::size_t s = 1;

  std::size_t seq_blocks() const { return ceil_div(seq, s); }
  std::size_t layer_blocks() const { return ceil_div(layers, l); }
  std::size_t step_begin(std::size_t i) const { return i * s; }
  std::size_t step_end(std::size_t i) const { return std::min(seq, (i + 1) * s); }
  std::size_t layer_begin(std::size_t j) const { return j * l; }
  std::size_t layer_end(std::size_t j) const { return std::min(layers, (j + 1) * l); }
};

/// (sequence block, layer block), zero-based.
using CellIndex = std::pair<std::size_t, std::size_t>;

template <typename T>
struct GridStore {
  GridGeometry geom;
  std::map<CellIndex, Charged<Tensor<T>>> l_ckpt;  // (steps in block, d)
  std::map<CellIndex, Charged<Tensor<T>>> s_ckpt;  // (layers in block, H, N, P)
  Charged<Tensor<T>> input_seq;                    // implicit layer-0 checkpoint

  std::size_t l_ckpt_positions() const {
    std::size_t n = 0;
    for (const auto& [k, v] : l_ckpt) n += v.value.extent(0);
    return n;
  }
  std::size_t s_ckpt_states() const {
    std::size_t n = 0;
    for (const auto& [k, v] : s_ckpt) n += v.value.extent(0);
    return n;
  }
};

struct StepEvalCounter {
  std::uint64_t forward_evals = 0;
  std::uint64_t recompute_evals = 0;
  std::uint64_t total() const { return forward_evals + recompute_evals; }
};

template <typename T>
struct CheckpointedForward {
  Charged<Tensor<T>> y_seq;  // charged as io
  std::vector<LayerState<T>> final_states;
  GridStore<T> grids;
};

template <typename T>
CheckpointedForward<T> forward_checkpointed(const Model<T>& m, const Tensor<T>& x_seq,
                                            const CheckpointPlan& plan,
                                            ActivationLedger* ledger = nullptr,
                                            StepEvalCounter* counter = nullptr) {
  check_sequence(m, x_seq);
  const std::size_t L = m.num_layers(), S = x_seq.extent(0), d = m.config.dim;
  plan.validate(L, S);
  const auto& cfg = m.config;

  CheckpointedForward<T> out;
  GridStore<T>& store = out.grids;
  store.geom = GridGeometry{L, S, plan.l, plan.s};
  const GridGeometry& g = store.geom;
  store.input_seq = charged(ledger, Tag::l_ckpt, x_seq);
  out.y_seq = charged(ledger, Tag::io, Tensor<T>({S, d}));

  std::vector<LayerState<T>> states(L, zero_state<T>(cfg));
  ScopedCharge states_charge(ledger, Tag::frontier, L * cfg.state_size() * sizeof(T));

  for (std::size_t i = 0; i < g.seq_blocks(); ++i) {
    const std::size_t b0 = g.step_begin(i), b1 = g.step_end(i);
    Charged<Tensor<T>> x = charged(ledger, Tag::frontier, x_seq.rows(b0, b1));
    for (std::size_t j = 0; j < g.layer_blocks(); ++j) {
      const std::size_t l0 = g.layer_begin(j), l1 = g.layer_end(j);
      if (j > 0) store.l_ckpt.emplace(CellIndex{i, j}, charged(ledger, Tag::l_ckpt, x.value));
      if (i > 0) {
        Tensor<T> snap({l1 - l0, cfg.heads, cfg.state_dim, cfg.head_dim});
        for (std::size_t k = l0; k < l1; ++k) {
          std::copy(states[k].flat().begin(), states[k].flat().end(), snap.row(k - l0).begin());
        }
        store.s_ckpt.emplace(CellIndex{i, j}, charged(ledger, Tag::s_ckpt, std::move(snap)));
      }
      for (std::size_t k = l0; k < l1; ++k) {
        auto r = chunk_forward(m.layers[k], x.value, states[k], false);
        states[k] = std::move(r.h_out);
        x = charged(ledger, Tag::frontier, std::move(r.y));
        if (counter) counter->forward_evals += b1 - b0;
      }
    }
    out.y_seq.value.set_rows(b0, x.value);
  }
  out.final_states = std::move(states);
  return out;
}

template <typename T>
struct CellCache {
  CellIndex cell;
  std::size_t first_layer = 0;
  std::vector<Charged<LayerCache<T>>> layers;
};

/// Re-runs the forward of one grid cell with internals retained.
template <typename T>
CellCache<T> recompute_cell(const Model<T>& m, const GridStore<T>& grids, CellIndex cell,
                            StepEvalCounter* counter = nullptr,
                            ActivationLedger* ledger = nullptr) {
  const GridGeometry& g = grids.geom;
  const auto [i, j] = cell;
  if (i >= g.seq_blocks() || j >= g.layer_blocks()) {
    throw ContractError("recompute_cell: cell (" + std::to_string(i) + ", " + std::to_string(j) +
                        ") outside grid");
  }
  const std::size_t b0 = g.step_begin(i), b1 = g.step_end(i);
  const std::size_t l0 = g.layer_begin(j), l1 = g.layer_end(j);

  Charged<Tensor<T>> x;
  if (j == 0) {
    x = charged(ledger, Tag::frontier, grids.input_seq.value.rows(b0, b1));
  } else {
    auto it = grids.l_ckpt.find(cell);
    if (it == grids.l_ckpt.end()) {
      throw ContractError("recompute_cell: missing layer checkpoint for cell (" +
                          std::to_string(i) + ", " + std::to_string(j) + ")");
    }
    x = charged(ledger, Tag::frontier, it->second.value);
  }
  const Tensor<T>* seeds = nullptr;
  if (i > 0) {
    auto it = grids.s_ckpt.find(cell);
    if (it == grids.s_ckpt.end()) {
      throw ContractError("recompute_cell: missing state checkpoint for cell (" +
                          std::to_string(i) + ", " + std::to_string(j) + ")");
    }
    seeds = &it->second.value;
  }

  CellCache<T> out{cell, l0, {}};
  out.layers.reserve(l1 - l0);
  for (std::size_t k = l0; k < l1; ++k) {
    LayerState<T> h = zero_state<T>(m.config);
    if (seeds) {
      auto src = seeds->row(k - l0);
      std::copy(src.begin(), src.end(), h.flat().begin());
    }
    auto r = chunk_forward(m.layers[k], x.value, h, true);
    out.layers.push_back(charged(ledger, Tag::cell_cache, std::move(*r.cache)));
    if (k + 1 < l1) x = charged(ledger, Tag::frontier, std::move(r.y));
    if (counter) counter->recompute_evals += b1 - b0;
  }
  return out;
}

/// Grid-cell restoration backward. Consumes the store; checkpoints of a
/// sequence block are released once that block row has been processed.
template <typename T>
GradientBundle<T> backward_grid(const Model<T>& m, GridStore<T>&& grids,
                                const Tensor<T>& grad_y_seq,
                                const std::vector<LayerState<T>>& grad_state,
                                const CheckpointPlan& plan, ActivationLedger* ledger = nullptr,
                                StepEvalCounter* counter = nullptr) {
  const GridGeometry g = grids.geom;
  if (plan.l != g.l || plan.s != g.s) {
    throw ContractError("backward_grid: plan (" + std::to_string(plan.l) + ", " +
                        std::to_string(plan.s) + ") does not match checkpoint grid (" +
                        std::to_string(g.l) + ", " + std::to_string(g.s) + ")");
  }
  const std::size_t L = m.num_layers(), S = g.seq, d = m.config.dim;
  if (g.layers != L) throw ContractError("backward_grid: grid built for a different model");
  require_shape(grad_y_seq, {S, d}, "backward_grid grad_y_seq");
  if (grad_state.size() != L) throw ContractError("backward_grid: need one state gradient per layer");

  auto bundle = GradientBundle<T>::zeros(m.config, S);
  std::vector<LayerState<T>> grad_h = grad_state;
  for (const auto& gs : grad_h) require_shape(gs, m.config.state_shape(), "backward_grid grad_state");
  ScopedCharge grad_h_charge(ledger, Tag::frontier, L * m.config.state_size() * sizeof(T));

  for (std::size_t i = g.seq_blocks(); i-- > 0;) {
    const std::size_t b0 = g.step_begin(i), b1 = g.step_end(i);
    Charged<Tensor<T>> gx = charged(ledger, Tag::frontier, grad_y_seq.rows(b0, b1));
    for (std::size_t j = g.layer_blocks(); j-- > 0;) {
      CellCache<T> cell = recompute_cell(m, grids, CellIndex{i, j}, counter, ledger);
      for (std::size_t k = g.layer_end(j); k-- > g.layer_begin(j);) {
        auto& slot = cell.layers[k - cell.first_layer];
        auto r = chunk_backward(m.layers[k], slot.value, gx.value, grad_h[k], bundle.layers[k],
                                ledger, Tag::cell_cache);
        slot = {};
        grad_h[k] = std::move(r.grad_h_in);
        gx = charged(ledger, Tag::frontier, std::move(r.grad_x));
      }
    }
    bundle.grad_input.set_rows(b0, gx.value);
    for (std::size_t j = 0; j < g.layer_blocks(); ++j) {
      grids.l_ckpt.erase(CellIndex{i, j});
      grids.s_ckpt.erase(CellIndex{i, j});
    }
  }
  grids.input_seq = {};
  return bundle;
}

// ---------------------------------------------------------------------------
// Strategies

enum class StrategyKind { gc_off, gc_on, sqrt_gc, magc };

inline constexpr std::string_view strategy_name(StrategyKind k) {
  switch (k) {
    case StrategyKind::gc_off: return "gc_off";
    case StrategyKind::gc_on: return "gc_on";
    case StrategyKind::sqrt_gc: return "sqrt_gc";
    case StrategyKind::magc: return "magc";
  }
  return "?";
}

inline StrategyKind parse_strategy_kind(std::string_view name) {
  for (auto k : {StrategyKind::gc_off, StrategyKind::gc_on, StrategyKind::sqrt_gc,
                 StrategyKind::magc}) {
    if (name == strategy_name(k)) return k;
  }
  throw ContractError("unknown strategy '" + std::string(name) +
                      "' (expected gc_off, gc_on, sqrt_gc or magc)");
}

struct Strategy {
  StrategyKind kind = StrategyKind::gc_off;
  std::optional<CheckpointPlan> plan;  // required iff kind == magc

  static Strategy gc_off() { return {StrategyKind::gc_off, std::nullopt}; }
  static Strategy gc_on() { return {StrategyKind::gc_on, std::nullopt}; }
  static Strategy sqrt_gc() { return {StrategyKind::sqrt_gc, std::nullopt}; }
  static Strategy magc(CheckpointPlan p) { return {StrategyKind::magc, p}; }

  std::string_view name() const { return strategy_name(kind); }

  /// Grid plan that realizes this strategy; gc_off has none.
  /// gc_on checkpoints every layer input, sqrt_gc every ceil(sqrt(L)) layers;
  /// both keep the whole sequence as one block.
  std::optional<CheckpointPlan> grid_plan(std::size_t layers, std::size_t seq) const {
    switch (kind) {
      case StrategyKind::gc_off: return std::nullopt;
      case StrategyKind::gc_on: return CheckpointPlan{1, seq, 1};
      case StrategyKind::sqrt_gc: return CheckpointPlan{ceil_sqrt(layers), seq, 1};
      case StrategyKind::magc:
        if (!plan) throw ContractError("magc strategy requires a checkpoint plan");
        return plan;
    }
    return std::nullopt;
  }
};

struct RunMetrics {
  std::uint64_t baseline_units = 0;
  std::uint64_t peak_units = 0;
  std::uint64_t overhead_units = 0;
  std::uint64_t step_evals = 0;
  double wall_ms = 0.0;
  bool leak = false;
};

template <typename T>
struct RunResult {
  T loss{};
  GradientBundle<T> grads;
  RunMetrics metrics;
};

/// Forward + MSE loss + backward under one strategy, measured on `ledger`.
/// Final-state gradients are zero (the loss reads outputs only).
template <typename T>
RunResult<T> run_strategy(const Model<T>& m, const Tensor<T>& x_seq, const Tensor<T>& target_seq,
                          const Strategy& strategy, ActivationLedger& ledger) {
  check_sequence(m, x_seq);
  const std::size_t L = m.num_layers(), S = x_seq.extent(0);
  require_shape(target_seq, x_seq.shape(), "run_strategy target");
  const auto plan = strategy.grid_plan(L, S);
  if (plan) plan->validate(L, S);

  RunResult<T> out;
  StepEvalCounter counter;
  const std::vector<LayerState<T>> zero_grad_state(L, zero_state<T>(m.config));

  const Measurement meas = measure(ledger, [&] {
    const auto t0 = std::chrono::steady_clock::now();
    if (!plan) {
      auto fwd = model_forward_full(m, x_seq, &ledger, &counter.forward_evals);
      auto lr = loss_mse(fwd.y_seq.value, target_seq);
      fwd.y_seq = {};  // the loss gradient takes over the output buffer
      auto grad_y = charged(&ledger, Tag::io, std::move(lr.grad));
      out.loss = lr.loss;
      out.grads = model_backward_full(m, std::move(fwd.cache), grad_y.value, zero_grad_state,
                                      &ledger);
    } else {
      auto fwd = forward_checkpointed(m, x_seq, *plan, &ledger, &counter);
      auto lr = loss_mse(fwd.y_seq.value, target_seq);
      fwd.y_seq = {};  // the loss gradient takes over the output buffer
      auto grad_y = charged(&ledger, Tag::io, std::move(lr.grad));
      out.loss = lr.loss;
      out.grads = backward_grid(m, std::move(fwd.grids), grad_y.value, zero_grad_state, *plan,
                                &ledger, &counter);
    }
    const auto t1 = std::chrono::steady_clock::now();
    out.metrics.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  });

  out.metrics.baseline_units = meas.baseline_units;
  out.metrics.peak_units = meas.peak_units;
  out.metrics.overhead_units = meas.overhead_units;
  out.metrics.leak = meas.leak;
  out.metrics.step_evals = counter.total();
  return out;
}

}  // namespace magc
