// SPDX-License-Identifier: Apache-2.0
//
// Synthetic sequence tasks, first-order optimizers, a training loop driven by
// any checkpointing strategy, and a central-difference gradient check.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "magc/engine.hpp"
#include "magc/ledger.hpp"
#include "magc/model.hpp"
#include "magc/planner.hpp"
#include "magc/ssd.hpp"

namespace magc {

enum class TaskKind { delayed_copy, decay_sum };

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "delayed_copy") return TaskKind::delayed_copy;
  if (s == "decay_sum") return TaskKind::decay_sum;
  throw ContractError("unknown task '" + std::string(s) + "' (expected delayed_copy or decay_sum)");
}

inline constexpr double kDecayRate = 0.9;

struct TaskSpec {
  TaskKind kind = TaskKind::decay_sum;
  std::size_t seq = 16;
  std::size_t dim = 4;
  std::size_t delay = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (seq < 1 || dim < 1) throw ContractError("task: seq and dim must be >= 1");
    if (kind == TaskKind::delayed_copy && delay >= seq) {
      throw ContractError("task: delay must be < seq");
    }
  }
};

template <typename T>
struct TaskData {
  Tensor<T> x;
  Tensor<T> target;
};

/// delayed_copy: x ~ N(0, 1), target_t = x_{t - delay} (zero before the delay).
/// decay_sum:    x ~ U[0, 1), target_t = sum_{k <= t} 0.9^(t - k) x_k.
template <typename T>
Tensor<T> task_target(TaskKind kind, const Tensor<T>& x, std::size_t delay) {
  const std::size_t S = x.extent(0), d = x.extent(1);
  Tensor<T> target({S, d});
  if (kind == TaskKind::delayed_copy) {
    for (std::size_t t = delay; t < S; ++t) {
      std::copy(x.row(t - delay).begin(), x.row(t - delay).end(), target.row(t).begin());
    }
  } else {
    std::vector<T> acc(d, T{0});
    for (std::size_t t = 0; t < S; ++t) {
      for (std::size_t q = 0; q < d; ++q) {
        acc[q] = static_cast<T>(kDecayRate) * acc[q] + x(t, q);
        target(t, q) = acc[q];
      }
    }
  }
  return target;
}

template <typename T>
TaskData<T> gen_task(const TaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  Tensor<T> x({spec.seq, spec.dim});
  if (spec.kind == TaskKind::delayed_copy) {
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : x.flat()) v = static_cast<T>(dist(rng));
  } else {
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    for (auto& v : x.flat()) v = static_cast<T>(dist(rng));
  }
  auto target = task_target(spec.kind, x, spec.delay);
  return {std::move(x), std::move(target)};
}

// ---------------------------------------------------------------------------
// Optimizers

template <typename T>
void check_congruent(const std::vector<SSDLayerParams<T>>& a, const std::vector<LayerGrads<T>>& b) {
  if (a.size() != b.size()) throw ContractError("optimizer: layer count mismatch");
  for (std::size_t j = 0; j < a.size(); ++j) {
    auto ta = a[j].tensors();
    auto tb = b[j].tensors();
    for (std::size_t k = 0; k < ta.size(); ++k) {
      if (ta[k].get().shape() != tb[k].get().shape()) {
        throw ContractError("optimizer: parameter/gradient shape mismatch");
      }
    }
  }
}

template <typename T>
void sgd_step(std::vector<SSDLayerParams<T>>& params, const std::vector<LayerGrads<T>>& grads,
              T lr) {
  check_congruent(params, grads);
  for (std::size_t j = 0; j < params.size(); ++j) {
    auto tp = params[j].tensors();
    auto tg = grads[j].tensors();
    for (std::size_t k = 0; k < tp.size(); ++k) {
      auto p = tp[k].get().flat();
      auto g = tg[k].get().flat();
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
    }
  }
}

template <typename T>
struct AdamState {
  T lr = T(1e-2);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  std::vector<LayerGrads<T>> m;
  std::vector<LayerGrads<T>> v;
  std::uint64_t step = 0;

  static AdamState create(const ModelConfig& c, T lr) {
    AdamState s;
    s.lr = lr;
    s.m.assign(c.layers, LayerGrads<T>::zeros(c));
    s.v.assign(c.layers, LayerGrads<T>::zeros(c));
    return s;
  }
};

template <typename T>
void adam_step(std::vector<SSDLayerParams<T>>& params, const std::vector<LayerGrads<T>>& grads,
               AdamState<T>& st) {
  check_congruent(params, grads);
  check_congruent(params, st.m);
  ++st.step;
  const T c1 = T(1) - std::pow(st.beta1, static_cast<T>(st.step));
  const T c2 = T(1) - std::pow(st.beta2, static_cast<T>(st.step));
  for (std::size_t j = 0; j < params.size(); ++j) {
    auto tp = params[j].tensors();
    auto tg = grads[j].tensors();
    auto tm = st.m[j].tensors();
    auto tv = st.v[j].tensors();
    for (std::size_t k = 0; k < tp.size(); ++k) {
      auto p = tp[k].get().flat();
      auto g = tg[k].get().flat();
      auto m = tm[k].get().flat();
      auto v = tv[k].get().flat();
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = st.beta1 * m[i] + (T(1) - st.beta1) * g[i];
        v[i] = st.beta2 * v[i] + (T(1) - st.beta2) * g[i] * g[i];
        const T mhat = m[i] / c1;
        const T vhat = v[i] / c2;
        p[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Training

enum class OptimizerKind { adam, sgd };

struct TrainOptions {
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-2;
  std::optional<CheckpointPlan> plan;  // magc only; planner-optimal when absent
};

/// Planner-optimal plan for this engine's own buffer layout.
template <typename T>
CheckpointPlan default_plan(const ModelConfig& c, std::size_t seq, std::size_t granularity = 1) {
  const auto r = optimal_plan(c.layers, seq, engine_constants(c, sizeof(T)), granularity);
  return {r.l_star, r.s_star, granularity};
}

template <typename T>
Strategy make_strategy(StrategyKind kind, const ModelConfig& c, std::size_t seq,
                       const std::optional<CheckpointPlan>& plan = std::nullopt) {
  if (kind != StrategyKind::magc) return {kind, std::nullopt};
  return Strategy::magc(plan ? *plan : default_plan<T>(c, seq));
}

/// Forward-only loss under the strategy's own forward path.
template <typename T>
T evaluate_loss(const Model<T>& m, const TaskData<T>& data, const Strategy& strategy) {
  const auto plan = strategy.grid_plan(m.num_layers(), data.x.extent(0));
  if (!plan) return loss_mse(model_forward_full(m, data.x).y_seq.value, data.target).loss;
  return loss_mse(forward_checkpointed(m, data.x, *plan).y_seq.value, data.target).loss;
}

struct TrainResult {
  std::vector<double> losses;  // step 0 .. steps; the last entry follows the final update
  bool diverged = false;
  std::string message;
};

template <typename T>
TrainResult train(const ModelConfig& c, const TaskSpec& task, std::size_t steps,
                  StrategyKind kind, std::uint64_t seed, const TrainOptions& opt = {}) {
  c.validate();
  if (task.dim != c.dim) throw ContractError("train: task dim != model dim");
  auto model = Model<T>::create(c, seed);
  const auto data = gen_task<T>(task);
  const Strategy strategy = make_strategy<T>(kind, c, task.seq, opt.plan);
  auto adam = AdamState<T>::create(c, static_cast<T>(opt.lr));

  TrainResult out;
  auto record = [&](T loss) {
    out.losses.push_back(static_cast<double>(loss));
    if (!std::isfinite(loss)) {
      out.diverged = true;
      out.message = "non-finite loss at step " + std::to_string(out.losses.size() - 1);
    }
    return !out.diverged;
  };
  for (std::size_t k = 0; k < steps; ++k) {
    ActivationLedger ledger;
    auto r = run_strategy(model, data.x, data.target, strategy, ledger);
    if (!record(r.loss)) return out;
    std::vector<LayerGrads<T>> grads = std::move(r.grads.layers);
    if (opt.optimizer == OptimizerKind::adam) {
      adam_step(model.layers, grads, adam);
    } else {
      sgd_step(model.layers, grads, static_cast<T>(opt.lr));
    }
  }
  record(evaluate_loss(model, data, strategy));
  return out;
}

inline void write_loss_csv(std::ostream& os, const std::vector<double>& losses) {
  os << "step,loss\n";
  char buf[64];
  for (std::size_t k = 0; k < losses.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.17g", losses[k]);
    os << k << ',' << buf << '\n';
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

inline constexpr double kGradcheckTolerance = 1e-6;
// Entries below this magnitude are compared absolutely: tolerance * floor = 1e-8.
inline constexpr double kGradcheckScaleFloor = 1e-2;

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t input_samples = 16;
  // w_delta = 0 and only W_B, W_C checked: with one layer the loss is then
  // quadratic in every checked entry and central differences are exact.
  bool linear_only = false;
  bool corrupt = false;      // negative control: perturbs one analytic entry
  std::optional<CheckpointPlan> plan;
};

struct GradcheckResult {
  double max_rel_err = 0;
  double max_abs_err = 0;
  std::size_t entries = 0;
  bool pass = false;
};

inline double gradcheck_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), kGradcheckScaleFloor});
}

/// Compares grid-backward gradients against central differences over every
/// parameter and a strided sample of input entries. Double precision only.
inline GradcheckResult gradcheck_fd(const ModelConfig& c, const TaskSpec& task, double eps,
                                    const GradcheckOptions& opt = {}) {
  c.validate();
  if (task.dim != c.dim) throw ContractError("gradcheck: task dim != model dim");
  if (!(eps > 0)) throw ContractError("gradcheck: eps must be positive");
  auto model = Model<double>::create(c, opt.seed);
  if (opt.linear_only) {
    for (auto& layer : model.layers) layer.w_delta.fill(0.0);
  }
  auto data = gen_task<double>(task);
  const std::size_t S = task.seq;
  const CheckpointPlan plan =
      opt.plan ? *opt.plan
               : CheckpointPlan{std::max<std::size_t>(1, c.layers / 2),
                                std::max<std::size_t>(1, S / 3), 1};

  ActivationLedger ledger;
  auto analytic = run_strategy(model, data.x, data.target, Strategy::magc(plan), ledger).grads;
  if (opt.corrupt) {
    double& g = analytic.layers.front().w_b[0];
    g += 1e-3 * std::max(1.0, std::abs(g));
  }

  auto loss_at = [&] { return loss_mse(model_forward_full(model, data.x).y_seq.value, data.target).loss; };
  GradcheckResult res;
  auto check = [&](double& slot, double a) {
    const double orig = slot;
    slot = orig + eps;
    const double up = loss_at();
    slot = orig - eps;
    const double down = loss_at();
    slot = orig;
    const double numeric = (up - down) / (2 * eps);
    res.max_rel_err = std::max(res.max_rel_err, gradcheck_error(a, numeric));
    res.max_abs_err = std::max(res.max_abs_err, std::abs(a - numeric));
    ++res.entries;
  };

  for (std::size_t j = 0; j < model.layers.size(); ++j) {
    auto tp = model.layers[j].tensors();
    auto tg = analytic.layers[j].tensors();
    for (std::size_t k = 0; k < tp.size(); ++k) {
      if (opt.linear_only && k < 2) continue;  // w_delta, b_delta
      auto p = tp[k].get().flat();
      auto g = tg[k].get().flat();
      for (std::size_t i = 0; i < p.size(); ++i) check(p[i], g[i]);
    }
  }
  const std::size_t n_in = data.x.size();
  const std::size_t samples = opt.linear_only ? 0 : std::min(opt.input_samples, n_in);
  for (std::size_t k = 0; k < samples; ++k) {
    const std::size_t i = samples > 1 ? k * (n_in - 1) / (samples - 1) : 0;
    check(data.x[i], analytic.grad_input[i]);
  }
  res.pass = res.max_rel_err <= kGradcheckTolerance;
  return res;
}

inline nlohmann::json to_json(const GradcheckResult& r) {
  return nlohmann::json{{"max_rel_err", r.max_rel_err}, {"pass", r.pass}};
}

}  // namespace magc
