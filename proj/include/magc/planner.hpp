// SPDX-License-Identifier: Apache-2.0
//
// Analytic activation-memory model for the two-axis checkpoint grid and the
// interval search built on it.
//
//   raw:       M(l, s) = LS/l + LS/s + l*s
//   weighted:  M(l, s) = (LS/l) c_l + (LS/s) c_s + l*s c_grid + s c_state

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "magc/ssd.hpp"
#include "magc/tensor.hpp"

namespace magc {

/// Units per stored layer-checkpoint position, per stored state snapshot,
/// per recomputed grid position, and per step of in-cell state rescan.
struct CostConstants {
  double c_l = 1.0;
  double c_s = 1.0;
  double c_grid = 1.0;
  double c_state = 0.0;

  static CostConstants unit() { return {1.0, 1.0, 1.0, 0.0}; }

  void validate() const {
    if (!(c_l >= 0 && c_s >= 0 && c_state >= 0 && c_grid > 0)) {
      throw ContractError("cost constants must be non-negative with c_grid > 0");
    }
  }

  friend bool operator==(const CostConstants&, const CostConstants&) = default;
};

inline void to_json(nlohmann::json& j, const CostConstants& c) {
  j = nlohmann::json{{"c_l", c.c_l}, {"c_s", c.c_s}, {"c_grid", c.c_grid}, {"c_state", c.c_state}};
}

inline void from_json(const nlohmann::json& j, CostConstants& c) {
  j.at("c_l").get_to(c.c_l);
  j.at("c_s").get_to(c.c_s);
  j.at("c_grid").get_to(c.c_grid);
  j.at("c_state").get_to(c.c_state);
}

/// Published per-backbone constants (BF16 element counts; FP32 states count twice).
inline CostConstants mamba2_constants(std::string_view model) {
  if (model == "mamba2-370m") return {1024, 269056, 6432, 264448};
  if (model == "mamba2-1.3b") return {2048, 537344, 12608, 528640};
  if (model == "mamba2-2.7b") return {2560, 671488, 15696, 660736};
  throw ContractError("unknown preset '" + std::string(model) +
                      "' (expected mamba2-370m, mamba2-1.3b or mamba2-2.7b)");
}

/// Constants implied by this engine's buffer layout, in bytes.
///   c_l     one input row (d)
///   c_s     one layer state (H*N*P)
///   c_grid  one retained step of a layer cache: x, z, a, B, C
///   c_state one step of the adjoint's state rescan plus the two grad_x rows
inline CostConstants engine_constants(const ModelConfig& c, std::size_t elem_bytes) {
  const double b = static_cast<double>(elem_bytes);
  const double d = static_cast<double>(c.dim), H = static_cast<double>(c.heads),
               N = static_cast<double>(c.state_dim);
  const double hs = static_cast<double>(c.state_size());
  return {d * b, hs * b, (d + 2 * H + 2 * H * N) * b, (hs + 2 * d) * b};
}

namespace detail {
inline void check_intervals(double l, double s, double L, double S) {
  if (!(L >= 1 && S >= 1 && l >= 1 && l <= L && s >= 1 && s <= S)) {
    throw ContractError("memory model: require 1 <= l <= L and 1 <= s <= S");
  }
}
}  // namespace detail

inline double raw_memory(double l, double s, double L, double S) {
  detail::check_intervals(l, s, L, S);
  return L * S / l + L * S / s + l * s;
}

inline double weighted_memory(double l, double s, double L, double S, const CostConstants& k) {
  detail::check_intervals(l, s, L, S);
  return (L * S / l) * k.c_l + (L * S / s) * k.c_s + l * s * k.c_grid + s * k.c_state;
}

/// Memory of a run without checkpointing: one cell spanning the whole grid.
inline double gc_off_memory(double L, double S, const CostConstants& k) {
  return weighted_memory(L, S, L, S, k);
}

struct CriticalPoint {
  double l;
  double s;
  double memory;
};

/// Real-valued stationary point of the raw model: l = s = cbrt(LS), M = 3 (LS)^(2/3).
inline CriticalPoint cube_root_plan(double L, double S) {
  if (!(L >= 1 && S >= 1)) throw ContractError("cube_root_plan: require L, S >= 1");
  const double r = std::cbrt(L * S);
  return {r, r, 3.0 * r * r};
}

enum class Regime { CubeRoot, LinearInS, LinearInL };

inline constexpr std::string_view regime_name(Regime r) {
  switch (r) {
    case Regime::CubeRoot: return "CubeRoot";
    case Regime::LinearInS: return "LinearInS";
    case Regime::LinearInL: return "LinearInL";
  }
  return "?";
}

/// Asymptotic class of the optimized memory. Where cases overlap at equality
/// the cube-root case wins.
inline Regime regime(std::uint64_t L, std::uint64_t S) {
  if (L < 1 || S < 1) throw ContractError("regime: require L, S >= 1");
  if (L <= S * S && S <= L * L) return Regime::CubeRoot;
  if (L * L <= S) return Regime::LinearInS;
  return Regime::LinearInL;
}

inline double savings_ratio(double L, double S, double memory) {
  if (!(memory > 0)) throw ContractError("savings_ratio: memory must be positive");
  return L * S / memory;
}

struct PlanReport {
  std::size_t l_star = 1;
  std::size_t s_star = 1;
  std::size_t granularity = 1;
  double predicted_units = 0;
  double predicted_raw = 0;
  Regime regime = Regime::CubeRoot;
  double savings_ratio = 0;
  CostConstants constants;
};

/// Exhaustive integer search over l in [1, L] and s in granularity multiples
/// up to S. Ties (within 1e-12 relative) go to smaller l, then smaller s.
inline PlanReport optimal_plan(std::size_t L, std::size_t S, const CostConstants& k,
                               std::size_t granularity = 1) {
  if (L < 1 || S < 1) throw ContractError("optimal_plan: require L, S >= 1");
  if (granularity < 1) throw ContractError("optimal_plan: granularity must be >= 1");
  if (granularity > S) {
    throw ContractError("optimal_plan: no feasible s (granularity " + std::to_string(granularity) +
                        " > S " + std::to_string(S) + ")");
  }
  k.validate();
  const double Ld = static_cast<double>(L), Sd = static_cast<double>(S);
  auto eval = [&](std::size_t l, std::size_t s) {
    return weighted_memory(static_cast<double>(l), static_cast<double>(s), Ld, Sd, k);
  };

  double best = std::numeric_limits<double>::infinity();
  for (std::size_t l = 1; l <= L; ++l) {
    for (std::size_t s = granularity; s <= S; s += granularity) best = std::min(best, eval(l, s));
  }
  const double cutoff = best * (1.0 + 1e-12);
  PlanReport r;
  r.granularity = granularity;
  r.constants = k;
  for (std::size_t l = 1; l <= L && r.predicted_units == 0; ++l) {
    for (std::size_t s = granularity; s <= S; s += granularity) {
      const double v = eval(l, s);
      if (v <= cutoff) {
        r.l_star = l;
        r.s_star = s;
        r.predicted_units = v;
        break;
      }
    }
  }
  r.predicted_raw = raw_memory(static_cast<double>(r.l_star), static_cast<double>(r.s_star), Ld, Sd);
  r.regime = regime(L, S);
  r.savings_ratio = savings_ratio(Ld, Sd, r.predicted_raw);
  return r;
}

inline nlohmann::json to_json(const PlanReport& r) {
  return nlohmann::json{{"l", r.l_star},
                        {"s", r.s_star},
                        {"predicted_units", r.predicted_units},
                        {"predicted_raw", r.predicted_raw},
                        {"regime", regime_name(r.regime)},
                        {"savings_ratio", r.savings_ratio},
                        {"constants", r.constants}};
}

// ---------------------------------------------------------------------------
// Calibration

struct Probe {
  std::size_t layers;
  std::size_t seq;
  std::size_t l;
  std::size_t s;
  double measured;
};

class CalibrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CalibrationResult {
  CostConstants constants;
  std::vector<double> residuals;  // (predicted - measured) / measured, per probe
  double max_abs_residual = 0;
  bool ok = true;                 // false when a fitted constant is negative
  std::string message;
};

/// Least-squares fit of the four constants on relative error. Requires at
/// least four probes spanning the basis (LS/l, LS/s, l*s, s).
inline CalibrationResult calibrate(std::span<const Probe> probes) {
  constexpr int kBasis = 4;
  if (probes.size() < static_cast<std::size_t>(kBasis)) {
    throw CalibrationError("calibration needs at least 4 probes, got " +
                           std::to_string(probes.size()));
  }
  const auto rows = static_cast<Eigen::Index>(probes.size());
  Eigen::MatrixXd A(rows, kBasis);
  Eigen::VectorXd b(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& p = probes[static_cast<std::size_t>(r)];
    if (!(p.measured > 0)) throw CalibrationError("probe measurements must be positive");
    const double L = static_cast<double>(p.layers), S = static_cast<double>(p.seq),
                 l = static_cast<double>(p.l), s = static_cast<double>(p.s);
    detail::check_intervals(l, s, L, S);
    A.row(r) << L * S / l, L * S / s, l * s, s;
    A.row(r) /= p.measured;
    b(r) = 1.0;
  }
  // Column scaling keeps the rank decision independent of term magnitudes.
  Eigen::VectorXd scale = A.colwise().norm().transpose();
  for (int c = 0; c < kBasis; ++c) {
    if (scale(c) == 0) throw CalibrationError("calibration design is rank-deficient");
    A.col(c) /= scale(c);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() < kBasis) {
    throw CalibrationError("calibration design is rank-deficient (rank " +
                           std::to_string(qr.rank()) + " < 4)");
  }
  Eigen::VectorXd x = qr.solve(b);
  for (int c = 0; c < kBasis; ++c) x(c) /= scale(c);

  CalibrationResult res;
  res.constants = {x(0), x(1), x(2), x(3)};
  for (const auto& p : probes) {
    const double L = static_cast<double>(p.layers), S = static_cast<double>(p.seq);
    const double pred =
        (L * S / p.l) * x(0) + (L * S / p.s) * x(1) + double(p.l) * p.s * x(2) + double(p.s) * x(3);
    const double rel = (pred - p.measured) / p.measured;
    res.residuals.push_back(rel);
    res.max_abs_residual = std::max(res.max_abs_residual, std::abs(rel));
  }
  if (x(0) < 0 || x(1) < 0 || x(3) < 0 || !(x(2) > 0)) {
    res.ok = false;
    res.message = "fitted constants violate non-negativity";
  }
  return res;
}

inline nlohmann::json to_json(const CalibrationResult& r) {
  return nlohmann::json{{"constants", r.constants},
                        {"residuals", r.residuals},
                        {"max_abs_residual", r.max_abs_residual},
                        {"ok", r.ok}};
}

}  // namespace magc
