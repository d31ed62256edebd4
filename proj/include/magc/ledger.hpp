// SPDX-License-Identifier: Apache-2.0
//
// Activation ledger: logical byte accounting of retained activation buffers
// with a running peak. Parameters, parameter gradients and optimizer state
// are never charged.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

#include <nlohmann/json.hpp>

namespace magc {

enum class Tag : std::uint8_t { l_ckpt, s_ckpt, cell_cache, frontier, io, full_cache };

inline constexpr std::size_t kTagCount = 6;

inline constexpr std::string_view tag_name(Tag t) {
  constexpr std::array<std::string_view, kTagCount> names{"l_ckpt",   "s_ckpt", "cell_cache",
                                                          "frontier", "io",     "full_cache"};
  return names[static_cast<std::size_t>(t)];
}

/// Over-release or another violation of the charge/release discipline.
class AccountingError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A charge would push live bytes past the configured budget.
class BudgetExceeded : public std::runtime_error {
 public:
  BudgetExceeded(std::uint64_t requested_live, std::uint64_t budget)
      : std::runtime_error("activation budget exceeded: " + std::to_string(requested_live) +
                           " > " + std::to_string(budget)),
        requested_live_(requested_live),
        budget_(budget) {}
  std::uint64_t requested_live() const noexcept { return requested_live_; }
  std::uint64_t budget() const noexcept { return budget_; }

 private:
  std::uint64_t requested_live_;
  std::uint64_t budget_;
};

class ActivationLedger {
 public:
  ActivationLedger() = default;
  explicit ActivationLedger(std::optional<std::uint64_t> budget) : budget_(budget) {}

  void charge(Tag tag, std::uint64_t units) {
    if (budget_ && live_ + units > *budget_) throw BudgetExceeded(live_ + units, *budget_);
    auto& sub = subtotal_[idx(tag)];
    sub += units;
    live_ += units;
    if (live_ > peak_) peak_ = live_;
    if (sub > tag_peak_[idx(tag)]) tag_peak_[idx(tag)] = sub;
    audit();
  }

  void release(Tag tag, std::uint64_t units) {
    if (units > subtotal_[idx(tag)]) {
      throw AccountingError("over-release on tag " + std::string(tag_name(tag)) + ": " +
                            std::to_string(units) + " > " +
                            std::to_string(subtotal_[idx(tag)]));
    }
    subtotal_[idx(tag)] -= units;
    live_ -= units;
    audit();
  }

  std::uint64_t live() const noexcept { return live_; }
  std::uint64_t peak() const noexcept { return peak_; }
  std::uint64_t subtotal(Tag tag) const noexcept { return subtotal_[idx(tag)]; }
  /// Largest subtotal seen for `tag` since the last reset_peak().
  std::uint64_t tag_peak(Tag tag) const noexcept { return tag_peak_[idx(tag)]; }
  std::optional<std::uint64_t> budget() const noexcept { return budget_; }
  void set_budget(std::optional<std::uint64_t> budget) noexcept { budget_ = budget; }

  /// Starts a new measurement window: peak restarts from the current live total.
  void reset_peak() noexcept {
    peak_ = live_;
    tag_peak_ = subtotal_;
  }

 private:
  static constexpr std::size_t idx(Tag t) noexcept { return static_cast<std::size_t>(t); }

  void audit() const {
#ifndef NDEBUG
    std::uint64_t sum = 0;
    for (auto v : subtotal_) sum += v;
    if (sum != live_) throw AccountingError("ledger conservation violated");
#endif
  }

  std::array<std::uint64_t, kTagCount> subtotal_{};
  std::array<std::uint64_t, kTagCount> tag_peak_{};
  std::uint64_t live_ = 0;
  std::uint64_t peak_ = 0;
  std::optional<std::uint64_t> budget_;
};

/// RAII charge: released when destroyed. A null ledger makes it a no-op.
class ScopedCharge {
 public:
  ScopedCharge() = default;
  ScopedCharge(ActivationLedger* ledger, Tag tag, std::uint64_t units)
      : ledger_(ledger), tag_(tag), units_(units) {
    if (ledger_) ledger_->charge(tag_, units_);
  }
  ScopedCharge(const ScopedCharge&) = delete;
  ScopedCharge& operator=(const ScopedCharge&) = delete;
  ScopedCharge(ScopedCharge&& o) noexcept
      : ledger_(std::exchange(o.ledger_, nullptr)), tag_(o.tag_), units_(o.units_) {}
  ScopedCharge& operator=(ScopedCharge&& o) noexcept {
    if (this != &o) {
      reset();
      ledger_ = std::exchange(o.ledger_, nullptr);
      tag_ = o.tag_;
      units_ = o.units_;
    }
    return *this;
  }
  ~ScopedCharge() { reset(); }

  void reset() noexcept {
    if (ledger_) {
      // Release cannot over-release a charge this object made itself.
      ledger_->release(tag_, units_);
      ledger_ = nullptr;
    }
  }
  std::uint64_t units() const noexcept { return units_; }

 private:
  ActivationLedger* ledger_ = nullptr;
  Tag tag_ = Tag::io;
  std::uint64_t units_ = 0;
};

/// Two-step measurement: baseline before the run, peak during it.
struct Measurement {
  std::uint64_t baseline_units = 0;
  std::uint64_t peak_units = 0;
  std::uint64_t overhead_units = 0;
  bool leak = false;
};

template <typename Run>
Measurement measure(ActivationLedger& ledger, Run&& run) {
  Measurement m;
  m.baseline_units = ledger.live();
  ledger.reset_peak();
  std::forward<Run>(run)();
  m.peak_units = ledger.peak();
  m.overhead_units = m.peak_units - m.baseline_units;
  m.leak = ledger.live() != m.baseline_units;
  return m;
}

/// Serialized measurement record: {strategy, L, S, l, s, baseline, peak, overhead, leak}.
inline nlohmann::json measurement_json(std::string_view strategy, std::size_t layers,
                                       std::size_t seq, std::optional<std::size_t> l,
                                       std::optional<std::size_t> s, const Measurement& m) {
  nlohmann::json j;
  j["strategy"] = strategy;
  j["L"] = layers;
  j["S"] = seq;
  j["l"] = l ? nlohmann::json(*l) : nlohmann::json(nullptr);
  j["s"] = s ? nlohmann::json(*s) : nlohmann::json(nullptr);
  j["baseline"] = m.baseline_units;
  j["peak"] = m.peak_units;
  j["overhead"] = m.overhead_units;
  j["leak"] = m.leak;
  return j;
}

}  // namespace magc
