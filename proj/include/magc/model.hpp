// SPDX-License-Identifier: Apache-2.0
//
// Layer stack and the full-cache reference forward/backward. The reference
// retains every per-step internal and is the gradient ground truth for all
// checkpointing strategies.

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "magc/ledger.hpp"
#include "magc/ssd.hpp"
#include "magc/tensor.hpp"

namespace magc {

template <typename T>
struct Model {
  ModelConfig config;
  std::vector<SSDLayerParams<T>> layers;

  static Model create(const ModelConfig& c, std::uint64_t seed) {
    return Model{c, init_params<T>(c, seed)};
  }

  std::size_t num_layers() const { return layers.size(); }
};

/// A value together with the ledger charge that accounts for it.
template <typename V>
struct Charged {
  V value;
  ScopedCharge charge;
};

template <typename T>
Charged<Tensor<T>> charged(ActivationLedger* ledger, Tag tag, Tensor<T> t) {
  ScopedCharge c(ledger, tag, t.bytes());
  return {std::move(t), std::move(c)};
}

template <typename T>
Charged<LayerCache<T>> charged(ActivationLedger* ledger, Tag tag, LayerCache<T> cache) {
  ScopedCharge c(ledger, tag, cache.bytes());
  return {std::move(cache), std::move(c)};
}

template <typename T>
void check_sequence(const Model<T>& m, const Tensor<T>& x_seq) {
  if (x_seq.rank() != 2 || x_seq.extent(1) != m.config.dim) {
    throw ContractError("input sequence must be (S, " + std::to_string(m.config.dim) + "), got " +
                        shape_str(x_seq.shape()));
  }
  if (x_seq.extent(0) > m.config.max_seq) {
    throw ContractError("sequence length " + std::to_string(x_seq.extent(0)) +
                        " exceeds max_seq " + std::to_string(m.config.max_seq));
  }
  if (m.layers.size() != m.config.layers) throw ContractError("model layer count mismatch");
}

template <typename T>
struct FullCache {
  std::vector<Charged<LayerCache<T>>> layers;
};

template <typename T>
struct FullForward {
  Charged<Tensor<T>> y_seq;               // charged as io
  std::vector<LayerState<T>> final_states;
  FullCache<T> cache;
};

template <typename T>
FullForward<T> model_forward_full(const Model<T>& m, const Tensor<T>& x_seq,
                                  ActivationLedger* ledger = nullptr,
                                  std::uint64_t* step_evals = nullptr) {
  check_sequence(m, x_seq);
  const std::size_t S = x_seq.extent(0);
  FullForward<T> out;
  out.cache.layers.reserve(m.num_layers());
  out.final_states.reserve(m.num_layers());

  const Tensor<T>* x = &x_seq;
  Charged<Tensor<T>> cur;
  for (std::size_t j = 0; j < m.num_layers(); ++j) {
    auto r = chunk_forward(m.layers[j], *x, zero_state<T>(m.config), true);
    out.cache.layers.push_back(charged(ledger, Tag::full_cache, std::move(*r.cache)));
    out.final_states.push_back(std::move(r.h_out));
    const bool top = j + 1 == m.num_layers();
    cur = charged(ledger, top ? Tag::io : Tag::frontier, std::move(r.y));
    x = &cur.value;
    if (step_evals) *step_evals += S;
  }
  out.y_seq = std::move(cur);
  return out;
}

/// Reverse traversal: layers top-down, time descending within each layer.
/// Consumes the cache; each layer's cache is released once back-propagated.
template <typename T>
GradientBundle<T> model_backward_full(const Model<T>& m, FullCache<T>&& cache,
                                      const Tensor<T>& grad_y_seq,
                                      const std::vector<LayerState<T>>& grad_final_states,
                                      ActivationLedger* ledger = nullptr) {
  const std::size_t L = m.num_layers();
  if (cache.layers.size() != L) throw ContractError("model_backward_full: missing cache");
  if (grad_final_states.size() != L) {
    throw ContractError("model_backward_full: need one state gradient per layer");
  }
  const std::size_t S = cache.layers.front().value.steps();
  require_shape(grad_y_seq, {S, m.config.dim}, "model_backward_full grad_y_seq");

  auto bundle = GradientBundle<T>::zeros(m.config, S);
  const Tensor<T>* gy = &grad_y_seq;
  Charged<Tensor<T>> gx;
  for (std::size_t j = L; j-- > 0;) {
    auto r = chunk_backward(m.layers[j], cache.layers[j].value, *gy, grad_final_states[j],
                            bundle.layers[j], ledger, Tag::full_cache);
    cache.layers[j] = {};
    if (j == 0) {
      gx = {};
      bundle.grad_input = std::move(r.grad_x);
    } else {
      gx = charged(ledger, Tag::frontier, std::move(r.grad_x));
      gy = &gx.value;
    }
  }
  cache.layers.clear();
  return bundle;
}

template <typename T>
struct LossResult {
  T loss;
  Tensor<T> grad;
};

/// Mean squared error over all S*d entries; grad = 2 (y - target) / n.
template <typename T>
LossResult<T> loss_mse(const Tensor<T>& y, const Tensor<T>& target) {
  if (y.shape() != target.shape()) {
    throw ContractError("loss_mse: shape mismatch " + shape_str(y.shape()) + " vs " +
                        shape_str(target.shape()));
  }
  const T n = static_cast<T>(y.size());
  LossResult<T> r{T{0}, Tensor<T>(y.shape())};
  for (std::size_t i = 0; i < y.size(); ++i) {
    const T diff = y[i] - target[i];
    r.loss += diff * diff;
    r.grad[i] = T(2) * diff / n;
  }
  r.loss /= n;
  return r;
}

}  // namespace magc
