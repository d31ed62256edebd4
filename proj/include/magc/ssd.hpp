// SPDX-License-Identifier: Apache-2.0
//
// Selective linear-recurrence (SSD) layer with scalar-identity transitions,
// the fixed-parameter Elman RNN it reduces from, and the chunk-level forward
// and hand-written adjoint that every checkpointing strategy is built on.
//
// A layer normalizes its input, u_t = x_t / rms(x_t), then per head, with
// u_head the head's P-slice of u_t:
//   z_t = w_delta . u_head + b_delta,   delta_t = softplus(z_t),  a_t = exp(-delta_t)
//   B_t = delta_t * W_B u_head,  C_t = W_C u_head       (N each)
//   h_t[n, p] = a_t * h_{t-1}[n, p] + B_t[n] * u_head[p]
//   y_head[p] = sum_n C_t[n] * h_t[n, p]   (+ x_head[p] with residual)
// Without the normalization and the delta factor each layer is cubic in its
// input and stacks of eight or more layers overflow at initialization.

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "magc/ledger.hpp"
#include "magc/tensor.hpp"

namespace magc {

enum class Precision { f32, f64 };

struct ModelConfig {
  std::size_t layers = 2;      // L
  std::size_t dim = 4;         // d = heads * head_dim
  std::size_t heads = 1;       // H
  std::size_t head_dim = 4;    // P
  std::size_t state_dim = 2;   // N
  std::size_t max_seq = 1 << 20;
  Precision precision = Precision::f64;
  bool residual = true;

  void validate() const {
    if (layers < 1 || heads < 1 || head_dim < 1 || state_dim < 1 || max_seq < 1) {
      throw ContractError("model config extents must be >= 1");
    }
    if (dim != heads * head_dim) {
      throw ContractError("model config requires dim == heads * head_dim (" +
                          std::to_string(dim) + " != " + std::to_string(heads) + " * " +
                          std::to_string(head_dim) + ")");
    }
  }

  /// Builds a config from (L, d, H, N); head_dim is derived.
  static ModelConfig make(std::size_t layers, std::size_t dim, std::size_t heads,
                          std::size_t state_dim) {
    if (heads == 0 || dim % heads != 0) {
      throw ContractError("dim " + std::to_string(dim) + " not divisible by heads " +
                          std::to_string(heads));
    }
    ModelConfig c;
    c.layers = layers;
    c.dim = dim;
    c.heads = heads;
    c.head_dim = dim / heads;
    c.state_dim = state_dim;
    c.validate();
    return c;
  }

  std::size_t state_size() const noexcept { return heads * state_dim * head_dim; }
  Shape state_shape() const { return {heads, state_dim, head_dim}; }
};

/// Recurrent state of one layer at one time boundary, shape (H, N, P).
template <typename T>
using LayerState = Tensor<T>;

template <typename T>
LayerState<T> zero_state(const ModelConfig& c) {
  return LayerState<T>(c.state_shape());
}

/// Per-layer parameters; the same layout doubles as the gradient container.
template <typename T>
struct SSDLayerParams {
  Tensor<T> w_delta;  // (H, P)
  Tensor<T> b_delta;  // (H)
  Tensor<T> w_b;      // (H, N, P)
  Tensor<T> w_c;      // (H, N, P)
  bool residual = true;

  static SSDLayerParams zeros(const ModelConfig& c) {
    SSDLayerParams p;
    p.w_delta = Tensor<T>({c.heads, c.head_dim});
    p.b_delta = Tensor<T>({c.heads});
    p.w_b = Tensor<T>({c.heads, c.state_dim, c.head_dim});
    p.w_c = Tensor<T>({c.heads, c.state_dim, c.head_dim});
    p.residual = c.residual;
    return p;
  }

  std::array<std::reference_wrapper<Tensor<T>>, 4> tensors() {
    return {w_delta, b_delta, w_b, w_c};
  }
  std::array<std::reference_wrapper<const Tensor<T>>, 4> tensors() const {
    return {w_delta, b_delta, w_b, w_c};
  }

  std::size_t heads() const { return b_delta.extent(0); }
  std::size_t head_dim() const { return w_delta.extent(1); }
  std::size_t state_dim() const { return w_b.extent(1); }
  std::size_t dim() const { return heads() * head_dim(); }

  friend bool operator==(const SSDLayerParams&, const SSDLayerParams&) = default;
};

template <typename T>
using LayerGrads = SSDLayerParams<T>;

template <typename T>
struct GradientBundle {
  std::vector<LayerGrads<T>> layers;
  Tensor<T> grad_input;  // (S, d)

  static GradientBundle zeros(const ModelConfig& c, std::size_t seq) {
    GradientBundle g;
    g.layers.assign(c.layers, LayerGrads<T>::zeros(c));
    g.grad_input = Tensor<T>({seq, c.dim});
    return g;
  }

  friend bool operator==(const GradientBundle&, const GradientBundle&) = default;
};

template <typename T>
T max_abs_diff(const GradientBundle<T>& a, const GradientBundle<T>& b) {
  if (a.layers.size() != b.layers.size()) throw ContractError("bundle layer count mismatch");
  T m = max_abs_diff(a.grad_input, b.grad_input);
  for (std::size_t j = 0; j < a.layers.size(); ++j) {
    auto ta = a.layers[j].tensors();
    auto tb = b.layers[j].tensors();
    for (std::size_t k = 0; k < ta.size(); ++k) {
      const T v = max_abs_diff(ta[k].get(), tb[k].get());
      if (std::isnan(v)) return v;
      m = std::max(m, v);
    }
  }
  return m;
}

template <typename T>
bool all_finite(const GradientBundle<T>& g) {
  if (!g.grad_input.all_finite()) return false;
  for (const auto& l : g.layers) {
    for (const auto& t : l.tensors()) {
      if (!t.get().all_finite()) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Scalar helpers

template <typename T>
T softplus(T z) {
  return z > T(0) ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

template <typename T>
T sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

/// Inverse of softplus on (0, inf).
template <typename T>
T softplus_inverse(T delta) {
  return std::log(std::expm1(delta));
}

// ---------------------------------------------------------------------------
// Initialization

/// Deterministic given (config, seed). Weights ~ N(0, 1/sqrt(P)); b_delta is set
/// so that softplus(b_delta) is log-uniform in [0.001, 0.1].
template <typename T>
std::vector<SSDLayerParams<T>> init_params(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.head_dim));
  std::normal_distribution<double> normal(0.0, scale);
  std::uniform_real_distribution<double> log_dt(std::log(0.001), std::log(0.1));

  std::vector<SSDLayerParams<T>> stack;
  stack.reserve(c.layers);
  for (std::size_t j = 0; j < c.layers; ++j) {
    auto p = SSDLayerParams<T>::zeros(c);
    for (auto& v : p.w_delta.flat()) v = static_cast<T>(normal(rng));
    for (auto& v : p.w_b.flat()) v = static_cast<T>(normal(rng));
    for (auto& v : p.w_c.flat()) v = static_cast<T>(normal(rng));
    for (auto& v : p.b_delta.flat()) v = static_cast<T>(softplus_inverse(std::exp(log_dt(rng))));
    stack.push_back(std::move(p));
  }
  return stack;
}

// ---------------------------------------------------------------------------
// Selective projection

template <typename T>
struct Selective {
  Tensor<T> z;  // (H) pre-activation of the decay
  Tensor<T> a;  // (H) in (0, 1)
  Tensor<T> b;  // (H, N)
  Tensor<T> c;  // (H, N)
};

namespace detail {

inline constexpr double kNormEps = 1e-6;

// u = x / sqrt(mean(x^2) + eps); returns the scale 1 / sqrt(...).
template <typename T>
T rms_normalize(std::span<const T> x, T* u) {
  T ss{0};
  for (T v : x) ss += v * v;
  const T r = T(1) / std::sqrt(ss / static_cast<T>(x.size()) + static_cast<T>(kNormEps));
  for (std::size_t i = 0; i < x.size(); ++i) u[i] = x[i] * r;
  return r;
}

// Writes z, a (H each) and B, C (H*N each) for one (normalized) input vector.
template <typename T>
void project_into(const SSDLayerParams<T>& p, std::span<const T> x, T* z, T* a, T* b, T* c) {
  const std::size_t H = p.heads(), P = p.head_dim(), N = p.state_dim();
  for (std::size_t hd = 0; hd < H; ++hd) {
    const T* xh = x.data() + hd * P;
    const T* w = p.w_delta.data() + hd * P;
    T zz = p.b_delta[hd];
    for (std::size_t q = 0; q < P; ++q) zz += w[q] * xh[q];
    const T delta = softplus(zz);
    z[hd] = zz;
    a[hd] = std::exp(-delta);
    const T* wb = p.w_b.data() + hd * N * P;
    const T* wc = p.w_c.data() + hd * N * P;
    for (std::size_t n = 0; n < N; ++n) {
      T sb{0}, sc{0};
      for (std::size_t q = 0; q < P; ++q) {
        sb += wb[n * P + q] * xh[q];
        sc += wc[n * P + q] * xh[q];
      }
      b[hd * N + n] = delta * sb;
      c[hd * N + n] = sc;
    }
  }
}

// In-place state update and readout for one step. Every code path that
// advances a state goes through here so recomputation is bitwise exact.
template <typename T>
void advance_state(std::size_t H, std::size_t N, std::size_t P, const T* a, const T* b,
                   std::span<const T> x, T* h) {
  for (std::size_t hd = 0; hd < H; ++hd) {
    const T ah = a[hd];
    const T* xh = x.data() + hd * P;
    T* hh = h + hd * N * P;
    for (std::size_t n = 0; n < N; ++n) {
      const T bn = b[hd * N + n];
      for (std::size_t q = 0; q < P; ++q) hh[n * P + q] = ah * hh[n * P + q] + bn * xh[q];
    }
  }
}

// `skip` (nullable) is added to the readout.
template <typename T>
void readout(std::size_t H, std::size_t N, std::size_t P, const T* c, const T* h, const T* skip,
             T* y) {
  for (std::size_t hd = 0; hd < H; ++hd) {
    const T* hh = h + hd * N * P;
    for (std::size_t q = 0; q < P; ++q) {
      T acc{0};
      for (std::size_t n = 0; n < N; ++n) acc += c[hd * N + n] * hh[n * P + q];
      if (skip) acc += skip[hd * P + q];
      y[hd * P + q] = acc;
    }
  }
}

}  // namespace detail

/// Selective coefficients for one input vector. Layers pass the normalized
/// input; the projection itself applies no normalization.
template <typename T>
Selective<T> project_selective(const SSDLayerParams<T>& p, std::span<const T> x) {
  if (x.size() != p.dim()) throw ContractError("project_selective: input length != d");
  const std::size_t H = p.heads(), N = p.state_dim();
  Selective<T> s{Tensor<T>({H}), Tensor<T>({H}), Tensor<T>({H, N}), Tensor<T>({H, N})};
  detail::project_into(p, x, s.z.data(), s.a.data(), s.b.data(), s.c.data());
  return s;
}

template <typename T>
struct StepOutput {
  Tensor<T> y;        // (d)
  LayerState<T> h;    // (H, N, P)
};

/// One recurrence step given already-projected coefficients a (H), B (H, N), C (H, N).
template <typename T>
StepOutput<T> ssd_step(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c,
                       std::span<const T> x, const LayerState<T>& h_prev, bool residual) {
  if (h_prev.rank() != 3) throw ContractError("ssd_step: state must be (H, N, P)");
  const std::size_t H = h_prev.extent(0), N = h_prev.extent(1), P = h_prev.extent(2);
  require_shape(a, {H}, "ssd_step a");
  require_shape(b, {H, N}, "ssd_step B");
  require_shape(c, {H, N}, "ssd_step C");
  if (x.size() != H * P) throw ContractError("ssd_step: input length != H * P");
  StepOutput<T> out{Tensor<T>({H * P}), h_prev};
  detail::advance_state(H, N, P, a.data(), b.data(), x, out.h.data());
  detail::readout(H, N, P, c.data(), out.h.data(), residual ? x.data() : nullptr, out.y.data());
  return out;
}

// ---------------------------------------------------------------------------
// Fixed-parameter Elman RNN: h_t = act(A h_{t-1} + B x_t), y_t = act(C h_t).

enum class Activation { tanh, identity };

template <typename T>
struct RNNLayerParams {
  Tensor<T> a;  // (N, N)
  Tensor<T> b;  // (N)
  Tensor<T> c;  // (N)
  Activation activation = Activation::tanh;
};

template <typename T>
struct RNNStepOutput {
  T y;
  Tensor<T> h;  // (N)
};

template <typename T>
RNNStepOutput<T> rnn_step(const RNNLayerParams<T>& p, T x, const Tensor<T>& h_prev) {
  const std::size_t N = p.b.size();
  require_shape(p.a, {N, N}, "rnn_step A");
  require_shape(p.c, {N}, "rnn_step C");
  require_shape(h_prev, {N}, "rnn_step state");
  auto act = [&](T v) { return p.activation == Activation::tanh ? std::tanh(v) : v; };
  RNNStepOutput<T> out{T{0}, Tensor<T>({N})};
  for (std::size_t i = 0; i < N; ++i) {
    T acc{0};
    for (std::size_t j = 0; j < N; ++j) acc += p.a(i, j) * h_prev[j];
    out.h[i] = act(acc + p.b[i] * x);
  }
  T acc{0};
  for (std::size_t i = 0; i < N; ++i) acc += p.c[i] * out.h[i];
  out.y = act(acc);
  return out;
}

// ---------------------------------------------------------------------------
// Chunk forward / backward

/// Per-step internals of one layer over a contiguous block of T steps.
/// States are not stored per step; the adjoint rescans them from h_in.
template <typename T>
struct LayerCache {
  Tensor<T> x;         // (T, d)
  Tensor<T> z;         // (T, H)
  Tensor<T> a;         // (T, H)
  Tensor<T> b;         // (T, H, N)
  Tensor<T> c;         // (T, H, N)
  LayerState<T> h_in;  // (H, N, P)

  std::size_t steps() const { return x.extent(0); }
  std::uint64_t bytes() const {
    return x.bytes() + z.bytes() + a.bytes() + b.bytes() + c.bytes() + h_in.bytes();
  }

  friend bool operator==(const LayerCache&, const LayerCache&) = default;
};

template <typename T>
struct ChunkOutput {
  Tensor<T> y;                          // (T, d)
  LayerState<T> h_out;                  // (H, N, P)
  std::optional<LayerCache<T>> cache;   // present iff retained
};

template <typename T>
ChunkOutput<T> chunk_forward(const SSDLayerParams<T>& p, const Tensor<T>& x_block,
                             const LayerState<T>& h_in, bool retain) {
  const std::size_t H = p.heads(), N = p.state_dim(), P = p.head_dim(), d = p.dim();
  if (x_block.rank() != 2 || x_block.extent(1) != d) {
    throw ContractError("chunk_forward: x_block must be (T, " + std::to_string(d) + "), got " +
                        shape_str(x_block.shape()));
  }
  require_shape(h_in, {H, N, P}, "chunk_forward h_in");
  const std::size_t steps = x_block.extent(0);

  ChunkOutput<T> out{Tensor<T>({steps, d}), h_in, std::nullopt};
  Tensor<T> z({H}), a({H}), b({H, N}), c({H, N});
  if (retain) {
    out.cache = LayerCache<T>{x_block,
                              Tensor<T>({steps, H}),
                              Tensor<T>({steps, H}),
                              Tensor<T>({steps, H, N}),
                              Tensor<T>({steps, H, N}),
                              h_in};
  }
  T* h = out.h_out.data();
  std::vector<T> u(d);
  for (std::size_t t = 0; t < steps; ++t) {
    auto x = x_block.row(t);
    T *zp = z.data(), *ap = a.data(), *bp = b.data(), *cp = c.data();
    if (retain) {
      zp = out.cache->z.row(t).data();
      ap = out.cache->a.row(t).data();
      bp = out.cache->b.row(t).data();
      cp = out.cache->c.row(t).data();
    }
    detail::rms_normalize(x, u.data());
    detail::project_into(p, std::span<const T>(u), zp, ap, bp, cp);
    detail::advance_state(H, N, P, ap, bp, std::span<const T>(u), h);
    detail::readout(H, N, P, cp, h, p.residual ? x.data() : nullptr, out.y.row(t).data());
  }
  return out;
}

template <typename T>
struct ChunkGrads {
  Tensor<T> grad_x;        // (T, d)
  LayerState<T> grad_h_in; // (H, N, P)
};

/// Adjoint of chunk_forward for the scalar <grad_y, y> + <grad_h_out, h_out>.
/// Parameter gradients are added into `acc` in time-descending order. The
/// per-step state trace is rebuilt from the cache and charged to `ledger`
/// under `scratch` for the duration of the call.
template <typename T>
ChunkGrads<T> chunk_backward(const SSDLayerParams<T>& p, const LayerCache<T>& cache,
                             const Tensor<T>& grad_y, const LayerState<T>& grad_h_out,
                             LayerGrads<T>& acc, ActivationLedger* ledger = nullptr,
                             Tag scratch = Tag::cell_cache) {
  const std::size_t H = p.heads(), N = p.state_dim(), P = p.head_dim(), d = p.dim();
  const std::size_t steps = cache.steps();
  require_shape(cache.x, {steps, d}, "chunk_backward cache.x");
  require_shape(cache.b, {steps, H, N}, "chunk_backward cache.b");
  require_shape(cache.h_in, {H, N, P}, "chunk_backward cache.h_in");
  require_shape(grad_y, {steps, d}, "chunk_backward grad_y");
  require_shape(grad_h_out, {H, N, P}, "chunk_backward grad_h_out");
  require_shape(acc.w_b, p.w_b.shape(), "chunk_backward accumulator");

  const std::size_t hs = H * N * P;
  Tensor<T> trace({steps, hs});
  ScopedCharge trace_charge(ledger, scratch, trace.bytes());
  std::vector<T> u(d);
  {
    std::vector<T> h(cache.h_in.flat().begin(), cache.h_in.flat().end());
    for (std::size_t t = 0; t < steps; ++t) {
      detail::rms_normalize(cache.x.row(t), u.data());
      detail::advance_state(H, N, P, cache.a.row(t).data(), cache.b.row(t).data(),
                            std::span<const T>(u), h.data());
      std::copy(h.begin(), h.end(), trace.row(t).begin());
    }
  }

  ChunkGrads<T> out{Tensor<T>({steps, d}), grad_h_out};
  T* gh = out.grad_h_in.data();
  std::vector<T> g_ht(N * P), g_bv(N), g_cv(N), g_u(d);

  for (std::size_t tt = steps; tt-- > 0;) {
    const T r = detail::rms_normalize(cache.x.row(tt), u.data());
    auto gy = grad_y.row(tt);
    const T* h_t = trace.row(tt).data();
    const T* h_prev = tt == 0 ? cache.h_in.data() : trace.row(tt - 1).data();
    std::fill(g_u.begin(), g_u.end(), T{0});

    for (std::size_t hd = 0; hd < H; ++hd) {
      const std::size_t xo = hd * P, so = hd * N * P, co = hd * N;
      const T a = cache.a(tt, hd);
      const T z = cache.z(tt, hd);
      const T delta = softplus(z);
      const T* bv = cache.b.row(tt).data() + co;
      const T* cv = cache.c.row(tt).data() + co;
      const T* uh = u.data() + xo;
      const T* gyh = gy.data() + xo;
      T* guh = g_u.data() + xo;

      T g_a{0};
      for (std::size_t n = 0; n < N; ++n) {
        T gc{0}, gb{0};
        for (std::size_t q = 0; q < P; ++q) {
          const std::size_t k = so + n * P + q;
          const T g = gh[k] + cv[n] * gyh[q];
          g_ht[n * P + q] = g;
          gc += gyh[q] * h_t[k];
          g_a += g * h_prev[k];
          gb += g * uh[q];
        }
        g_cv[n] = gc;
        g_bv[n] = gb;
      }
      for (std::size_t q = 0; q < P; ++q) {
        T g{0};
        for (std::size_t n = 0; n < N; ++n) g += g_ht[n * P + q] * bv[n];
        guh[q] += g;
      }
      for (std::size_t k = 0; k < N * P; ++k) gh[so + k] = a * g_ht[k];

      // B = delta * (W_B u): split the B gradient between delta and W_B u.
      const T* wb = p.w_b.data() + so;
      const T* wc = p.w_c.data() + so;
      T g_delta = -a * g_a;
      for (std::size_t n = 0; n < N; ++n) {
        T raw{0};
        for (std::size_t q = 0; q < P; ++q) raw += wb[n * P + q] * uh[q];
        g_delta += g_bv[n] * raw;
        g_bv[n] *= delta;
      }
      const T g_z = g_delta * sigmoid(z);
      const T* w = p.w_delta.data() + xo;
      T* gw = acc.w_delta.data() + xo;
      for (std::size_t q = 0; q < P; ++q) {
        gw[q] += g_z * uh[q];
        guh[q] += g_z * w[q];
      }
      acc.b_delta[hd] += g_z;

      T* gwb = acc.w_b.data() + so;
      T* gwc = acc.w_c.data() + so;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t q = 0; q < P; ++q) {
          gwb[n * P + q] += g_bv[n] * uh[q];
          gwc[n * P + q] += g_cv[n] * uh[q];
        }
      }
      for (std::size_t q = 0; q < P; ++q) {
        T g{0};
        for (std::size_t n = 0; n < N; ++n) g += wb[n * P + q] * g_bv[n] + wc[n * P + q] * g_cv[n];
        guh[q] += g;
      }
    }

    // Through the normalization: g_x = r (g_u - u <g_u, u> / d).
    T dot{0};
    for (std::size_t q = 0; q < d; ++q) dot += g_u[q] * u[q];
    const T mean_dot = dot / static_cast<T>(d);
    T* gx = out.grad_x.row(tt).data();
    for (std::size_t q = 0; q < d; ++q) {
      gx[q] = r * (g_u[q] - u[q] * mean_dot);
      if (p.residual) gx[q] += gy[q];
    }
  }
  return out;
}

}  // namespace magc
