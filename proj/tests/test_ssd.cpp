#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fd.hpp"
#include "magc/magc.hpp"

using namespace magc;

namespace {

ModelConfig small_config(std::size_t L, std::size_t d, std::size_t H, std::size_t N) {
  return ModelConfig::make(L, d, H, N);
}

Tensor<double> scalar_tensor(Shape s, double v) { return Tensor<double>(std::move(s), v); }

}  // namespace

TEST(Config, RejectsBadExtents) {
  EXPECT_THROW(ModelConfig::make(0, 4, 1, 2), ContractError);
  EXPECT_THROW(ModelConfig::make(2, 5, 2, 2), ContractError);
  EXPECT_THROW(ModelConfig::make(2, 4, 0, 2), ContractError);
  ModelConfig c = small_config(2, 4, 2, 2);
  c.head_dim = 3;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(Init, ShapesAndDeterminism) {
  const auto c = small_config(3, 6, 2, 4);
  const auto a = init_params<double>(c, 11);
  const auto b = init_params<double>(c, 11);
  const auto other = init_params<double>(c, 12);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, other);
  EXPECT_EQ(a[0].w_delta.shape(), (Shape{2, 3}));
  EXPECT_EQ(a[0].b_delta.shape(), (Shape{2}));
  EXPECT_EQ(a[0].w_b.shape(), (Shape{2, 4, 3}));
  EXPECT_EQ(a[0].w_c.shape(), (Shape{2, 4, 3}));
}

TEST(Init, DecayStepRange) {
  const auto c = small_config(16, 8, 4, 2);
  for (const auto& layer : init_params<double>(c, 5)) {
    for (double b : layer.b_delta.flat()) {
      const double dt = softplus(b);
      EXPECT_GE(dt, 0.001 * (1 - 1e-9));
      EXPECT_LE(dt, 0.1 * (1 + 1e-9));
    }
  }
}

TEST(Scalars, SoftplusAndSigmoid) {
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(softplus(40.0), 40.0, 1e-12);
  EXPECT_GT(softplus(-40.0), 0.0);
  EXPECT_NEAR(softplus_inverse(softplus(0.3)), 0.3, 1e-12);
  EXPECT_NEAR(sigmoid(0.0), 0.5, 1e-15);
  EXPECT_NEAR(sigmoid(-800.0), 0.0, 1e-300);
  EXPECT_NEAR(sigmoid(800.0), 1.0, 1e-15);
}

TEST(Projection, HalfDecay) {
  auto p = SSDLayerParams<double>::zeros(small_config(1, 2, 1, 1));
  p.b_delta[0] = softplus_inverse(std::log(2.0));
  const std::vector<double> x{0.3, -0.7};
  const auto s = project_selective<double>(p, x);
  EXPECT_NEAR(s.a[0], 0.5, 1e-14);
}

TEST(Projection, ZeroInputZeroInjection) {
  const auto c = small_config(1, 4, 2, 3);
  const auto p = init_params<double>(c, 1).front();
  const std::vector<double> x(4, 0.0);
  const auto s = project_selective<double>(p, x);
  for (double v : s.b.flat()) EXPECT_EQ(v, 0.0);
  for (double v : s.c.flat()) EXPECT_EQ(v, 0.0);
}

TEST(Projection, DecayInOpenUnitInterval) {
  const auto c = small_config(1, 4, 2, 2);
  const auto p = init_params<double>(c, 2).front();
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    auto x = fd::randn<double>({4}, rng, 3.0);
    const auto s = project_selective<double>(p, x.flat());
    for (double a : s.a.flat()) {
      EXPECT_GT(a, 0.0);
      EXPECT_LT(a, 1.0);
    }
  }
}

TEST(Projection, WrongLengthThrows) {
  const auto p = init_params<double>(small_config(1, 4, 2, 2), 0).front();
  const std::vector<double> x(3, 1.0);
  EXPECT_THROW(project_selective<double>(p, x), ContractError);
}

TEST(Step, ScalarExample) {
  const auto a = scalar_tensor({1}, 0.5);
  const auto b = scalar_tensor({1, 1}, 3.0);
  const auto c = scalar_tensor({1, 1}, 2.0);
  const auto h = scalar_tensor({1, 1, 1}, 4.0);
  const std::vector<double> x{1.0};
  const auto out = ssd_step(a, b, c, std::span<const double>(x), h, false);
  EXPECT_DOUBLE_EQ(out.h[0], 5.0);
  EXPECT_DOUBLE_EQ(out.y[0], 10.0);
  const auto res = ssd_step(a, b, c, std::span<const double>(x), h, true);
  EXPECT_DOUBLE_EQ(res.y[0], 11.0);
}

TEST(Step, ShapeErrors) {
  const auto h = scalar_tensor({1, 2, 2}, 0.0);
  const std::vector<double> x{1.0, 1.0};
  EXPECT_THROW(ssd_step(scalar_tensor({2}, 0.5), scalar_tensor({1, 2}, 1.0),
                        scalar_tensor({1, 2}, 1.0), std::span<const double>(x), h, false),
               ContractError);
  const std::vector<double> short_x{1.0};
  EXPECT_THROW(ssd_step(scalar_tensor({1}, 0.5), scalar_tensor({1, 2}, 1.0),
                        scalar_tensor({1, 2}, 1.0), std::span<const double>(short_x), h, false),
               ContractError);
}

TEST(Rnn, TanhExample) {
  RNNLayerParams<double> p{Tensor<double>({1, 1}, 0.0), Tensor<double>({1}, 1.0),
                           Tensor<double>({1}, 2.0), Activation::tanh};
  const auto out = rnn_step(p, 0.5, Tensor<double>({1}, 3.0));
  EXPECT_DOUBLE_EQ(out.h[0], std::tanh(0.5));
  EXPECT_DOUBLE_EQ(out.y, std::tanh(2.0 * std::tanh(0.5)));
}

TEST(Rnn, IdentityScalarMatchesSsdStep) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> unit(0.0, 1.0), wide(-2.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    const double a = unit(rng), b = wide(rng), c = wide(rng), x = wide(rng), h = wide(rng);
    RNNLayerParams<double> p{Tensor<double>({1, 1}, a), Tensor<double>({1}, b),
                             Tensor<double>({1}, c), Activation::identity};
    const auto r = rnn_step(p, x, Tensor<double>({1}, h));
    const std::vector<double> xs{x};
    const auto s = ssd_step(scalar_tensor({1}, a), scalar_tensor({1, 1}, b),
                            scalar_tensor({1, 1}, c), std::span<const double>(xs),
                            scalar_tensor({1, 1, 1}, h), false);
    EXPECT_EQ(r.h[0], s.h[0]);
    EXPECT_EQ(r.y, s.y[0]);
  }
}

TEST(Chunk, SingleStepMatchesStep) {
  const auto c = small_config(1, 4, 2, 3);
  const auto p = init_params<double>(c, 9).front();
  std::mt19937_64 rng(1);
  const auto x = fd::randn<double>({1, 4}, rng);
  const auto h0 = fd::randn<double>(c.state_shape(), rng);
  const auto out = chunk_forward(p, x, h0, false);

  std::vector<double> u(4);
  detail::rms_normalize(x.row(0), u.data());
  const auto s = project_selective<double>(p, u);
  auto step = ssd_step(s.a, s.b, s.c, std::span<const double>(u), h0, false);
  for (std::size_t q = 0; q < 4; ++q) step.y[q] += x[q];
  EXPECT_EQ(out.h_out, step.h);
  EXPECT_EQ(Tensor<double>({1, 4}, std::vector<double>(step.y.flat().begin(), step.y.flat().end())),
            out.y);
}

TEST(Chunk, SplitIsBitwiseExact) {
  const auto c = small_config(1, 6, 2, 3);
  const auto p = init_params<double>(c, 4).front();
  std::mt19937_64 rng(8);
  const auto x = fd::randn<double>({8, 6}, rng);
  const auto whole = chunk_forward(p, x, zero_state<double>(c), false);
  const auto first = chunk_forward(p, x.rows(0, 4), zero_state<double>(c), false);
  const auto second = chunk_forward(p, x.rows(4, 8), first.h_out, false);
  EXPECT_EQ(whole.h_out, second.h_out);
  EXPECT_EQ(whole.y.rows(0, 4), first.y);
  EXPECT_EQ(whole.y.rows(4, 8), second.y);
}

TEST(Chunk, RandomSplitsAreBitwiseExact) {
  const auto c = small_config(1, 4, 2, 2);
  const auto p = init_params<double>(c, 6).front();
  std::mt19937_64 rng(10);
  const auto x = fd::randn<double>({37, 4}, rng);
  const auto whole = chunk_forward(p, x, zero_state<double>(c), false);
  for (int trial = 0; trial < 20; ++trial) {
    std::size_t t = 0;
    auto h = zero_state<double>(c);
    Tensor<double> y({37, 4});
    while (t < 37) {
      const std::size_t len = std::uniform_int_distribution<std::size_t>(1, 37 - t)(rng);
      auto r = chunk_forward(p, x.rows(t, t + len), h, false);
      y.set_rows(t, r.y);
      h = std::move(r.h_out);
      t += len;
    }
    EXPECT_EQ(y, whole.y);
    EXPECT_EQ(h, whole.h_out);
  }
}

TEST(Chunk, RetainControlsCache) {
  const auto c = small_config(1, 4, 1, 2);
  const auto p = init_params<double>(c, 0).front();
  const Tensor<double> x({5, 4}, 0.25);
  const auto kept = chunk_forward(p, x, zero_state<double>(c), true);
  const auto dropped = chunk_forward(p, x, zero_state<double>(c), false);
  ASSERT_TRUE(kept.cache.has_value());
  EXPECT_FALSE(dropped.cache.has_value());
  EXPECT_EQ(kept.y, dropped.y);
  EXPECT_EQ(kept.cache->steps(), 5u);
  EXPECT_EQ(kept.cache->x, x);
}

TEST(Chunk, BadShapesThrow) {
  const auto c = small_config(1, 4, 1, 2);
  const auto p = init_params<double>(c, 0).front();
  EXPECT_THROW(chunk_forward(p, Tensor<double>({3, 5}), zero_state<double>(c), false),
               ContractError);
  EXPECT_THROW(chunk_forward(p, Tensor<double>({3, 4}), Tensor<double>({1, 2, 3}), false),
               ContractError);
}

TEST(ChunkBackward, ZeroSeedsGiveZeroGradients) {
  const auto c = small_config(1, 4, 2, 2);
  const auto p = init_params<double>(c, 3).front();
  std::mt19937_64 rng(2);
  const auto x = fd::randn<double>({6, 4}, rng);
  const auto fwd = chunk_forward(p, x, fd::randn<double>(c.state_shape(), rng), true);
  auto acc = LayerGrads<double>::zeros(c);
  const auto g = chunk_backward(p, *fwd.cache, Tensor<double>({6, 4}), zero_state<double>(c), acc);
  for (double v : g.grad_x.flat()) EXPECT_EQ(v, 0.0);
  for (double v : g.grad_h_in.flat()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(acc, LayerGrads<double>::zeros(c));
}

TEST(ChunkBackward, MatchesFiniteDifferences) {
  const auto c = small_config(1, 2, 1, 2);
  fd::Worst worst;
  for (std::uint64_t inst = 0; inst < 20; ++inst) {
    auto p = init_params<double>(c, 100 + inst).front();
    std::mt19937_64 rng(inst);
    auto x = fd::randn<double>({5, 2}, rng);
    auto h0 = fd::randn<double>(c.state_shape(), rng);
    const auto gy = fd::randn<double>({5, 2}, rng);
    const auto gh = fd::randn<double>(c.state_shape(), rng);

    auto objective = [&] {
      const auto r = chunk_forward(p, x, h0, false);
      return fd::dot(gy, r.y) + fd::dot(gh, r.h_out);
    };
    const auto fwd = chunk_forward(p, x, h0, true);
    auto acc = LayerGrads<double>::zeros(c);
    const auto g = chunk_backward(p, *fwd.cache, gy, gh, acc);

    auto tp = p.tensors();
    auto ta = acc.tensors();
    for (std::size_t k = 0; k < tp.size(); ++k) {
      auto pv = tp[k].get().flat();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        worst.add(ta[k].get()[i], fd::central(pv[i], objective));
      }
    }
    for (std::size_t i = 0; i < x.size(); ++i) worst.add(g.grad_x[i], fd::central(x[i], objective));
    for (std::size_t i = 0; i < h0.size(); ++i) {
      worst.add(g.grad_h_in[i], fd::central(h0[i], objective));
    }
  }
  EXPECT_GT(worst.n, 200u);
  EXPECT_LE(worst.err, 1e-6);
}

TEST(ChunkBackward, ResidualOnlyPassesGradientThrough) {
  const auto c = small_config(1, 4, 2, 2);
  auto p = init_params<double>(c, 1).front();
  p.w_b.fill(0.0);
  p.w_c.fill(0.0);
  std::mt19937_64 rng(5);
  const auto x = fd::randn<double>({7, 4}, rng);
  const auto gy = fd::randn<double>({7, 4}, rng);
  const auto fwd = chunk_forward(p, x, zero_state<double>(c), true);
  EXPECT_EQ(fwd.y, x);
  auto acc = LayerGrads<double>::zeros(c);
  const auto g = chunk_backward(p, *fwd.cache, gy, zero_state<double>(c), acc);
  EXPECT_EQ(g.grad_x, gy);
}

TEST(ChunkBackward, ChargesScratchAndReleasesIt) {
  const auto c = small_config(1, 4, 2, 2);
  const auto p = init_params<double>(c, 1).front();
  const Tensor<double> x({6, 4}, 0.5);
  const auto fwd = chunk_forward(p, x, zero_state<double>(c), true);
  auto acc = LayerGrads<double>::zeros(c);
  ActivationLedger ledger;
  chunk_backward(p, *fwd.cache, Tensor<double>({6, 4}, 1.0), zero_state<double>(c), acc, &ledger,
                 Tag::cell_cache);
  EXPECT_EQ(ledger.live(), 0u);
  EXPECT_EQ(ledger.peak(), 6 * c.state_size() * sizeof(double));
}

TEST(Stack, SingleLayerMatchesChunk) {
  const auto c = small_config(1, 4, 2, 2);
  const auto m = Model<double>::create(c, 3);
  std::mt19937_64 rng(1);
  const auto x = fd::randn<double>({9, 4}, rng);
  const auto full = model_forward_full(m, x);
  const auto chunk = chunk_forward(m.layers[0], x, zero_state<double>(c), false);
  EXPECT_EQ(full.y_seq.value, chunk.y);
  EXPECT_EQ(full.final_states[0], chunk.h_out);
}

TEST(Stack, LedgerTracksCacheAndReleasesEverything) {
  const auto c = small_config(3, 4, 2, 2);
  const auto m = Model<double>::create(c, 3);
  const Tensor<double> x({10, 4}, 0.1);
  ActivationLedger ledger;
  {
    std::uint64_t evals = 0;
    auto fwd = model_forward_full(m, x, &ledger, &evals);
    EXPECT_EQ(evals, 30u);
    std::uint64_t cache = 0;
    for (const auto& l : fwd.cache.layers) cache += l.value.bytes();
    EXPECT_EQ(ledger.subtotal(Tag::full_cache), cache);
    EXPECT_EQ(ledger.subtotal(Tag::io), x.bytes());
    EXPECT_EQ(ledger.live(), cache + x.bytes());
    auto g = model_backward_full(m, std::move(fwd.cache), Tensor<double>({10, 4}, 1.0),
                                 std::vector<LayerState<double>>(3, zero_state<double>(c)),
                                 &ledger);
    EXPECT_EQ(ledger.subtotal(Tag::full_cache), 0u);
  }
  EXPECT_EQ(ledger.live(), 0u);
}

TEST(Stack, DeterministicAndFinite) {
  const auto c = small_config(4, 8, 2, 4);
  const auto m = Model<double>::create(c, 21);
  const auto data = gen_task<double>({TaskKind::delayed_copy, 64, 8, 1, 21});
  const auto a = model_forward_full(m, data.x);
  const auto b = model_forward_full(m, data.x);
  EXPECT_EQ(a.y_seq.value, b.y_seq.value);
  EXPECT_TRUE(a.y_seq.value.all_finite());
}

TEST(Stack, BackwardZeroSeed) {
  const auto c = small_config(2, 4, 2, 2);
  const auto m = Model<double>::create(c, 2);
  const Tensor<double> x({5, 4}, 0.3);
  auto fwd = model_forward_full(m, x);
  const auto g = model_backward_full(m, std::move(fwd.cache), Tensor<double>({5, 4}),
                                     std::vector<LayerState<double>>(2, zero_state<double>(c)));
  EXPECT_EQ(g, GradientBundle<double>::zeros(c, 5));
}

TEST(Stack, BackwardMatchesFiniteDifferences) {
  const auto c = small_config(2, 2, 1, 2);
  auto m = Model<double>::create(c, 17);
  std::mt19937_64 rng(4);
  auto x = fd::randn<double>({6, 2}, rng);
  const auto gy = fd::randn<double>({6, 2}, rng);
  std::vector<LayerState<double>> gh{fd::randn<double>(c.state_shape(), rng),
                                     fd::randn<double>(c.state_shape(), rng)};
  auto objective = [&] {
    const auto r = model_forward_full(m, x);
    double v = fd::dot(gy, r.y_seq.value);
    for (std::size_t j = 0; j < 2; ++j) v += fd::dot(gh[j], r.final_states[j]);
    return v;
  };
  auto fwd = model_forward_full(m, x);
  const auto g = model_backward_full(m, std::move(fwd.cache), gy, gh);
  fd::Worst worst;
  for (std::size_t j = 0; j < 2; ++j) {
    auto tp = m.layers[j].tensors();
    auto tg = g.layers[j].tensors();
    for (std::size_t k = 0; k < tp.size(); ++k) {
      auto pv = tp[k].get().flat();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        worst.add(tg[k].get()[i], fd::central(pv[i], objective));
      }
    }
  }
  for (std::size_t i = 0; i < x.size(); ++i) worst.add(g.grad_input[i], fd::central(x[i], objective));
  EXPECT_LE(worst.err, 1e-6);
}

TEST(Stack, RejectsWrongInput) {
  const auto m = Model<double>::create(small_config(2, 4, 2, 2), 0);
  EXPECT_THROW(model_forward_full(m, Tensor<double>({4, 3})), ContractError);
}

TEST(Loss, MseExample) {
  const auto r = loss_mse(Tensor<double>({1, 1}, 2.0), Tensor<double>({1, 1}, 0.0));
  EXPECT_DOUBLE_EQ(r.loss, 4.0);
  EXPECT_DOUBLE_EQ(r.grad[0], 4.0);
  const auto r2 = loss_mse(Tensor<double>({1, 2}, std::vector<double>{1.0, 3.0}),
                           Tensor<double>({1, 2}, std::vector<double>{0.0, 1.0}));
  EXPECT_DOUBLE_EQ(r2.loss, 2.5);
  EXPECT_DOUBLE_EQ(r2.grad[0], 1.0);
  EXPECT_DOUBLE_EQ(r2.grad[1], 2.0);
  EXPECT_THROW(loss_mse(Tensor<double>({1, 2}), Tensor<double>({2, 1})), ContractError);
}
