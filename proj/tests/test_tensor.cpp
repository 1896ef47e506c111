#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace leaml;

namespace {

Var<double> mat(Shape s, std::vector<double> v, bool grad = false) { return make_var<double>(std::move(s), std::move(v), grad); }

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(make_var<double>({2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(make_var<double>({0, 3}, {}), DimensionError);
  auto t = make_var<double>({2, 3}, std::vector<double>(6), true);
  EXPECT_EQ(t->grad.size(), t->data.size());
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape<double> tape(false);
  auto out = matmul(tape, mat({2, 2}, {1, 0, 0, 1}), mat({2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(out->data, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, ProjectorSelectsFirstRow) {
  Tape<double> tape(false);
  auto out = matmul(tape, mat({2, 2}, {1, 0, 0, 0}), mat({2, 2}, {5, 6, 7, 8}));
  EXPECT_EQ(out->data, (std::vector<double>{5, 6, 0, 0}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<double> tape(false);
  try {
    matmul(tape, mat({2, 3}, std::vector<double>(6)), mat({2, 2}, std::vector<double>(4)));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos);
    EXPECT_NE(msg.find("2x2"), std::string::npos);
  }
}

TEST(Matmul, RandomGradientsMatchFiniteDifferencesTightly) {
  Rng rng(42);
  oracle::FdStats st;
  for (int t = 0; t < 20; ++t) {
    std::vector<Var<double>> in{oracle::random_var(rng, {3, 4}), oracle::random_var(rng, {4, 2})};
    const auto w = oracle::uniform_values(rng, 6);
    oracle::fd_check([&](Tape<double>& tp) { return oracle::weighted_sum(tp, matmul(tp, in[0], in[1]), w); }, in,
                     oracle::all_coords(in), st);
  }
  // matmul is bilinear, so the central difference is exact up to rounding.
  EXPECT_LT(st.max_rel_error, 1e-6);
}

TEST(Matmul, LargeProductMatchesNaiveTripleLoop) {
  Rng rng(3);
  for (auto [m, k, n] : {std::array<std::size_t, 3>{37, 129, 70}, {5, 7, 300}, {64, 64, 64}}) {
    auto a = oracle::random_var(rng, {m, k}, false);
    auto b = oracle::random_var(rng, {k, n}, false);
    Tape<double> tape(false);
    auto c = matmul(tape, a, b);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t p = 0; p < k; ++p) s += a->at(i, p) * b->at(p, j);
        ASSERT_NEAR(c->at(i, j), s, 1e-12);
      }
  }
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogVocab) {
  Tape<double> tape(false);
  const std::vector<int> y{0, 3, 6};
  const bool m[] = {true, true, true};
  auto loss = softmax_cross_entropy(tape, mat({3, 7}, std::vector<double>(21, 0.25)), std::span<const int>(y),
                                    std::span<const bool>(m, 3));
  EXPECT_NEAR(loss->data[0], std::log(7.0), 1e-12);
  EXPECT_NEAR(loss->data[0], 1.9459, 1e-4);
}

TEST(SoftmaxCrossEntropy, PeakedLogitGivesNearZeroLoss) {
  Tape<double> tape(false);
  std::vector<double> logits(5, 0.0);
  logits[2] = 30.0;
  const std::vector<int> y{2};
  const bool m[] = {true};
  auto loss = softmax_cross_entropy(tape, mat({1, 5}, logits), std::span<const int>(y), std::span<const bool>(m, 1));
  EXPECT_LT(loss->data[0], 1e-9);
}

TEST(SoftmaxCrossEntropy, MatchesBruteForceNll) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto logits = oracle::uniform_values(rng, 55, -4.0, 4.0);
    std::vector<int> y(5);
    std::vector<bool> mask(5);
    bool m[5];
    for (int i = 0; i < 5; ++i) {
      y[i] = static_cast<int>(rng.below(11));
      mask[i] = m[i] = i == 0 || rng.bernoulli(0.6);
    }
    Tape<double> tape(false);
    auto loss = softmax_cross_entropy(tape, mat({5, 11}, logits), std::span<const int>(y), std::span<const bool>(m, 5));
    EXPECT_NEAR(loss->data[0], oracle::brute_force_nll(logits, 5, 11, y, mask), 1e-12);
  }
}

TEST(SoftmaxCrossEntropy, AllMaskedOutIsInvalid) {
  Tape<double> tape(false);
  const std::vector<int> y{0, 1};
  const bool m[] = {false, false};
  EXPECT_THROW(softmax_cross_entropy(tape, mat({2, 3}, std::vector<double>(6)), std::span<const int>(y),
                                     std::span<const bool>(m, 2)),
               InvalidInput);
}

TEST(SoftmaxCrossEntropy, MaskedOutRowsGetZeroGradient) {
  Rng rng(5);
  auto x = oracle::random_var(rng, {4, 6});
  const std::vector<int> y{1, 2, 3, 4};
  const bool m[] = {true, false, true, false};
  Tape<double> tape;
  tape.backward(softmax_cross_entropy(tape, x, std::span<const int>(y), std::span<const bool>(m, 4)));
  for (std::size_t c = 0; c < 6; ++c) {
    EXPECT_EQ(x->grad[1 * 6 + c], 0.0);
    EXPECT_EQ(x->grad[3 * 6 + c], 0.0);
  }
  // Softmax minus one-hot, divided by the two masked-in rows.
  double z = 0;
  for (std::size_t c = 0; c < 6; ++c) z += std::exp(x->at(0, c));
  for (std::size_t c = 0; c < 6; ++c) {
    const double expect = (std::exp(x->at(0, c)) / z - (c == 1 ? 1.0 : 0.0)) / 2.0;
    EXPECT_NEAR(x->grad[c], expect, 1e-14);
  }
}

TEST(Layernorm, ConstantRowNormalizesToZero) {
  Tape<double> tape(false);
  auto out = layernorm(tape, mat({1, 4}, {3, 3, 3, 3}), mat({4}, {1, 1, 1, 1}), mat({4}, {0, 0, 0, 0}));
  for (double v : out->data) EXPECT_EQ(v, 0.0);
}

TEST(Layernorm, UsesEpsilonOneEMinusFive) {
  Tape<double> tape(false);
  auto out = layernorm(tape, mat({1, 2}, {-1, 1}), mat({2}, {1, 1}), mat({2}, {0, 0}));
  EXPECT_NEAR(out->data[1], 1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(EmbeddingGather, IdZeroReturnsFirstRow) {
  Tape<double> tape(false);
  const std::vector<int> ids{0};
  auto out = embedding_gather(tape, mat({3, 2}, {7, 8, 9, 10, 11, 12}), std::span<const int>(ids));
  EXPECT_EQ(out->data, (std::vector<double>{7, 8}));
}

TEST(EmbeddingGather, OutOfRangeIdIsRejected) {
  Tape<double> tape(false);
  const std::vector<int> ids{3};
  EXPECT_THROW(embedding_gather(tape, mat({3, 2}, std::vector<double>(6)), std::span<const int>(ids)), InvalidInput);
}

TEST(Ops, ShapeMismatchesThrow) {
  Tape<double> tape(false);
  auto a = mat({2, 2}, std::vector<double>(4));
  auto b = mat({2, 3}, std::vector<double>(6));
  EXPECT_THROW(add(tape, a, b), DimensionError);
  EXPECT_THROW(add_bias(tape, a, mat({3}, {0, 0, 0})), DimensionError);
  EXPECT_THROW(layernorm(tape, a, mat({3}, {1, 1, 1}), mat({3}, {0, 0, 0})), DimensionError);
  EXPECT_THROW(concat_rows(tape, {a, b}), DimensionError);
  EXPECT_THROW(slice_rows(tape, a, 1, 1), DimensionError);
  EXPECT_THROW(slice_rows(tape, a, 0, 3), DimensionError);
}

TEST(Gelu, MatchesTanhApproximation) {
  Tape<double> tape(false);
  auto out = gelu(tape, mat({1, 3}, {-1.0, 0.0, 2.0}));
  for (std::size_t i = 0; i < 3; ++i) {
    const double x = std::vector<double>{-1.0, 0.0, 2.0}[i];
    const double ref = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
    EXPECT_NEAR(out->data[i], ref, 1e-15);
  }
}

TEST(Gradients, EveryOpPassesFiniteDifferenceCheck) {
  for (const auto& st : oracle::op_gradient_suite(100, 2024)) {
    EXPECT_EQ(st.trials, 100u) << st.name;
    EXPECT_LT(st.max_rel_error, oracle::kFdTolerance) << st.name;
  }
}

TEST(Tape, BackwardIsDeterministic) {
  Rng rng(8);
  auto a = oracle::random_var(rng, {3, 5});
  auto b = oracle::random_var(rng, {5, 4});
  auto g = oracle::random_var(rng, {4});
  auto beta = oracle::random_var(rng, {4}, false);
  auto run = [&] {
    a->zero_grad();
    b->zero_grad();
    g->zero_grad();
    Tape<double> tape;
    auto h = gelu(tape, matmul(tape, a, b));
    auto y = layernorm(tape, h, g, beta);
    tape.backward(oracle::weighted_sum(tape, y, std::vector<double>(12, 0.5)));
    return std::make_tuple(a->grad, b->grad, g->grad);
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, SecondBackwardDoublesGradientsExactly) {
  Rng rng(9);
  auto a = oracle::random_var(rng, {3, 5});
  auto b = oracle::random_var(rng, {5, 2});
  Tape<double> tape;
  auto loss = oracle::weighted_sum(tape, gelu(tape, matmul(tape, a, b)), oracle::uniform_values(rng, 6));
  tape.backward(loss);
  const auto ga = a->grad, gb = b->grad;
  tape.backward(loss);
  for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_EQ(a->grad[i], 2.0 * ga[i]);
  for (std::size_t i = 0; i < gb.size(); ++i) EXPECT_EQ(b->grad[i], 2.0 * gb[i]);
}

TEST(Tape, BackwardVisitsNodesInReverseOrder) {
  Tape<double> tape;
  std::vector<int> order;
  auto x = make_var<double>({1}, {1.0}, true);
  for (int i = 0; i < 5; ++i) tape.record(x, [&order, i] { order.push_back(i); });
  tape.backward(x);
  EXPECT_EQ(order, (std::vector<int>{4, 3, 2, 1, 0}));
}

TEST(Tape, BackwardRequiresScalar) {
  Tape<double> tape;
  auto x = make_var<double>({2}, {1.0, 2.0}, true);
  EXPECT_THROW(tape.backward(x), InvalidInput);
}

TEST(Tape, DisabledTapeRecordsNothing) {
  Tape<double> tape(false);
  Rng rng(1);
  auto out = matmul(tape, oracle::random_var(rng, {2, 2}), oracle::random_var(rng, {2, 2}));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(out->requires_grad);
}
