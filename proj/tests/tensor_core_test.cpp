#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "edje/autograd.hpp"
#include "edje/errors.hpp"
#include "edje/gradcheck.hpp"
#include "oracles.hpp"

namespace edje {
namespace {

// sum(f(x) * R) with a fixed random R, so ops whose plain sum is constant
// (softmax, layer norm) still get a meaningful gradient.
Var weighted_sum(const Var& v, const Tensor& weights) {
  return sum(hadamard(v, constant(weights)));
}

Parameter random_param(Shape shape, std::mt19937_64& rng) {
  return Parameter{Tensor::uniform(std::move(shape), -1.0, 1.0, rng)};
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  std::mt19937_64 rng(1);
  Tensor a = Tensor::uniform({3, 4}, -1, 1, rng);
  Var c = matmul(constant(a), constant(Tensor::identity(4)));
  EXPECT_EQ(c.value(), a);
}

TEST(Matmul, HandArithmetic) {
  Var c = matmul(constant(Tensor::matrix({{1, 2}, {3, 4}})), constant(Tensor::matrix({{1}, {1}})));
  EXPECT_EQ(c.value(), Tensor::matrix({{3}, {7}}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(constant(Tensor({2, 3})), constant(Tensor({4, 5})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  Parameter a = random_param({4, 5}, rng);
  Parameter b = random_param({5, 3}, rng);
  std::vector<Parameter*> params{&a, &b};
  auto report = grad_check(
      [&](Tape* t) { return sum(matmul(bind(t, a), bind(t, b))); }, params);
  EXPECT_LE(report.max_relative_error, 1e-6);
  EXPECT_EQ(report.checked, 35u);
}

TEST(Matmul, BackwardFormulas) {
  std::mt19937_64 rng(3);
  Parameter a = random_param({2, 3}, rng);
  Parameter b = random_param({3, 2}, rng);
  Tape tape;
  Var c = matmul(tape.param(a), tape.param(b));
  tape.backward(sum(c));
  // dA = 1 * B^T, dB = A^T * 1.
  const Tensor ones({2, 2}, 1.0);
  Tensor bt({2, 3});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) bt(j, i) = b.value(i, j);
  EXPECT_LT(max_abs_diff(*tape.grad(a), oracle::matmul(ones, bt)), 1e-14);
}

TEST(RowSoftmax, UniformRow) {
  Var y = row_softmax(constant(Tensor::matrix({{0, 0, 0}})));
  for (double v : y.value().data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(RowSoftmax, LargeLogitsDoNotOverflow) {
  Var y = row_softmax(constant(Tensor::matrix({{1000, 1000}})));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(RowSoftmax, RandomRowsSumToOneAndGradientMatches) {
  std::mt19937_64 rng(4);
  Parameter x = random_param({3, 4}, rng);
  Var y = row_softmax(constant_ref(x.value));
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (double v : y.value().row(r)) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  const Tensor w = Tensor::uniform({3, 4}, -1, 1, rng);
  std::vector<Parameter*> params{&x};
  auto report = grad_check([&](Tape* t) { return weighted_sum(row_softmax(bind(t, x)), w); }, params);
  EXPECT_LE(report.max_relative_error, 1e-6);
}

TEST(RowSoftmax, NanInputIsReported) {
  EXPECT_THROW(row_softmax(constant(Tensor::matrix({{0.0, std::nan("")}}))), NumericError);
}

TEST(LayerNorm, ConstantRowNormalizesToZero) {
  Var y = layer_norm(constant(Tensor::matrix({{5, 5, 5, 5}})), constant(Tensor({4}, 1.0)),
                     constant(Tensor({4}, 0.0)));
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, ZeroGainYieldsBias) {
  std::mt19937_64 rng(5);
  Tensor x = Tensor::uniform({3, 4}, -1, 1, rng);
  Tensor bias = Tensor::vector({0.1, -0.2, 0.3, 0.4});
  Var y = layer_norm(constant(x), constant(Tensor({4}, 0.0)), constant(bias));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.value()(r, c), bias[c]);
}

TEST(LayerNorm, MatchesOracleAndFiniteDifferences) {
  std::mt19937_64 rng(6);
  Parameter x = random_param({3, 5}, rng);
  Parameter g = random_param({5}, rng);
  Parameter b = random_param({5}, rng);
  Var y = layer_norm(constant_ref(x.value), constant_ref(g.value), constant_ref(b.value));
  EXPECT_LT(max_abs_diff(y.value(), oracle::layer_norm(x.value, g.value, b.value)), 1e-12);
  const Tensor w = Tensor::uniform({3, 5}, -1, 1, rng);
  std::vector<Parameter*> params{&x, &g, &b};
  auto report = grad_check(
      [&](Tape* t) { return weighted_sum(layer_norm(bind(t, x), bind(t, g), bind(t, b)), w); },
      params);
  EXPECT_LE(report.max_relative_error, 1e-5);
}

TEST(Gelu, ZeroAtOrigin) { EXPECT_EQ(gelu(constant(Tensor::vector({0.0}))).value()[0], 0.0); }

// G(x) - G(-x) = x because the gate satisfies 0.5(1 + tanh(u)) + 0.5(1 + tanh(-u)) = 1.
TEST(Gelu, DifferenceWithReflectionIsIdentity) {
  std::vector<double> xs;
  for (int i = -30; i <= 30; ++i) xs.push_back(i * 0.1);
  Tensor x({xs.size()}, xs);
  Tensor neg = x;
  for (double& v : neg.data()) v = -v;
  const Tensor a = gelu(constant(x)).value();
  const Tensor b = gelu(constant(neg)).value();
  for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_NEAR(a[i] - b[i], xs[i], 1e-6);
}

TEST(Gelu, MatchesOracleAndFiniteDifferences) {
  std::mt19937_64 rng(7);
  Parameter x{Tensor::uniform({4, 6}, -3, 3, rng)};
  EXPECT_LT(max_abs_diff(gelu(constant_ref(x.value)).value(), oracle::gelu(x.value)), 1e-14);
  std::vector<Parameter*> params{&x};
  auto report = grad_check([&](Tape* t) { return sum(gelu(bind(t, x))); }, params);
  EXPECT_LE(report.max_relative_error, 1e-6);
}

TEST(MultiHeadAttention, SingleKeyGetsAllWeight) {
  std::mt19937_64 rng(8);
  Tensor q = Tensor::uniform({5, 8}, -1, 1, rng);
  Tensor k = Tensor::uniform({1, 8}, -1, 1, rng);
  Tensor v = Tensor::uniform({1, 8}, -1, 1, rng);
  Tensor w = Tensor::uniform({8, 8}, -1, 1, rng);
  auto layout = AttentionLayout::single(5, 1);
  for (const Tensor& p : attention_probabilities(q, k, 4, layout)) {
    for (double x : p.data()) EXPECT_EQ(x, 1.0);
  }
  Var out = multi_head_attention(constant(q), constant(k), constant(v), 4, layout, constant(w));
  for (std::size_t r = 1; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.value()(r, c), out.value()(0, c), 1e-12);
}

TEST(MultiHeadAttention, OrthonormalSelfAttentionRowsStayNormalized) {
  Tensor x = Tensor::identity(4);
  auto probs = attention_probabilities(x, x, 1, AttentionLayout::single(4, 4));
  ASSERT_EQ(probs.size(), 1u);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (double p : probs[0].row(r)) s += p;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  Var out = multi_head_attention(constant(x), constant(x), constant(x), 1,
                                 AttentionLayout::single(4, 4), constant(Tensor::identity(4)));
  EXPECT_LT(max_abs_diff(out.value(), oracle::attention(x, x, x, 1)), 1e-12);
}

TEST(MultiHeadAttention, MatchesNaiveLoopOracle) {
  std::mt19937_64 rng(9);
  Tensor q = Tensor::uniform({6, 12}, -1, 1, rng);
  Tensor k = Tensor::uniform({9, 12}, -1, 1, rng);
  Tensor v = Tensor::uniform({9, 12}, -1, 1, rng);
  Tensor w = Tensor::uniform({12, 12}, -1, 1, rng);
  Tensor bias = Tensor::uniform({12}, -1, 1, rng);
  Var wb = constant(bias);
  Var out = multi_head_attention(constant(q), constant(k), constant(v), 3,
                                 AttentionLayout::single(6, 9), constant(w), &wb);
  Tensor expected = oracle::add_bias(oracle::matmul(oracle::attention(q, k, v, 3), w), bias);
  EXPECT_LT(max_abs_diff(out.value(), expected), 1e-10);
}

TEST(MultiHeadAttention, SingleHeadIdentityProjectionEqualsOracle) {
  std::mt19937_64 rng(10);
  Tensor q = Tensor::uniform({3, 5}, -1, 1, rng);
  Tensor k = Tensor::uniform({7, 5}, -1, 1, rng);
  Tensor v = Tensor::uniform({7, 5}, -1, 1, rng);
  Var out = multi_head_attention(constant(q), constant(k), constant(v), 1,
                                 AttentionLayout::single(3, 7), constant(Tensor::identity(5)));
  EXPECT_LT(max_abs_diff(out.value(), oracle::attention(q, k, v, 1)), 1e-10);
}

TEST(MultiHeadAttention, WidthNotDivisibleByHeadsIsConfigError) {
  Tensor x({2, 6}, 0.1);
  EXPECT_THROW(attention(constant(x), constant(x), constant(x), 4, AttentionLayout::single(2, 2)),
               ConfigError);
}

TEST(MultiHeadAttention, SegmentsAndKeyMask) {
  std::mt19937_64 rng(11);
  Tensor q = Tensor::uniform({5, 4}, -1, 1, rng);
  Tensor k = Tensor::uniform({5, 4}, -1, 1, rng);
  Tensor v = Tensor::uniform({5, 4}, -1, 1, rng);
  AttentionLayout layout;
  layout.segments = {{0, 2, 0, 2}, {2, 3, 2, 3}};
  layout.key_mask = {1, 1, 1, 0, 1};
  Var out = attention(constant(q), constant(k), constant(v), 2, layout);
  Tensor first = oracle::attention(q.rows_slice(0, 2), k.rows_slice(0, 2), v.rows_slice(0, 2), 2);
  Tensor second = oracle::attention(q.rows_slice(2, 3), k.rows_slice(2, 3), v.rows_slice(2, 3), 2,
                                    {1, 0, 1});
  EXPECT_LT(max_abs_diff(out.value().rows_slice(0, 2), first), 1e-12);
  EXPECT_LT(max_abs_diff(out.value().rows_slice(2, 3), second), 1e-12);
}

TEST(GradCheck, SumHasAllOnesGradient) {
  std::mt19937_64 rng(12);
  Parameter x = random_param({3, 3}, rng);
  std::vector<Parameter*> params{&x};
  auto report = grad_check([&](Tape* t) { return sum(bind(t, x)); }, params);
  EXPECT_LT(report.max_relative_error, 1e-9);
  Tape tape;
  Var s = sum(tape.param(x));
  tape.backward(s);
  for (double g : tape.grad(x)->data()) EXPECT_EQ(g, 1.0);
}

TEST(GradCheck, NonFiniteLossIsRejected) {
  Parameter x{Tensor::vector({1.0})};
  std::vector<Parameter*> params{&x};
  EXPECT_THROW(grad_check(
                   [&](Tape* t) {
                     return scale(sum(bind(t, x)), std::numeric_limits<double>::infinity());
                   },
                   params),
               NumericError);
}

// Every primitive and fused loss on random inputs in [-1, 1].
TEST(GradCheck, EveryPrimitiveMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 3; ++trial) {
    Parameter a = random_param({4, 6}, rng);
    Parameter b = random_param({4, 6}, rng);
    Parameter m = random_param({6, 3}, rng);
    Parameter bias = random_param({6}, rng);
    Parameter gain = random_param({6}, rng);
    Parameter k = random_param({5, 6}, rng);
    Parameter v = random_param({5, 6}, rng);
    const Tensor w46 = Tensor::uniform({4, 6}, -1, 1, rng);
    const Tensor w36 = Tensor::uniform({3, 6}, -1, 1, rng);
    const Tensor target = Tensor::uniform({4, 6}, -1, 1, rng);
    std::vector<Parameter*> all{&a, &b, &m, &bias, &gain, &k, &v};

    const std::vector<std::pair<const char*, LossFn>> cases = {
        {"matmul",
         [&](Tape* t) { return weighted_sum(matmul(matmul(bind(t, a), bind(t, m)), constant(w36)), w46); }},
        {"add_sub_hadamard_scale",
         [&](Tape* t) {
           return weighted_sum(scale(hadamard(add(bind(t, a), bind(t, b)), sub(bind(t, a), bind(t, b))), 0.7), w46);
         }},
        {"add_bias", [&](Tape* t) { return weighted_sum(add_bias(bind(t, a), bind(t, bias)), w46); }},
        {"row_softmax", [&](Tape* t) { return weighted_sum(row_softmax(bind(t, a)), w46); }},
        {"layer_norm",
         [&](Tape* t) { return weighted_sum(layer_norm(bind(t, a), bind(t, gain), bind(t, bias)), w46); }},
        {"gelu", [&](Tape* t) { return weighted_sum(gelu(bind(t, a)), w46); }},
        {"slice_gather_concat",
         [&](Tape* t) {
           const std::vector<std::size_t> idx{3, 0, 3, 1};
           std::vector<Var> parts{slice_rows(bind(t, a), 1, 2), gather_rows(bind(t, b), idx)};
           return weighted_sum(slice_rows(concat_rows(parts), 1, 4), w46);
         }},
        {"attention",
         [&](Tape* t) {
           AttentionLayout layout;
           layout.segments = {{0, 4, 0, 5}, {1, 2, 2, 3}};
           layout.key_mask = {1, 1, 0, 1, 1};
           Var out = attention(bind(t, a), bind(t, k), bind(t, v), 2, layout);
           return weighted_sum(slice_rows(out, 0, 4), w46);
         }},
        {"bce_with_logits",
         [&](Tape* t) {
           const std::vector<double> y{1, 0, 0.3, 0.9, 0.5, 0, 1, 1, 0.2, 0.1, 0, 0.7};
           return bce_with_logits(matmul(bind(t, a), bind(t, m)), y);
         }},
        {"cross_entropy",
         [&](Tape* t) {
           const std::vector<std::size_t> y{2, 0, 1, 1};
           return cross_entropy(matmul(bind(t, a), bind(t, m)), y);
         }},
        {"cosine_distance", [&](Tape* t) { return cosine_distance(bind(t, a), target); }},
    };
    for (const auto& [name, fn] : cases) {
      auto report = grad_check(fn, all);
      EXPECT_LE(report.max_relative_error, 1e-4) << name << " trial " << trial;
    }
  }
}

TEST(Tape, ReverseSweepVisitsEachOperationOnce) {
  std::mt19937_64 rng(14);
  Parameter a = random_param({2, 3}, rng);
  Parameter unused = random_param({2, 3}, rng);
  Tape tape;
  Var x = tape.param(a);
  Var y = gelu(matmul(x, constant(Tensor::uniform({3, 3}, -1, 1, rng))));
  Var loss = sum(add(y, y));
  tape.backward(loss);
  EXPECT_EQ(tape.backward_visits(), tape.op_count());
  EXPECT_NE(tape.grad(a), nullptr);
  EXPECT_EQ(tape.grad(unused), nullptr);
  EXPECT_THROW(tape.backward(loss), ConfigError);
}

TEST(Tape, ForwardIsBitDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(15);
    Tensor q = Tensor::uniform({7, 8}, -1, 1, rng);
    Tensor k = Tensor::uniform({9, 8}, -1, 1, rng);
    Var out = gelu(attention(constant(q), constant(k), constant(k), 2, AttentionLayout::single(7, 9)));
    return out.value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, RepeatedParameterUseAccumulates) {
  Parameter p{Tensor::vector({2.0})};
  Tape tape;
  Var x = tape.param(p);
  Var y = hadamard(x, tape.param(p));
  tape.backward(sum(y));
  EXPECT_DOUBLE_EQ((*tape.grad(p))[0], 4.0);
}

}  // namespace
}  // namespace edje
