#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "edje/adapter.hpp"
#include "edje/errors.hpp"
#include "edje/gradcheck.hpp"
#include "oracles.hpp"

namespace edje {
namespace {

CompressionAdapterConfig small_compression() {
  CompressionAdapterConfig c;
  c.tokens = 3;
  c.d_vision = 8;
  c.d_language = 6;
  c.hidden = 16;
  c.heads = 2;
  return c;
}

std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

TEST(Compress, SingleTokenGivesIdenticalRows) {
  std::mt19937_64 rng(1);
  auto params = CompressionAdapterParams::init(small_compression(), rng);
  Tensor x = Tensor::uniform({1, 8}, -1, 1, rng);
  Tensor y = compress(x, params);
  ASSERT_EQ(y.shape(), (Shape{3, 6}));
  for (std::size_t r = 1; r < 3; ++r)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(y(r, c), y(0, c), 1e-12);
}

TEST(Compress, OutputRowCountIndependentOfInputLength) {
  std::mt19937_64 rng(2);
  auto params = CompressionAdapterParams::init(small_compression(), rng);
  for (std::size_t n : {1u, 7u, 50u, 576u}) {
    Tensor y = compress(Tensor::uniform({n, 8}, -1, 1, rng), params);
    EXPECT_EQ(y.shape(), (Shape{3, 6})) << "n=" << n;
  }
}

TEST(Compress, AttentionRowsSumToOne) {
  std::mt19937_64 rng(3);
  auto params = CompressionAdapterParams::init(small_compression(), rng);
  Tensor x = Tensor::uniform({11, 8}, -1, 1, rng);
  auto probs = compression_attention(x, params);
  ASSERT_EQ(probs.size(), 2u);
  for (const Tensor& p : probs) {
    ASSERT_EQ(p.shape(), (Shape{3, 11}));
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0.0;
      for (double v : p.row(r)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Compress, InvariantToInputRowPermutation) {
  std::mt19937_64 rng(4);
  auto params = CompressionAdapterParams::init(small_compression(), rng);
  Tensor x = Tensor::uniform({13, 8}, -1, 1, rng);
  Tensor y = compress(x, params);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor shuffled = oracle::permute_rows(x, random_permutation(13, rng));
    EXPECT_LT(max_abs_diff(compress(shuffled, params), y), 1e-10);
  }
}

TEST(Compress, BatchedMatchesPerImage) {
  std::mt19937_64 rng(5);
  auto params = CompressionAdapterParams::init(small_compression(), rng);
  Tensor a = Tensor::uniform({4, 8}, -1, 1, rng);
  Tensor b = Tensor::uniform({9, 8}, -1, 1, rng);
  std::vector<Var> parts{constant(a), constant(b)};
  const std::size_t counts[] = {4, 9};
  Tensor both = compress(nullptr, concat_rows(parts), counts, params).value();
  EXPECT_LT(max_abs_diff(both.rows_slice(0, 3), compress(a, params)), 1e-12);
  EXPECT_LT(max_abs_diff(both.rows_slice(3, 3), compress(b, params)), 1e-12);
}

TEST(Compress, WithoutOutputProjection) {
  std::mt19937_64 rng(6);
  auto cfg = small_compression();
  cfg.out_proj = false;
  cfg.mlp_bias = false;
  auto params = CompressionAdapterParams::init(cfg, rng);
  Tensor x = Tensor::uniform({5, 8}, -1, 1, rng);
  EXPECT_LT(max_abs_diff(compress(x, params), oracle::compress(x, params)), 1e-12);
}

TEST(Compress, DefaultShapeMatchesNaiveLoopOracle) {
  std::mt19937_64 rng(7);
  CompressionAdapterConfig cfg;  // m=64, d_vision=1024, d_language=384, hidden=8192
  auto params = CompressionAdapterParams::init(cfg, rng);
  // Nonzero biases and gains so every term is exercised.
  params.mlp_b1.value = Tensor::uniform({cfg.hidden}, -0.1, 0.1, rng);
  params.mlp_b2.value = Tensor::uniform({cfg.d_vision}, -0.1, 0.1, rng);
  params.ln_gain.value = Tensor::uniform({cfg.d_vision}, 0.5, 1.5, rng);
  params.query.value = Tensor::randn({64, 1024}, 1.0, rng);
  Tensor x = Tensor::uniform({576, 1024}, -1, 1, rng);
  Tensor y = compress(x, params);
  ASSERT_EQ(y.shape(), (Shape{64, 384}));
  EXPECT_LT(max_abs_diff(y, oracle::compress(x, params)), 1e-10);
}

TEST(Compress, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  auto cfg = small_compression();
  cfg.d_vision = 4;
  cfg.hidden = 6;
  cfg.d_language = 3;
  auto params = CompressionAdapterParams::init(cfg, rng);
  params.query.value = Tensor::randn({3, 4}, 1.0, rng);
  Parameter x{Tensor::uniform({7, 4}, -1, 1, rng)};
  const Tensor w = Tensor::uniform({6, 3}, -1, 1, rng);
  std::vector<Parameter*> all{&x};
  for (auto& [name, p] : params.named_parameters()) all.push_back(p);
  const std::size_t counts[] = {3, 4};
  auto report = grad_check(
      [&](Tape* t) {
        Var y = compress(t, bind(t, x), counts, params);
        return sum(hadamard(y, constant(w)));
      },
      all);
  EXPECT_LE(report.max_relative_error, 1e-4);
}

TEST(Compress, DimensionMismatchIsConfigError) {
  std::mt19937_64 rng(9);
  auto params = CompressionAdapterParams::init(small_compression(), rng);
  EXPECT_THROW(compress(Tensor({4, 7}, 0.0), params), ConfigError);
  auto bad = small_compression();
  bad.heads = 3;
  EXPECT_THROW(CompressionAdapterParams::init(bad, rng), ConfigError);
}

TEST(LocalProject, PermutingRowsPermutesOutput) {
  std::mt19937_64 rng(10);
  LocalAdapterConfig cfg{8, 5, 12};
  auto params = LocalAdapterParams::init(cfg, rng);
  Tensor x = Tensor::uniform({6, 8}, -1, 1, rng);
  Tensor y = local_project(x, params);
  ASSERT_EQ(y.shape(), (Shape{6, 5}));
  auto perm = random_permutation(6, rng);
  EXPECT_LT(max_abs_diff(local_project(oracle::permute_rows(x, perm), params),
                         oracle::permute_rows(y, perm)),
            1e-14);
}

TEST(LocalProject, ZeroInputZeroBiasGivesZero) {
  std::mt19937_64 rng(11);
  auto params = LocalAdapterParams::init(LocalAdapterConfig{8, 5, 12}, rng);
  Tensor y = local_project(Tensor({4, 8}, 0.0), params);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LocalProject, MatchesNaiveLoopOracle) {
  std::mt19937_64 rng(12);
  auto params = LocalAdapterParams::init(LocalAdapterConfig{8, 4, 10}, rng);
  params.b1.value = Tensor::uniform({10}, -1, 1, rng);
  params.b2.value = Tensor::uniform({4}, -1, 1, rng);
  params.ln_bias.value = Tensor::uniform({8}, -1, 1, rng);
  Tensor x = Tensor::uniform({3, 8}, -1, 1, rng);
  EXPECT_LT(max_abs_diff(local_project(x, params), oracle::local_project(x, params)), 1e-10);
}

TEST(LocalProject, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  auto params = LocalAdapterParams::init(LocalAdapterConfig{4, 3, 5}, rng);
  Parameter x{Tensor::uniform({3, 4}, -1, 1, rng)};
  const Tensor w = Tensor::uniform({3, 3}, -1, 1, rng);
  std::vector<Parameter*> all{&x};
  for (auto& [name, p] : params.named_parameters()) all.push_back(p);
  auto report = grad_check(
      [&](Tape* t) { return sum(hadamard(local_project(t, bind(t, x), params), constant(w))); }, all);
  EXPECT_LE(report.max_relative_error, 1e-4);
}

TEST(LocalProject, WidthMismatchIsConfigError) {
  std::mt19937_64 rng(14);
  auto params = LocalAdapterParams::init(LocalAdapterConfig{8, 4, 10}, rng);
  EXPECT_THROW(local_project(Tensor({2, 5}, 1.0), params), ConfigError);
}

TEST(AdapterParamCount, LocalArithmetic) {
  std::mt19937_64 rng(15);
  LocalAdapterConfig cfg{4, 2, 8};
  cfg.norm = false;
  cfg.bias = false;
  EXPECT_EQ(adapter_param_count(LocalAdapterParams::init(cfg, rng)), 4u * 8 + 8 * 2);
  cfg.bias = true;
  EXPECT_EQ(adapter_param_count(LocalAdapterParams::init(cfg, rng)), 4u * 8 + 8 * 2 + 8 + 2);
  cfg.norm = true;
  EXPECT_EQ(adapter_param_count(LocalAdapterParams::init(cfg, rng)), 4u * 8 + 8 * 2 + 8 + 2 + 2 * 4);
}

TEST(AdapterParamCount, DefaultCompressionConfigIsExactAndStable) {
  CompressionAdapterConfig cfg;
  const std::size_t m = 64, dv = 1024, h = 8192, dl = 384;
  const std::size_t expected = m * dv          // query tokens
                               + 3 * dv * dv   // W_K, W_V, output projection
                               + 2 * dv        // layer norm
                               + dv * h + h    // MLP in
                               + h * dv + dv   // MLP out
                               + dv * dl;      // W_proj
  std::mt19937_64 rng_a(1), rng_b(2);
  EXPECT_EQ(adapter_param_count(CompressionAdapterParams::init(cfg, rng_a)), expected);
  EXPECT_EQ(adapter_param_count(CompressionAdapterParams::init(cfg, rng_b)), expected);
}

}  // namespace
}  // namespace edje
