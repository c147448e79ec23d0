#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "edje/encoder.hpp"
#include "edje/errors.hpp"
#include "edje/gradcheck.hpp"
#include "oracles.hpp"

namespace edje {
namespace {

EncoderConfig toy_config() {
  EncoderConfig c;
  c.layers = 2;
  c.hidden = 8;
  c.heads = 2;
  c.mlp_hidden = 16;
  c.vocab_size = 12;
  c.max_text_len = 16;
  c.text_embedding_dim = 5;
  return c;
}

TokenizedText text_of(std::vector<TokenId> content) {
  TokenizedText t;
  t.ids.push_back(Vocabulary::kCls);
  t.ids.insert(t.ids.end(), content.begin(), content.end());
  t.ids.push_back(Vocabulary::kSep);
  t.attention_mask.assign(t.ids.size(), 1);
  return t;
}

/// Embedding sum before the embedding layer norm, one row at a time.
Tensor naive_embedding(const Tensor& vision, const SequenceLayout& s, const EncoderParams& p) {
  const std::size_t d = p.config.hidden;
  Tensor x({s.length(), d});
  std::size_t v = 0;
  for (std::size_t i = 0; i < s.length(); ++i) {
    const bool is_vision = s.tags[i] == Modality::kVision;
    for (std::size_t c = 0; c < d; ++c) {
      double e = p.type_embedding.value(is_vision ? 1 : 0, c);
      if (is_vision) {
        e += vision(v, c);
      } else {
        e += p.token_embedding.value(s.token_ids[i], c) + p.position_embedding.value(s.position_ids[i], c);
      }
      x(i, c) = e;
    }
    if (is_vision) ++v;
  }
  return oracle::layer_norm(x, p.embed_gain.value, p.embed_bias.value, p.config.ln_eps);
}

TEST(Layout, LengthAndTags) {
  const auto text = text_of({5, 6, 7, 8, 9, 10, 11, 5, 6, 7});
  const auto s = make_layout(64, text);
  EXPECT_EQ(s.length(), 77u);
  EXPECT_EQ(std::count(s.tags.begin(), s.tags.end(), Modality::kVision), 64);
  EXPECT_EQ(std::count(s.tags.begin(), s.tags.end(), Modality::kText), 10);
  EXPECT_EQ(std::count(s.tags.begin(), s.tags.end(), Modality::kSpecial), 3);
  EXPECT_EQ(s.token_ids[0], Vocabulary::kCls);
  EXPECT_EQ(s.token_ids[65], Vocabulary::kSep);
  EXPECT_EQ(s.token_ids[76], Vocabulary::kSep);
  for (std::size_t i = 1; i <= 64; ++i) EXPECT_EQ(s.tags[i], Modality::kVision);
  ASSERT_EQ(s.maskable.size(), 10u);
  for (std::size_t p : s.maskable) EXPECT_EQ(s.tags[p], Modality::kText);
}

TEST(Layout, TextOnly) {
  const auto s = make_layout(0, text_of({5, 6}));
  EXPECT_EQ(s.token_ids, (std::vector<TokenId>{Vocabulary::kCls, Vocabulary::kSep, 5, 6, Vocabulary::kSep}));
  EXPECT_EQ(s.position_ids, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(Layout, PaddingIsMaskedAndNeverMaskable) {
  const auto s = make_layout(3, text_of({5, 6}), 12);
  EXPECT_EQ(s.length(), 12u);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(s.attention_mask[i], i < 8 ? 1 : 0);
  EXPECT_EQ(s.maskable, (std::vector<std::size_t>{5, 6}));
}

TEST(Layout, MaskedPositionsFollowMaskTokens) {
  auto s = make_layout(2, text_of({5, Vocabulary::kMask, 7, Vocabulary::kMask}));
  EXPECT_EQ(s.masked_positions(), (std::vector<std::size_t>{5, 7}));
}

TEST(JointSequence, EmbeddingMatchesNaiveSum) {
  std::mt19937_64 rng(3);
  auto params = EncoderParams::init(toy_config(), rng);
  const Tensor vision = Tensor::randn({4, 8}, 1.0, rng);
  const auto seq = build_joint_sequence(vision, text_of({5, 9, 11}), params, 13);
  const Tensor expected = naive_embedding(vision, seq.layout, params);
  EXPECT_LE(max_abs_diff(seq.embedded, expected), 1e-12);
}

TEST(JointSequence, WidthMismatchIsConfigError) {
  std::mt19937_64 rng(4);
  auto params = EncoderParams::init(toy_config(), rng);
  EXPECT_THROW(build_joint_sequence(Tensor({4, 7}, 0.0), text_of({5}), params), ConfigError);
}

TEST(JointSequence, VisionPositionToggle) {
  auto cfg = toy_config();
  cfg.vision_positions = 4;
  std::mt19937_64 rng(5);
  auto params = EncoderParams::init(cfg, rng);
  const Tensor vision = Tensor::randn({4, 8}, 1.0, rng);
  auto with = build_joint_sequence(vision, text_of({5}), params);
  params.vision_position_embedding.value = Tensor({4, 8}, 0.0);
  auto without = build_joint_sequence(vision, text_of({5}), params);
  EXPECT_GT(max_abs_diff(with.embedded, without.embedded), 1e-6);
  EXPECT_THROW(build_joint_sequence(Tensor::randn({5, 8}, 1.0, rng), text_of({5}), params), ConfigError);
}

TEST(Encode, MatchesNaiveOracle) {
  std::mt19937_64 rng(6);
  auto params = EncoderParams::init(toy_config(), rng);
  const Tensor vision = Tensor::randn({3, 8}, 1.0, rng);
  const auto seq = build_joint_sequence(vision, text_of({5, 6, 7, 8}), params, 14);
  const Tensor h = encode(seq, params);
  const Tensor expected = oracle::encode(seq.embedded, seq.layout.attention_mask, params);
  EXPECT_LE(max_abs_diff(h, expected), 1e-9);
}

TEST(Encode, PaddingInvariance) {
  std::mt19937_64 rng(7);
  auto params = EncoderParams::init(toy_config(), rng);
  const Tensor vision = Tensor::randn({3, 8}, 1.0, rng);
  const auto text = text_of({5, 6, 7});
  const auto short_seq = build_joint_sequence(vision, text, params);
  const Tensor a = encode(short_seq, params);
  for (std::size_t pad : {9u, 10u, 20u, 40u}) {
    const Tensor b = encode(build_joint_sequence(vision, text, params, pad), params);
    EXPECT_LE(max_abs_diff(a, b.rows_slice(0, a.rows())), 1e-10) << "pad " << pad;
    EXPECT_NEAR(itm_logit(build_joint_sequence(vision, text, params, pad), params),
                itm_logit(short_seq, params), 1e-10);
  }
}

TEST(Encode, BatchMatchesSingle) {
  std::mt19937_64 rng(8);
  auto params = EncoderParams::init(toy_config(), rng);
  const Tensor v1 = Tensor::randn({3, 8}, 1.0, rng);
  const Tensor v2 = Tensor::randn({3, 8}, 1.0, rng);
  std::vector<SequenceLayout> layouts{make_layout(3, text_of({5, 6}), 10), make_layout(3, text_of({7, 8, 9, 10}))};
  std::vector<Var> vision{constant_ref(v1), constant_ref(v2)};
  auto batch = encode_batch(nullptr, layouts, vision, params);
  const Tensor a = encode(build_joint_sequence(v1, text_of({5, 6}), params, 10), params);
  const Tensor b = encode(build_joint_sequence(v2, text_of({7, 8, 9, 10}), params), params);
  EXPECT_EQ(batch.offsets, (std::vector<std::size_t>{0, 10}));
  EXPECT_LE(max_abs_diff(batch.hidden.value().rows_slice(0, 10), a), 1e-12);
  EXPECT_LE(max_abs_diff(batch.hidden.value().rows_slice(10, 10), b), 1e-12);
}

TEST(Encode, Deterministic) {
  std::mt19937_64 rng(9);
  auto params = EncoderParams::init(toy_config(), rng);
  const auto seq = build_joint_sequence(Tensor::randn({2, 8}, 1.0, rng), text_of({5, 6}), params);
  EXPECT_EQ(encode(seq, params), encode(seq, params));
}

TEST(Heads, ZeroItmHeadGivesHalf) {
  std::mt19937_64 rng(10);
  auto params = EncoderParams::init(toy_config(), rng);
  params.itm_w.value = Tensor({8, 1}, 0.0);
  const auto seq = build_joint_sequence(Tensor::randn({2, 8}, 1.0, rng), text_of({5, 6}), params);
  const double z = itm_logit(seq, params);
  EXPECT_EQ(z, 0.0);
  EXPECT_EQ(oracle::sigmoid(z), 0.5);
}

TEST(Heads, ZeroMlmHeadGivesUniform) {
  std::mt19937_64 rng(11);
  auto params = EncoderParams::init(toy_config(), rng);
  params.mlm_w.value = Tensor({8, 12}, 0.0);
  const auto seq = build_joint_sequence(Tensor::randn({2, 8}, 1.0, rng),
                                        text_of({5, Vocabulary::kMask, 6, Vocabulary::kMask}), params);
  const Tensor logits = mlm_logits(seq, params);
  ASSERT_EQ(logits.shape(), (Shape{2, 12}));
  const Tensor probs = row_softmax(constant_ref(logits)).value();
  for (double p : probs.data()) EXPECT_NEAR(p, 1.0 / 12.0, 1e-15);
}

TEST(Heads, NoMaskGivesEmptyLogits) {
  std::mt19937_64 rng(12);
  auto params = EncoderParams::init(toy_config(), rng);
  const auto seq = build_joint_sequence(Tensor::randn({2, 8}, 1.0, rng), text_of({5, 6}), params);
  EXPECT_TRUE(mlm_logits(seq, params).empty());
}

TEST(Heads, ReadOnlyTheirRows) {
  std::mt19937_64 rng(13);
  auto params = EncoderParams::init(toy_config(), rng);
  const auto seq = build_joint_sequence(Tensor::randn({3, 8}, 1.0, rng),
                                        text_of({5, Vocabulary::kMask, 6}), params, 12);
  const Tensor h = encode(seq, params);
  Tensor perturbed = h;
  const auto masked = seq.layout.masked_positions();
  for (std::size_t r = 1; r < h.rows(); ++r) {
    if (std::find(masked.begin(), masked.end(), r) != masked.end()) continue;
    for (std::size_t c = 0; c < h.cols(); ++c) perturbed(r, c) += 3.0 + static_cast<double>(r);
  }
  const std::size_t cls[] = {0};
  EXPECT_EQ(itm_head(nullptr, constant_ref(h), cls, params).value(),
            itm_head(nullptr, constant_ref(perturbed), cls, params).value());
  EXPECT_EQ(recovery_head(nullptr, constant_ref(h), cls, params).value(),
            recovery_head(nullptr, constant_ref(perturbed), cls, params).value());
  EXPECT_EQ(mlm_head(nullptr, constant_ref(h), masked, params).value(),
            mlm_head(nullptr, constant_ref(perturbed), masked, params).value());
}

TEST(Heads, RecoveryShapeAndSelfCosine) {
  std::mt19937_64 rng(14);
  auto params = EncoderParams::init(toy_config(), rng);
  const Tensor e = recover_text_embedding(text_of({5, 6, 7}), params);
  ASSERT_EQ(e.shape(), (Shape{5}));
  const Tensor row = e.reshaped({1, 5});
  EXPECT_NEAR(scalar(cosine_distance(constant_ref(row), row)), 0.0, 1e-15);
}

TEST(Heads, TokenOutsideVocabularyIsDataError) {
  std::mt19937_64 rng(15);
  auto params = EncoderParams::init(toy_config(), rng);
  EXPECT_THROW(build_joint_sequence(Tensor(), text_of({12}), params), DataError);
}

class HeadGradients : public ::testing::Test {
 protected:
  void SetUp() override {
    std::mt19937_64 rng(16);
    params = EncoderParams::init(toy_config(), rng);
    // Non-trivial bias and gain values so their gradients are exercised.
    for (auto& [name, p] : params.named_parameters()) {
      if (!p->decay) p->value = add(constant_ref(p->value), constant(Tensor::randn(p->value.shape(), 0.1, rng))).value();
    }
    v1 = Parameter{Tensor::randn({2, 8}, 1.0, rng)};
    v2 = Parameter{Tensor::randn({2, 8}, 1.0, rng)};
    layouts = {make_layout(2, text_of({5, Vocabulary::kMask, 7}), 9),
               make_layout(2, text_of({Vocabulary::kMask, 9}))};
    all = {&v1, &v2};
    for (auto& [name, p] : params.named_parameters()) all.push_back(p);
  }

  EncodedBatch run(Tape* t) {
    std::vector<Var> vision{bind(t, v1), bind(t, v2)};
    return encode_batch(t, layouts, vision, params);
  }

  EncoderParams params;
  Parameter v1, v2;
  std::vector<SequenceLayout> layouts;
  std::vector<Parameter*> all;
};

TEST_F(HeadGradients, Itm) {
  const double targets[] = {1.0, 0.0};
  auto report = grad_check(
      [&](Tape* t) {
        auto b = run(t);
        return bce_with_logits(itm_head(t, b.hidden, cls_rows(b), params), targets);
      },
      all);
  EXPECT_LE(report.max_relative_error, 1e-4);
  EXPECT_GT(report.checked, 1000u);
}

TEST_F(HeadGradients, Mlm) {
  const std::size_t targets[] = {6, 8};
  auto report = grad_check(
      [&](Tape* t) {
        auto b = run(t);
        return cross_entropy(mlm_head(t, b.hidden, masked_rows(b, layouts), params), targets);
      },
      all);
  EXPECT_LE(report.max_relative_error, 1e-4);
}

TEST_F(HeadGradients, Recovery) {
  std::mt19937_64 rng(17);
  const Tensor target = Tensor::randn({2, 5}, 1.0, rng);
  layouts = {make_layout(0, text_of({5, 6, 7}), 8), make_layout(0, text_of({9}))};
  auto report = grad_check(
      [&](Tape* t) {
        std::vector<Var> none(2);
        auto b = encode_batch(t, layouts, none, params);
        return cosine_distance(recovery_head(t, b.hidden, cls_rows(b), params), target);
      },
      all);
  EXPECT_LE(report.max_relative_error, 1e-4);
}

}  // namespace
}  // namespace edje
