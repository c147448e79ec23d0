#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "edje/adapter.hpp"
#include "edje/autograd.hpp"
#include "edje/tokenizer.hpp"

namespace edje {

struct EncoderConfig {
  std::size_t layers = 12;
  std::size_t hidden = 384;  // d_language
  std::size_t heads = 12;
  std::size_t mlp_hidden = 1536;
  std::size_t vocab_size = 30522;
  std::size_t max_text_len = 64;
  std::size_t text_embedding_dim = 512;
  /// Learned positions for vision tokens; 0 leaves vision rows without any.
  std::size_t vision_positions = 0;
  double ln_eps = 1e-5;

  void validate() const;
  /// [CLS], [SEP], up to max_text_len - 2 words, [SEP].
  std::size_t max_positions() const { return max_text_len + 1; }
};

enum class Modality : unsigned char { kSpecial, kVision, kText };

/// Position-level description of [CLS] vision... [SEP] text... [SEP] [PAD]...
struct SequenceLayout {
  std::vector<TokenId> token_ids;  // kPad at vision positions
  std::vector<Modality> tags;
  std::vector<unsigned char> attention_mask;
  std::vector<std::size_t> position_ids;  // 0 at vision and padding positions
  std::vector<std::size_t> maskable;      // text positions, never vision
  std::size_t vision_count = 0;
  std::size_t text_count = 0;

  std::size_t length() const noexcept { return tags.size(); }
  std::size_t vision_begin() const noexcept { return 1; }
  /// Positions currently holding [MASK], in order.
  std::vector<std::size_t> masked_positions() const;
};

SequenceLayout make_layout(std::size_t vision_count, const TokenizedText& text,
                           std::size_t pad_to = 0);

struct LayerParams {
  Parameter ln1_gain, ln1_bias;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln2_gain, ln2_bias;
  Parameter w1, b1, w2, b2;
};

struct EncoderParams {
  EncoderConfig config;
  Parameter token_embedding;     // vocab x d
  Parameter position_embedding;  // max_positions x d
  Parameter type_embedding;      // 2 x d: row 0 text/special, row 1 vision
  Parameter vision_position_embedding;  // vision_positions x d when enabled
  Parameter embed_gain, embed_bias;
  std::vector<LayerParams> layers;
  Parameter final_gain, final_bias;
  Parameter itm_w, itm_b;            // d x 1, 1
  Parameter mlm_w, mlm_b;            // d x vocab, vocab
  Parameter recovery_w, recovery_b;  // d x d_text_embedding, d_text_embedding

  static EncoderParams init(const EncoderConfig& config, std::mt19937_64& rng);

  NamedParams named_parameters(const std::string& prefix = "encoder.");
  ConstNamedParams named_parameters(const std::string& prefix = "encoder.") const;
};

struct JointSequence {
  SequenceLayout layout;
  Tensor embedded;  // length x d_language
};

/// Lays out and embeds one sequence; `vision` may be empty for text-only input.
JointSequence build_joint_sequence(const Tensor& vision, const TokenizedText& text,
                                   const EncoderParams& params, std::size_t pad_to = 0);

/// Embeds several sequences into one stacked matrix (sequence i starts at
/// the sum of the preceding lengths). `vision[i]` is ignored when the
/// layout has no vision tokens.
Var embed_sequences(Tape* tape, std::span<const SequenceLayout> layouts,
                    std::span<const Var> vision, const EncoderParams& params);

/// Pre-norm transformer stack over stacked embedded sequences. Padded keys
/// are masked out of attention; each sequence attends only within itself.
Var encode_embedded(Tape* tape, const Var& embedded, std::span<const SequenceLayout> layouts,
                    const EncoderParams& params);

struct EncodedBatch {
  Var hidden;
  std::vector<std::size_t> offsets;  // first row of each sequence
};

EncodedBatch encode_batch(Tape* tape, std::span<const SequenceLayout> layouts,
                          std::span<const Var> vision, const EncoderParams& params);

Tensor encode(const JointSequence& seq, const EncoderParams& params);

/// Head inputs are rows of an encoded matrix: [CLS] rows for ITM and
/// recovery, masked rows for MLM.
Var itm_head(Tape* tape, const Var& hidden, std::span<const std::size_t> cls_rows,
             const EncoderParams& params);
Var mlm_head(Tape* tape, const Var& hidden, std::span<const std::size_t> masked_rows,
             const EncoderParams& params);
Var recovery_head(Tape* tape, const Var& hidden, std::span<const std::size_t> cls_rows,
                  const EncoderParams& params);

std::vector<std::size_t> cls_rows(const EncodedBatch& batch);
std::vector<std::size_t> masked_rows(const EncodedBatch& batch,
                                     std::span<const SequenceLayout> layouts);

double itm_logit(const JointSequence& seq, const EncoderParams& params);
/// (number of [MASK] positions) x vocab; empty tensor when nothing is masked.
Tensor mlm_logits(const JointSequence& seq, const EncoderParams& params);
/// Text-only pass, projected [CLS] state.
Tensor recover_text_embedding(const TokenizedText& text, const EncoderParams& params);

}  // namespace edje
