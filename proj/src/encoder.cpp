#include "edje/encoder.hpp"

#include "edje/errors.hpp"
#include "edje/init.hpp"

namespace edje {

void EncoderConfig::validate() const {
  if (layers == 0 || hidden == 0 || mlp_hidden == 0 || text_embedding_dim == 0) {
    throw ConfigError("encoder layers, hidden, mlp_hidden and text_embedding_dim must be positive");
  }
  if (heads == 0 || hidden % heads != 0) {
    throw ConfigError("encoder hidden " + std::to_string(hidden) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (vocab_size < Vocabulary::kReserved) {
    throw ConfigError("encoder vocab_size " + std::to_string(vocab_size) +
                      " smaller than the reserved token count");
  }
  if (max_text_len < 3) throw ConfigError("encoder max_text_len must be at least 3");
}

std::vector<std::size_t> SequenceLayout::masked_positions() const {
  std::vector<std::size_t> out;
  for (std::size_t p : maskable) {
    if (token_ids[p] == Vocabulary::kMask) out.push_back(p);
  }
  return out;
}

SequenceLayout make_layout(std::size_t vision_count, const TokenizedText& text, std::size_t pad_to) {
  if (text.ids.size() < 2 || text.ids.front() != Vocabulary::kCls ||
      text.ids.back() != Vocabulary::kSep) {
    throw DataError("make_layout: text must be [CLS] ... [SEP]");
  }
  SequenceLayout s;
  s.vision_count = vision_count;
  s.text_count = text.content_size();
  auto push = [&s](TokenId id, Modality tag, std::size_t pos) {
    s.token_ids.push_back(id);
    s.tags.push_back(tag);
    s.attention_mask.push_back(1);
    s.position_ids.push_back(pos);
  };
  push(Vocabulary::kCls, Modality::kSpecial, 0);
  for (std::size_t i = 0; i < vision_count; ++i) push(Vocabulary::kPad, Modality::kVision, 0);
  push(Vocabulary::kSep, Modality::kSpecial, 1);
  std::size_t pos = 2;
  for (TokenId id : text.content()) {
    s.maskable.push_back(s.tags.size());
    push(id, Modality::kText, pos++);
  }
  push(Vocabulary::kSep, Modality::kSpecial, pos);
  while (s.tags.size() < pad_to) {
    s.token_ids.push_back(Vocabulary::kPad);
    s.tags.push_back(Modality::kSpecial);
    s.attention_mask.push_back(0);
    s.position_ids.push_back(0);
  }
  return s;
}

EncoderParams EncoderParams::init(const EncoderConfig& config, std::mt19937_64& rng) {
  config.validate();
  const std::size_t d = config.hidden;
  EncoderParams p;
  p.config = config;
  p.token_embedding = Parameter{Tensor::randn({config.vocab_size, d}, 0.02, rng), false};
  p.position_embedding = Parameter{Tensor::randn({config.max_positions(), d}, 0.02, rng), false};
  p.type_embedding = Parameter{Tensor::randn({2, d}, 0.02, rng), false};
  if (config.vision_positions > 0) {
    p.vision_position_embedding =
        Parameter{Tensor::randn({config.vision_positions, d}, 0.02, rng), false};
  }
  p.embed_gain = init_constant(d, 1.0);
  p.embed_bias = init_constant(d, 0.0);
  p.layers.resize(config.layers);
  for (LayerParams& l : p.layers) {
    l.ln1_gain = init_constant(d, 1.0);
    l.ln1_bias = init_constant(d, 0.0);
    l.wq = init_weight(d, d, rng);
    l.bq = init_constant(d, 0.0);
    l.wk = init_weight(d, d, rng);
    l.bk = init_constant(d, 0.0);
    l.wv = init_weight(d, d, rng);
    l.bv = init_constant(d, 0.0);
    l.wo = init_weight(d, d, rng);
    l.bo = init_constant(d, 0.0);
    l.ln2_gain = init_constant(d, 1.0);
    l.ln2_bias = init_constant(d, 0.0);
    l.w1 = init_weight(d, config.mlp_hidden, rng);
    l.b1 = init_constant(config.mlp_hidden, 0.0);
    l.w2 = init_weight(config.mlp_hidden, d, rng);
    l.b2 = init_constant(d, 0.0);
  }
  p.final_gain = init_constant(d, 1.0);
  p.final_bias = init_constant(d, 0.0);
  p.itm_w = init_weight(d, 1, rng);
  p.itm_b = init_constant(1, 0.0);
  p.mlm_w = init_weight(d, config.vocab_size, rng);
  p.mlm_b = init_constant(config.vocab_size, 0.0);
  p.recovery_w = init_weight(d, config.text_embedding_dim, rng);
  p.recovery_b = init_constant(config.text_embedding_dim, 0.0);
  return p;
}

NamedParams EncoderParams::named_parameters(const std::string& prefix) {
  NamedParams out{{prefix + "token_embedding", &token_embedding},
                  {prefix + "position_embedding", &position_embedding},
                  {prefix + "type_embedding", &type_embedding}};
  if (config.vision_positions > 0) {
    out.emplace_back(prefix + "vision_position_embedding", &vision_position_embedding);
  }
  out.emplace_back(prefix + "embed_gain", &embed_gain);
  out.emplace_back(prefix + "embed_bias", &embed_bias);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    LayerParams& l = layers[i];
    const std::string p = prefix + "layer" + std::to_string(i) + ".";
    for (auto [name, param] : {std::pair{"ln1_gain", &l.ln1_gain}, {"ln1_bias", &l.ln1_bias},
                               {"wq", &l.wq}, {"bq", &l.bq}, {"wk", &l.wk}, {"bk", &l.bk},
                               {"wv", &l.wv}, {"bv", &l.bv}, {"wo", &l.wo}, {"bo", &l.bo},
                               {"ln2_gain", &l.ln2_gain}, {"ln2_bias", &l.ln2_bias},
                               {"w1", &l.w1}, {"b1", &l.b1}, {"w2", &l.w2}, {"b2", &l.b2}}) {
      out.emplace_back(p + name, param);
    }
  }
  out.emplace_back(prefix + "final_gain", &final_gain);
  out.emplace_back(prefix + "final_bias", &final_bias);
  out.emplace_back(prefix + "itm_w", &itm_w);
  out.emplace_back(prefix + "itm_b", &itm_b);
  out.emplace_back(prefix + "mlm_w", &mlm_w);
  out.emplace_back(prefix + "mlm_b", &mlm_b);
  out.emplace_back(prefix + "recovery_w", &recovery_w);
  out.emplace_back(prefix + "recovery_b", &recovery_b);
  return out;
}

ConstNamedParams EncoderParams::named_parameters(const std::string& prefix) const {
  ConstNamedParams out;
  for (auto& [name, p] : const_cast<EncoderParams*>(this)->named_parameters(prefix)) {
    out.emplace_back(name, p);
  }
  return out;
}

Var embed_sequences(Tape* tape, std::span<const SequenceLayout> layouts,
                    std::span<const Var> vision, const EncoderParams& params) {
  const EncoderConfig& cfg = params.config;
  if (layouts.empty()) throw ConfigError("embed_sequences: no sequences");
  if (vision.size() != layouts.size()) {
    throw ConfigError("embed_sequences: " + std::to_string(vision.size()) + " vision inputs for " +
                      std::to_string(layouts.size()) + " sequences");
  }

  // Non-vision rows of every sequence, gathered in one pass.
  std::vector<std::size_t> ids, positions, types;
  for (const SequenceLayout& s : layouts) {
    if (s.text_count + 3 > cfg.max_positions()) {
      throw ConfigError("embed_sequences: " + std::to_string(s.text_count) +
                        " text tokens exceed max_text_len " + std::to_string(cfg.max_text_len));
    }
    for (std::size_t i = 0; i < s.length(); ++i) {
      types.push_back(s.tags[i] == Modality::kVision ? 1 : 0);
      if (s.tags[i] == Modality::kVision) continue;
      if (s.token_ids[i] >= cfg.vocab_size) {
        throw DataError("embed_sequences: token id " + std::to_string(s.token_ids[i]) +
                        " outside vocabulary of " + std::to_string(cfg.vocab_size));
      }
      ids.push_back(s.token_ids[i]);
      positions.push_back(s.position_ids[i]);
    }
  }
  Var text = add(gather_rows(bind(tape, params.token_embedding), ids),
                 gather_rows(bind(tape, params.position_embedding), positions));

  std::vector<Var> parts;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < layouts.size(); ++i) {
    const SequenceLayout& s = layouts[i];
    const std::size_t m = s.vision_count;
    const std::size_t rest = s.length() - m - 1;
    parts.push_back(slice_rows(text, offset, 1));
    if (m > 0) {
      const Var& v = vision[i];
      if (!v.valid() || v.rows() != m || v.cols() != cfg.hidden) {
        throw ConfigError("build_joint_sequence: vision input " +
                          (v.valid() ? shape_string(v.value().shape()) : std::string("missing")) +
                          " does not match " + std::to_string(m) + " rows of width d_language = " +
                          std::to_string(cfg.hidden));
      }
      if (cfg.vision_positions > 0) {
        if (m > cfg.vision_positions) {
          throw ConfigError("build_joint_sequence: " + std::to_string(m) +
                            " vision tokens exceed vision_positions " +
                            std::to_string(cfg.vision_positions));
        }
        parts.push_back(add(v, slice_rows(bind(tape, params.vision_position_embedding), 0, m)));
      } else {
        parts.push_back(v);
      }
    }
    parts.push_back(slice_rows(text, offset + 1, rest));
    offset += 1 + rest;
  }
  Var x = add(concat_rows(parts), gather_rows(bind(tape, params.type_embedding), types));
  return layer_norm(x, bind(tape, params.embed_gain), bind(tape, params.embed_bias), cfg.ln_eps);
}

JointSequence build_joint_sequence(const Tensor& vision, const TokenizedText& text,
                                   const EncoderParams& params, std::size_t pad_to) {
  const std::size_t m = vision.empty() ? 0 : vision.rows();
  if (m > 0 && vision.cols() != params.config.hidden) {
    throw ConfigError("build_joint_sequence: vision width " + std::to_string(vision.cols()) +
                      " does not match d_language = " + std::to_string(params.config.hidden));
  }
  JointSequence seq;
  seq.layout = make_layout(m, text, pad_to);
  const Var v = m > 0 ? constant_ref(vision) : Var();
  seq.embedded =
      embed_sequences(nullptr, std::span(&seq.layout, 1), std::span(&v, 1), params).value();
  return seq;
}

Var encode_embedded(Tape* tape, const Var& embedded, std::span<const SequenceLayout> layouts,
                    const EncoderParams& params) {
  const EncoderConfig& cfg = params.config;
  if (embedded.cols() != cfg.hidden) {
    throw DimensionError("encode: input width " + std::to_string(embedded.cols()) +
                         " does not match hidden " + std::to_string(cfg.hidden));
  }
  AttentionLayout attn;
  std::size_t offset = 0;
  for (const SequenceLayout& s : layouts) {
    attn.segments.push_back({offset, s.length(), offset, s.length()});
    attn.key_mask.insert(attn.key_mask.end(), s.attention_mask.begin(), s.attention_mask.end());
    offset += s.length();
  }
  if (offset != embedded.rows()) {
    throw DimensionError("encode: layouts cover " + std::to_string(offset) + " rows but input has " +
                         std::to_string(embedded.rows()));
  }

  Var x = embedded;
  for (const LayerParams& l : params.layers) {
    Var z = layer_norm(x, bind(tape, l.ln1_gain), bind(tape, l.ln1_bias), cfg.ln_eps);
    Var q = linear(z, bind(tape, l.wq), bind(tape, l.bq));
    Var k = linear(z, bind(tape, l.wk), bind(tape, l.bk));
    Var v = linear(z, bind(tape, l.wv), bind(tape, l.bv));
    Var bo = bind(tape, l.bo);
    x = add(x, multi_head_attention(q, k, v, cfg.heads, attn, bind(tape, l.wo), &bo));
    z = layer_norm(x, bind(tape, l.ln2_gain), bind(tape, l.ln2_bias), cfg.ln_eps);
    Var h = gelu(linear(z, bind(tape, l.w1), bind(tape, l.b1)));
    x = add(x, linear(h, bind(tape, l.w2), bind(tape, l.b2)));
  }
  return layer_norm(x, bind(tape, params.final_gain), bind(tape, params.final_bias), cfg.ln_eps);
}

EncodedBatch encode_batch(Tape* tape, std::span<const SequenceLayout> layouts,
                          std::span<const Var> vision, const EncoderParams& params) {
  EncodedBatch out;
  std::size_t offset = 0;
  for (const SequenceLayout& s : layouts) {
    out.offsets.push_back(offset);
    offset += s.length();
  }
  out.hidden = encode_embedded(tape, embed_sequences(tape, layouts, vision, params), layouts, params);
  return out;
}

Tensor encode(const JointSequence& seq, const EncoderParams& params) {
  return encode_embedded(nullptr, constant_ref(seq.embedded), std::span(&seq.layout, 1), params)
      .value();
}

Var itm_head(Tape* tape, const Var& hidden, std::span<const std::size_t> cls_rows,
             const EncoderParams& params) {
  return linear(gather_rows(hidden, cls_rows), bind(tape, params.itm_w), bind(tape, params.itm_b));
}

Var mlm_head(Tape* tape, const Var& hidden, std::span<const std::size_t> masked_rows,
             const EncoderParams& params) {
  return linear(gather_rows(hidden, masked_rows), bind(tape, params.mlm_w),
                bind(tape, params.mlm_b));
}

Var recovery_head(Tape* tape, const Var& hidden, std::span<const std::size_t> cls_rows,
                  const EncoderParams& params) {
  return linear(gather_rows(hidden, cls_rows), bind(tape, params.recovery_w),
                bind(tape, params.recovery_b));
}

std::vector<std::size_t> cls_rows(const EncodedBatch& batch) { return batch.offsets; }

std::vector<std::size_t> masked_rows(const EncodedBatch& batch,
                                     std::span<const SequenceLayout> layouts) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layouts.size(); ++i) {
    for (std::size_t p : layouts[i].masked_positions()) out.push_back(batch.offsets[i] + p);
  }
  return out;
}

double itm_logit(const JointSequence& seq, const EncoderParams& params) {
  const Tensor h = encode(seq, params);
  const std::size_t cls[] = {0};
  return scalar(itm_head(nullptr, constant_ref(h), cls, params));
}

Tensor mlm_logits(const JointSequence& seq, const EncoderParams& params) {
  const std::vector<std::size_t> rows = seq.layout.masked_positions();
  if (rows.empty()) return Tensor();
  const Tensor h = encode(seq, params);
  return mlm_head(nullptr, constant_ref(h), rows, params).value();
}

Tensor recover_text_embedding(const TokenizedText& text, const EncoderParams& params) {
  const JointSequence seq = build_joint_sequence(Tensor(), text, params);
  const Tensor h = encode(seq, params);
  const std::size_t cls[] = {0};
  return recovery_head(nullptr, constant_ref(h), cls, params).value().reshaped({params.config.text_embedding_dim});
}

}  // namespace edje
