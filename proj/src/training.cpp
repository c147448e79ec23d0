#include "edje/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "edje/errors.hpp"

namespace edje {

namespace {

double softplus(double x) {
  if (std::isinf(x)) return x > 0 ? x : 0.0;
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

std::vector<std::size_t> top_k_excluding(const std::vector<double>& scores, std::size_t anchor,
                                         std::size_t k) {
  std::vector<std::size_t> idx;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (j != anchor) idx.push_back(j);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  return idx;
}

std::vector<std::size_t> sample_excluding(const std::vector<double>& scores, std::size_t anchor,
                                          std::size_t k, double temperature, std::mt19937_64& rng) {
  std::vector<std::size_t> pool;
  double best = -INFINITY;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (j == anchor) continue;
    pool.push_back(j);
    best = std::max(best, scores[j]);
  }
  std::vector<double> w;
  for (std::size_t j : pool) w.push_back(std::exp((scores[j] - best) / temperature));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::size_t> out;
  while (out.size() < k) {
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    double u = unit(rng) * total;
    std::size_t pick = 0;
    for (; pick + 1 < w.size(); ++pick) {
      if (w[pick] > 0 && u < w[pick]) break;
      u -= w[pick];
    }
    // Rounding can leave the cursor on an exhausted slot; take the last live one.
    while (w[pick] == 0) --pick;
    out.push_back(pool[pick]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    w.erase(w.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  return out;
}

void check_finite(const char* name, const Var& loss) {
  if (!std::isfinite(scalar(loss))) {
    throw NumericError(std::string("non-finite ") + name + " loss (" + std::to_string(scalar(loss)) + ")");
  }
}

std::vector<std::size_t> adapted_offsets(const Model& model, std::span<const std::size_t> counts,
                                         std::vector<std::size_t>& sizes) {
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  sizes.clear();
  for (std::size_t n : counts) {
    offsets.push_back(offset);
    sizes.push_back(model.config.vision_tokens(n));
    offset += sizes.back();
  }
  return offsets;
}

void check_vision_match(const Model& teacher, const Model& student) {
  if (teacher.config.d_vision() != student.config.d_vision()) {
    throw ConfigError("teacher d_vision " + std::to_string(teacher.config.d_vision()) +
                      " does not match student d_vision " + std::to_string(student.config.d_vision()));
  }
}

}  // namespace

MiningMode parse_mining_mode(const std::string& name) {
  if (name == "topk") return MiningMode::kTopK;
  if (name == "softmax") return MiningMode::kSoftmaxSampling;
  throw ConfigError("mining mode must be 'topk' or 'softmax', got '" + name + "'");
}

const char* to_string(MiningMode mode) { return mode == MiningMode::kTopK ? "topk" : "softmax"; }

void MiningConfig::validate(std::size_t batch_size) const {
  if (negatives == 0) throw ConfigError("mining needs at least one negative per sample");
  if (batch_size < negatives + 1) {
    throw ConfigError("batch of " + std::to_string(batch_size) + " too small for " +
                      std::to_string(negatives) + " negatives per sample");
  }
  if (mode == MiningMode::kSoftmaxSampling && !(temperature > 0)) {
    throw ConfigError("mining temperature must be positive");
  }
}

Tensor weak_similarity(const Tensor& text_embeddings, const Tensor& image_embeddings) {
  if (text_embeddings.cols() != image_embeddings.cols()) {
    throw DimensionError("weak_similarity: embedding widths " + shape_string(text_embeddings.shape()) +
                         " and " + shape_string(image_embeddings.shape()) + " differ");
  }
  Tensor t = text_embeddings;
  Tensor v = image_embeddings;
  l2_normalize_rows(t);
  l2_normalize_rows(v);
  Tensor s({t.rows(), v.rows()});
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < v.rows(); ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < t.cols(); ++c) dot += t(i, c) * v(j, c);
      s(i, j) = dot;
    }
  if (!all_finite(s)) throw NumericError("weak_similarity: non-finite similarity");
  return s;
}

MinedNegatives mine_negatives(const Tensor& similarity, const MiningConfig& config, std::uint64_t seed) {
  const std::size_t b = similarity.rows();
  if (similarity.cols() != b) {
    throw DimensionError("mine_negatives: similarity " + shape_string(similarity.shape()) + " is not square");
  }
  config.validate(b);
  std::mt19937_64 rng(seed);
  MinedNegatives out;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> row(b), col(b);
    for (std::size_t j = 0; j < b; ++j) {
      row[j] = similarity(i, j);
      col[j] = similarity(j, i);
    }
    if (config.mode == MiningMode::kTopK) {
      out.images.push_back(top_k_excluding(row, i, config.negatives));
      out.texts.push_back(top_k_excluding(col, i, config.negatives));
    } else {
      out.images.push_back(sample_excluding(row, i, config.negatives, config.temperature, rng));
      out.texts.push_back(sample_excluding(col, i, config.negatives, config.temperature, rng));
    }
  }
  return out;
}

MaskedText apply_mlm_mask(const TokenizedText& text, double p, std::mt19937_64& rng) {
  if (text.ids.size() < 3) throw DataError("apply_mlm_mask: caption has no tokens");
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("mask probability must lie in [0, 1]");
  MaskedText out;
  out.text = text;
  std::bernoulli_distribution draw(p);
  for (std::size_t i = 1; i + 1 < text.ids.size(); ++i) {
    if (Vocabulary::is_special(text.ids[i]) && text.ids[i] != Vocabulary::kUnk) continue;
    if (draw(rng)) out.positions.push_back(i);
  }
  if (out.positions.empty()) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 1; i + 1 < text.ids.size(); ++i)
      if (!Vocabulary::is_special(text.ids[i]) || text.ids[i] == Vocabulary::kUnk) candidates.push_back(i);
    if (candidates.empty()) throw DataError("apply_mlm_mask: caption has no maskable tokens");
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    out.positions.push_back(candidates[pick(rng)]);
  }
  for (std::size_t i : out.positions) {
    out.targets.push_back(text.ids[i]);
    out.text.ids[i] = Vocabulary::kMask;
  }
  return out;
}

double itm_loss(std::span<const double> logits_pos, std::span<const double> logits_neg) {
  if (logits_pos.empty()) throw DataError("itm_loss: no positive logits");
  double total = 0.0;
  for (double z : logits_pos) total += softplus(-z);
  for (double z : logits_neg) total += softplus(z);
  return total / static_cast<double>(logits_pos.size() + logits_neg.size());
}

double recovery_loss(const Tensor& pred, const Tensor& target, double eps) {
  if (pred.size() != target.size()) {
    throw DimensionError("recovery_loss: " + shape_string(pred.shape()) + " vs " + shape_string(target.shape()));
  }
  double dot = 0.0, np = 0.0, nt = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    dot += pred[i] * target[i];
    np += pred[i] * pred[i];
    nt += target[i] * target[i];
  }
  return 1.0 - dot / (std::max(std::sqrt(np), eps) * std::max(std::sqrt(nt), eps));
}

double distillation_loss(double s_teacher, double s_student) {
  const double y = sigmoid(s_teacher);
  double loss = 0.0;
  if (y > 0.0) loss += y * softplus(-s_student);
  if (y < 1.0) loss += (1.0 - y) * softplus(s_student);
  return loss;
}

void LossWeights::validate() const {
  for (double w : {itm, mlm, recovery, distill}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
  }
}

void OptimizerConfig::validate() const {
  if (!(lr > 0) || !(warmup_lr > 0) || !(min_lr > 0)) throw ConfigError("learning rates must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("weight decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
  if (!(decay_rate > 0 && decay_rate <= 1)) throw ConfigError("lr decay rate must lie in (0, 1]");
  if (steps_per_epoch == 0) throw ConfigError("steps_per_epoch must be positive");
}

double lr_at(std::size_t step, const OptimizerConfig& c) {
  if (step < c.warmup_steps) {
    return c.warmup_lr + (c.lr - c.warmup_lr) * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  }
  const auto epochs = static_cast<double>((step - c.warmup_steps) / c.steps_per_epoch);
  return std::max(c.min_lr, c.lr * std::pow(c.decay_rate, epochs));
}

void AdamW::step(const NamedParams& params, const Tape& tape, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [name, p] : params) {
    const Tensor* g = tape.grad(*p);
    if (!g) continue;
    Moments& s = state_[p];
    if (s.m.empty()) {
      s.m = Tensor::zeros_like(p->value);
      s.v = Tensor::zeros_like(p->value);
    }
    const double decay = p->decay ? 1.0 - lr * config_.weight_decay : 1.0;
    double* w = p->value.raw();
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double gi = (*g)[i];
      s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * gi;
      s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * gi * gi;
      w[i] = w[i] * decay - lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + config_.eps);
    }
  }
}

void TrainConfig::validate() const {
  weights.validate();
  optimizer.validate();
  if (!(mask_prob >= 0 && mask_prob <= 1)) throw ConfigError("mask probability must lie in [0, 1]");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
}

void TrainingData::validate() const {
  const std::size_t n = texts.size();
  if (n == 0) throw DataError("training data is empty");
  if (vision.size() != n || image_embeddings.rows() != n || text_embeddings.rows() != n) {
    throw DataError("training data: " + std::to_string(n) + " captions, " + std::to_string(vision.size()) +
                    " images, " + std::to_string(image_embeddings.rows()) + " image embeddings, " +
                    std::to_string(text_embeddings.rows()) + " text embeddings");
  }
}

TrainingData TrainingData::subset(std::span<const std::size_t> indices) const {
  TrainingData out;
  const std::size_t de = image_embeddings.cols(), dt = text_embeddings.cols();
  out.image_embeddings = Tensor({indices.size(), de});
  out.text_embeddings = Tensor({indices.size(), dt});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t i = indices[r];
    out.vision.push_back(vision.at(i));
    out.texts.push_back(texts.at(i));
    for (std::size_t c = 0; c < de; ++c) out.image_embeddings(r, c) = image_embeddings(i, c);
    for (std::size_t c = 0; c < dt; ++c) out.text_embeddings(r, c) = text_embeddings(i, c);
  }
  return out;
}

std::vector<double> score_pairs(const Model& model, std::span<const Tensor> adapted,
                                std::span<const TokenizedText> texts,
                                std::span<const std::pair<std::size_t, std::size_t>> pairs,
                                std::size_t chunk) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (std::size_t begin = 0; begin < pairs.size(); begin += chunk) {
    const std::size_t end = std::min(pairs.size(), begin + chunk);
    std::vector<SequenceLayout> layouts;
    std::vector<Var> vision;
    for (std::size_t p = begin; p < end; ++p) {
      const Tensor& v = adapted[pairs[p].second];
      layouts.push_back(make_layout(v.rows(), texts[pairs[p].first]));
      vision.push_back(constant_ref(v));
    }
    auto batch = encode_batch(nullptr, layouts, vision, model.encoder);
    const Tensor logits = itm_head(nullptr, batch.hidden, cls_rows(batch), model.encoder).value();
    out.insert(out.end(), logits.data().begin(), logits.data().end());
  }
  return out;
}

PreparedBatch prepare_batch(TrainingData batch, const TrainConfig& config, std::mt19937_64& rng,
                            const Model* teacher) {
  batch.validate();
  const std::size_t b = batch.size();
  PreparedBatch out;
  std::vector<Var> parts;
  for (const Tensor& v : batch.vision) {
    parts.push_back(constant_ref(v));
    out.token_counts.push_back(v.rows());
  }
  out.raw = concat_rows(parts).value();

  const bool pairs_needed = config.weights.itm > 0 || config.weights.distill > 0;
  if (pairs_needed) {
    out.negatives = mine_negatives(weak_similarity(batch.text_embeddings, batch.image_embeddings),
                                   config.mining, rng());
    for (std::size_t i = 0; i < b; ++i) {
      out.pairs.emplace_back(i, i);
      out.labels.push_back(1.0);
    }
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j : out.negatives.images[i]) {
        out.pairs.emplace_back(i, j);
        out.labels.push_back(0.0);
      }
      for (std::size_t j : out.negatives.texts[i]) {
        out.pairs.emplace_back(j, i);
        out.labels.push_back(0.0);
      }
    }
  }
  if (config.weights.mlm > 0) {
    for (const auto& t : batch.texts) out.masked.push_back(apply_mlm_mask(t, config.mask_prob, rng));
  }
  if (config.weights.distill > 0) {
    if (!teacher) throw ConfigError("distillation weight set but no teacher model given");
    std::vector<Tensor> adapted;
    for (const Tensor& v : batch.vision) adapted.push_back(teacher->adapt(v));
    out.teacher_logits = score_pairs(*teacher, adapted, batch.texts, out.pairs);
  }
  out.data = std::move(batch);
  return out;
}

Var training_loss(Tape* tape, const Model& model, const PreparedBatch& batch, const LossWeights& weights,
                  LossBreakdown* breakdown) {
  LossBreakdown local;
  LossBreakdown& report = breakdown ? *breakdown : local;
  report = LossBreakdown{};
  const std::size_t b = batch.data.size();
  std::vector<Var> terms;

  std::vector<Var> images;
  if (weights.itm > 0 || weights.distill > 0 || weights.mlm > 0) {
    Var adapted = model.adapt(tape, constant_ref(batch.raw), batch.token_counts);
    std::vector<std::size_t> sizes;
    const auto offsets = adapted_offsets(model, batch.token_counts, sizes);
    for (std::size_t i = 0; i < b; ++i) images.push_back(slice_rows(adapted, offsets[i], sizes[i]));
  }

  if (weights.itm > 0 || weights.distill > 0) {
    std::vector<SequenceLayout> layouts;
    std::vector<Var> vision;
    for (auto [t, v] : batch.pairs) {
      layouts.push_back(make_layout(images[v].rows(), batch.data.texts[t]));
      vision.push_back(images[v]);
    }
    auto enc = encode_batch(tape, layouts, vision, model.encoder);
    Var logits = itm_head(tape, enc.hidden, cls_rows(enc), model.encoder);
    if (weights.itm > 0) {
      Var l = bce_with_logits(logits, batch.labels);
      check_finite("itm", l);
      report.itm = scalar(l);
      terms.push_back(scale(l, weights.itm));
    }
    if (weights.distill > 0) {
      if (batch.teacher_logits.size() != batch.pairs.size()) {
        throw ConfigError("distillation weight set but the batch carries no teacher logits");
      }
      std::vector<double> soft;
      for (double s : batch.teacher_logits) soft.push_back(sigmoid(s));
      Var l = bce_with_logits(logits, soft);
      check_finite("distill", l);
      report.distill = scalar(l);
      terms.push_back(scale(l, weights.distill));
    }
  }

  if (weights.mlm > 0) {
    if (batch.masked.size() != b) throw ConfigError("mlm weight set but the batch carries no masks");
    std::vector<SequenceLayout> layouts;
    std::vector<TokenId> targets_id;
    for (std::size_t i = 0; i < b; ++i) {
      layouts.push_back(make_layout(images[i].rows(), batch.masked[i].text));
      targets_id.insert(targets_id.end(), batch.masked[i].targets.begin(), batch.masked[i].targets.end());
    }
    auto enc = encode_batch(tape, layouts, images, model.encoder);
    std::vector<std::size_t> targets(targets_id.begin(), targets_id.end());
    Var l = cross_entropy(mlm_head(tape, enc.hidden, masked_rows(enc, layouts), model.encoder), targets);
    check_finite("mlm", l);
    report.mlm = scalar(l);
    terms.push_back(scale(l, weights.mlm));
  }

  if (weights.recovery > 0) {
    if (batch.data.text_embeddings.cols() != model.config.encoder.text_embedding_dim) {
      throw ConfigError("text embeddings have width " + std::to_string(batch.data.text_embeddings.cols()) +
                        " but the recovery head outputs " +
                        std::to_string(model.config.encoder.text_embedding_dim));
    }
    std::vector<SequenceLayout> layouts;
    for (const auto& t : batch.data.texts) layouts.push_back(make_layout(0, t));
    std::vector<Var> none(b);
    auto enc = encode_batch(tape, layouts, none, model.encoder);
    Var l = cosine_distance(recovery_head(tape, enc.hidden, cls_rows(enc), model.encoder),
                            batch.data.text_embeddings);
    check_finite("recovery", l);
    report.recovery = scalar(l);
    terms.push_back(scale(l, weights.recovery));
  }

  if (terms.empty()) return constant(Tensor({1}, 0.0));
  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  report.total = scalar(total);
  return total;
}

LossBreakdown evaluate_losses(const Model& model, const PreparedBatch& batch, const LossWeights& weights) {
  LossBreakdown out;
  training_loss(nullptr, model, batch, weights, &out);
  return out;
}

LossBreakdown train_step(Model& model, AdamW& optimizer, const PreparedBatch& batch,
                         const TrainConfig& config, std::size_t step) {
  LossBreakdown out;
  if (!config.weights.any()) return out;
  Tape tape;
  Var loss = training_loss(&tape, model, batch, config.weights, &out);
  tape.backward(loss);
  optimizer.step(model.named_parameters(), tape, lr_at(step, config.optimizer));
  return out;
}

std::vector<TrainLogRow> train(Model& model, const TrainingData& data, const TrainConfig& config,
                               const Model* teacher, const TrainCallback& on_step) {
  config.validate();
  data.validate();
  if (teacher) check_vision_match(*teacher, model);
  const std::size_t b = std::min(config.batch_size, data.size());
  const std::size_t per_epoch = data.size() / b;
  TrainConfig cfg = config;
  cfg.optimizer.steps_per_epoch = per_epoch;
  AdamW optimizer(cfg.optimizer);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<TrainLogRow> log;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const std::size_t slot = step % per_epoch;
    if (slot == 0) std::shuffle(order.begin(), order.end(), rng);
    const std::span<const std::size_t> idx(order.data() + slot * b, b);
    PreparedBatch batch = prepare_batch(data.subset(idx), cfg, rng, teacher);
    TrainLogRow row{step, lr_at(step, cfg.optimizer), {}};
    try {
      row.losses = train_step(model, optimizer, batch, cfg, step);
    } catch (const Error& e) {
      rethrow_with_context(e, "training step " + std::to_string(step));
    }
    if (on_step) on_step(row);
    log.push_back(row);
  }
  return log;
}

std::vector<TrainLogRow> distill_local_to_compressed(const Model& teacher, Model& student,
                                                     const TrainingData& data, TrainConfig config,
                                                     const TrainCallback& on_step) {
  check_vision_match(teacher, student);
  if (teacher.config.encoder.hidden != student.config.encoder.hidden) {
    throw ConfigError("teacher and student encoders differ in width");
  }
  if (config.weights.distill == 0) config.weights.distill = 1.0;
  return train(student, data, config, &teacher, on_step);
}

}  // namespace edje
