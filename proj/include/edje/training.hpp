#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "edje/model.hpp"

namespace edje {

enum class MiningMode { kTopK, kSoftmaxSampling };

MiningMode parse_mining_mode(const std::string& name);
const char* to_string(MiningMode mode);

struct MiningConfig {
  std::size_t negatives = 3;
  MiningMode mode = MiningMode::kSoftmaxSampling;
  double temperature = 0.1;

  void validate(std::size_t batch_size) const;
};

/// Per anchor i: images[i] pairs text i with other images, texts[i] pairs
/// image i with other texts.
struct MinedNegatives {
  std::vector<std::vector<std::size_t>> images;
  std::vector<std::vector<std::size_t>> texts;
};

/// S(i, j) = cosine similarity of text i and image j.
Tensor weak_similarity(const Tensor& text_embeddings, const Tensor& image_embeddings);

/// Top-k mode takes the largest entries of row i (images) and column i
/// (texts), ties to the lower index. Sampling mode draws without replacement
/// with probability proportional to exp(S / temperature).
MinedNegatives mine_negatives(const Tensor& similarity, const MiningConfig& config,
                              std::uint64_t seed);

struct MaskedText {
  TokenizedText text;
  std::vector<std::size_t> positions;  // indices into text.ids
  std::vector<TokenId> targets;        // original ids at those positions
};

/// Masks each caption token with probability p; if none is drawn, one
/// uniformly chosen token is masked. [CLS] and [SEP] are never touched.
MaskedText apply_mlm_mask(const TokenizedText& text, double p, std::mt19937_64& rng);

/// Mean BCE with label 1 for positives and 0 for negatives.
double itm_loss(std::span<const double> logits_pos, std::span<const double> logits_neg);
/// 1 - cos(pred, target) with norms floored at eps.
double recovery_loss(const Tensor& pred, const Tensor& target, double eps = 1e-8);
/// BCE of sigmoid(s_student) against the soft target sigmoid(s_teacher).
double distillation_loss(double s_teacher, double s_student);

struct LossWeights {
  double itm = 1.0;
  double mlm = 1.0;
  double recovery = 1.0;
  double distill = 0.0;

  void validate() const;
  bool any() const { return itm > 0 || mlm > 0 || recovery > 0 || distill > 0; }
};

struct OptimizerConfig {
  double lr = 3e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup_steps = 100;
  double warmup_lr = 1e-6;
  double min_lr = 1e-6;
  double decay_rate = 0.9;
  std::size_t steps_per_epoch = 1;

  void validate() const;
};

/// Linear warmup from warmup_lr to lr, then lr * decay_rate^epoch counted
/// from the end of warmup, never below min_lr.
double lr_at(std::size_t step, const OptimizerConfig& config);

/// Adam moments with decoupled weight decay on parameters flagged for decay.
class AdamW {
 public:
  explicit AdamW(OptimizerConfig config) : config_(config) {}

  /// Parameters without a gradient on `tape` are left untouched.
  void step(const NamedParams& params, const Tape& tape, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  struct Moments {
    Tensor m, v;
  };
  OptimizerConfig config_;
  std::unordered_map<const Parameter*, Moments> state_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  LossWeights weights;
  MiningConfig mining;
  OptimizerConfig optimizer;
  double mask_prob = 0.5;
  std::size_t batch_size = 16;
  std::size_t steps = 500;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Positive pairs: caption i describes image i.
struct TrainingData {
  std::vector<Tensor> vision;  // raw tokens, n x d_vision each
  std::vector<TokenizedText> texts;
  Tensor image_embeddings;  // N x d_emb
  Tensor text_embeddings;   // N x d_emb

  std::size_t size() const noexcept { return texts.size(); }
  void validate() const;
  TrainingData subset(std::span<const std::size_t> indices) const;
};

/// One batch with negatives, masks and teacher logits fixed, so the loss is
/// a deterministic function of the parameters.
struct PreparedBatch {
  TrainingData data;
  Tensor raw;                                            // stacked vision tokens
  std::vector<std::size_t> token_counts;
  MinedNegatives negatives;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (text, image): positives then negatives
  std::vector<double> labels;
  std::vector<MaskedText> masked;
  std::vector<double> teacher_logits;  // per pair, when distilling
};

PreparedBatch prepare_batch(TrainingData batch, const TrainConfig& config, std::mt19937_64& rng,
                            const Model* teacher = nullptr);

/// Unweighted per-objective values; inactive ones are 0.
struct LossBreakdown {
  double itm = 0.0;
  double mlm = 0.0;
  double recovery = 0.0;
  double distill = 0.0;
  double total = 0.0;
};

/// Weighted sum of the active objectives. Throws NumericError naming the
/// first non-finite objective.
Var training_loss(Tape* tape, const Model& model, const PreparedBatch& batch,
                  const LossWeights& weights, LossBreakdown* breakdown = nullptr);
LossBreakdown evaluate_losses(const Model& model, const PreparedBatch& batch, const LossWeights& weights);

/// One optimizer step at lr_at(step). No-op when every weight is zero.
LossBreakdown train_step(Model& model, AdamW& optimizer, const PreparedBatch& batch,
                         const TrainConfig& config, std::size_t step);

/// ITM logits for (text, image) pairs over already adapted images.
std::vector<double> score_pairs(const Model& model, std::span<const Tensor> adapted,
                                std::span<const TokenizedText> texts,
                                std::span<const std::pair<std::size_t, std::size_t>> pairs,
                                std::size_t chunk = 64);

struct TrainLogRow {
  std::size_t step = 0;
  double lr = 0.0;
  LossBreakdown losses;
};

using TrainCallback = std::function<void(const TrainLogRow&)>;

/// Runs config.steps steps over reshuffled epochs of full batches.
std::vector<TrainLogRow> train(Model& model, const TrainingData& data, const TrainConfig& config,
                               const Model* teacher = nullptr, const TrainCallback& on_step = {});

/// Trains `student` against the frozen `teacher`'s ITM logits (distill
/// weight 1 unless the config sets one). Vision inputs must agree.
std::vector<TrainLogRow> distill_local_to_compressed(const Model& teacher, Model& student,
                                                     const TrainingData& data, TrainConfig config,
                                                     const TrainCallback& on_step = {});

}  // namespace edje
