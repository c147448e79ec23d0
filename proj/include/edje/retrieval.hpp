#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "edje/model.hpp"
#include "edje/tensor.hpp"

namespace edje {

enum class Direction { kTextToImage, kImageToText };
const char* to_string(Direction d);

/// Image and caption embeddings with the caption -> image ground truth.
/// Rows are l2-normalized on construction.
class EmbeddingIndex {
 public:
  EmbeddingIndex(std::vector<std::string> image_ids, Tensor image_embeddings,
                 std::vector<std::string> caption_ids, Tensor caption_embeddings,
                 std::span<const std::string> caption_image_ids);

  std::size_t images() const noexcept { return image_ids_.size(); }
  std::size_t captions() const noexcept { return caption_ids_.size(); }
  const std::string& image_id(std::size_t i) const { return image_ids_.at(i); }
  const std::string& caption_id(std::size_t c) const { return caption_ids_.at(c); }
  std::size_t image_index(const std::string& id) const;
  std::size_t caption_index(const std::string& id) const;
  std::size_t image_of(std::size_t caption) const { return caption_image_.at(caption); }
  const std::vector<std::size_t>& captions_of(std::size_t image) const { return image_captions_.at(image); }

  std::size_t queries(Direction d) const { return d == Direction::kTextToImage ? captions() : images(); }
  std::size_t corpus(Direction d) const { return d == Direction::kTextToImage ? images() : captions(); }
  /// Normalized dot product between query and corpus item.
  double score(Direction d, std::size_t query, std::size_t item) const;
  /// (caption, image) for a query/item pair.
  std::pair<std::size_t, std::size_t> pair(Direction d, std::size_t query, std::size_t item) const;
  bool relevant(Direction d, std::size_t query, std::size_t item) const;

 private:
  std::vector<std::string> image_ids_, caption_ids_;
  Tensor image_embeddings_, caption_embeddings_;
  std::vector<std::size_t> caption_image_;
  std::vector<std::vector<std::size_t>> image_captions_;
  std::unordered_map<std::string, std::size_t> image_lookup_, caption_lookup_;
};

struct Candidate {
  std::size_t item = 0;
  double score = 0.0;
};

struct CandidatePool {
  Direction direction = Direction::kTextToImage;
  std::size_t query = 0;
  std::vector<Candidate> candidates;  // descending score, ties to the lower index
};

/// Exact search. k must be in [1, corpus size].
CandidatePool first_stage_topk(const EmbeddingIndex& index, Direction d, std::size_t query, std::size_t k);
CandidatePool first_stage_topk(const EmbeddingIndex& index, const std::string& query_id, Direction d,
                               std::size_t k);

/// Scores (caption, image) pairs; higher means a better match.
class PairScorer {
 public:
  virtual ~PairScorer() = default;
  virtual std::vector<double> score(std::span<const std::pair<std::size_t, std::size_t>> pairs) = 0;
};

/// The first-stage embedding similarity itself.
class FirstStageScorer : public PairScorer {
 public:
  explicit FirstStageScorer(const EmbeddingIndex& index) : index_(index) {}
  std::vector<double> score(std::span<const std::pair<std::size_t, std::size_t>> pairs) override;

 private:
  const EmbeddingIndex& index_;
};

/// 1 for ground-truth pairs, 0 otherwise.
class OracleScorer : public PairScorer {
 public:
  explicit OracleScorer(const EmbeddingIndex& index) : index_(index) {}
  std::vector<double> score(std::span<const std::pair<std::size_t, std::size_t>> pairs) override;

 private:
  const EmbeddingIndex& index_;
};

class FunctionScorer : public PairScorer {
 public:
  using Fn = std::function<double(std::size_t caption, std::size_t image)>;
  explicit FunctionScorer(Fn fn) : fn_(std::move(fn)) {}
  std::vector<double> score(std::span<const std::pair<std::size_t, std::size_t>> pairs) override;

 private:
  Fn fn_;
};

/// ITM logits of a joint encoder over cached adapter outputs, indexed like
/// the EmbeddingIndex (image i, caption c).
class ModelScorer : public PairScorer {
 public:
  ModelScorer(const Model& model, std::vector<Tensor> image_tokens, std::vector<TokenizedText> captions,
              std::size_t batch = 64);
  std::vector<double> score(std::span<const std::pair<std::size_t, std::size_t>> pairs) override;

 private:
  const Model& model_;
  std::vector<Tensor> images_;
  std::vector<TokenizedText> captions_;
  std::size_t batch_;
};

struct RankedList {
  Direction direction = Direction::kTextToImage;
  std::size_t query = 0;
  std::vector<std::size_t> order;  // full corpus
};

/// Whole-corpus first-stage order.
RankedList first_stage_ranking(const EmbeddingIndex& index, Direction d, std::size_t query);

/// Reorders the first `pool_size` entries of `first_stage` by descending
/// scorer logit (ties keep first-stage order); the rest is untouched.
RankedList rerank(const EmbeddingIndex& index, const RankedList& first_stage, std::size_t pool_size,
                  PairScorer& scorer);

struct RecallReport {
  Direction direction = Direction::kTextToImage;
  std::vector<std::size_t> ks{1, 5, 10};
  std::vector<double> recall;  // per k
  std::size_t queries = 0;

  double at(std::size_t k) const;
};

/// T2I: hit when the caption's image is in the top k. I2T: hit when any of
/// the image's captions is.
RecallReport recall_at_k(const EmbeddingIndex& index, std::span<const RankedList> ranked, Direction d,
                         std::span<const std::size_t> ks);
RecallReport recall_at_k(const EmbeddingIndex& index, std::span<const RankedList> ranked, Direction d);

struct EvaluationReport {
  std::size_t pool_size = 0;
  RecallReport baseline_t2i, baseline_i2t;
  RecallReport reranked_t2i, reranked_i2t;
};

/// Both directions, first stage then rerank. Queries are sharded across
/// `workers` threads; the scorer must then be safe to call concurrently.
EvaluationReport evaluate(const EmbeddingIndex& index, PairScorer& scorer, std::size_t pool_size,
                          std::size_t workers = 1);

/// Table with baseline and reranked rows, T2I then I2T columns.
std::string format_report(const EvaluationReport& report);
/// `key = value` lines.
std::string format_key_values(const EvaluationReport& report);

}  // namespace edje
