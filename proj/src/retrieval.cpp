#include "edje/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <thread>

#include "edje/errors.hpp"
#include "edje/training.hpp"

namespace edje {

const char* to_string(Direction d) {
  return d == Direction::kTextToImage ? "t2i" : "i2t";
}

EmbeddingIndex::EmbeddingIndex(std::vector<std::string> image_ids, Tensor image_embeddings,
                               std::vector<std::string> caption_ids, Tensor caption_embeddings,
                               std::span<const std::string> caption_image_ids)
    : image_ids_(std::move(image_ids)),
      caption_ids_(std::move(caption_ids)),
      image_embeddings_(std::move(image_embeddings)),
      caption_embeddings_(std::move(caption_embeddings)) {
  if (image_embeddings_.rows() != image_ids_.size() || caption_embeddings_.rows() != caption_ids_.size())
    throw DimensionError("embedding rows do not match id counts");
  if (!image_ids_.empty() && !caption_ids_.empty() && image_embeddings_.cols() != caption_embeddings_.cols())
    throw DimensionError("image embeddings are " + std::to_string(image_embeddings_.cols()) +
                         "-d, caption embeddings " + std::to_string(caption_embeddings_.cols()) + "-d");
  if (caption_image_ids.size() != caption_ids_.size())
    throw DataError("ground truth has " + std::to_string(caption_image_ids.size()) + " entries for " +
                    std::to_string(caption_ids_.size()) + " captions");
  for (std::size_t i = 0; i < image_ids_.size(); ++i)
    if (!image_lookup_.emplace(image_ids_[i], i).second)
      throw ConflictError("duplicate image id '" + image_ids_[i] + "'");
  for (std::size_t c = 0; c < caption_ids_.size(); ++c)
    if (!caption_lookup_.emplace(caption_ids_[c], c).second)
      throw ConflictError("duplicate caption id '" + caption_ids_[c] + "'");

  image_captions_.resize(image_ids_.size());
  std::vector<std::string> missing;
  for (std::size_t c = 0; c < caption_ids_.size(); ++c) {
    auto it = image_lookup_.find(caption_image_ids[c]);
    if (it == image_lookup_.end()) {
      if (missing.size() < 10) missing.push_back(caption_ids_[c] + "->" + caption_image_ids[c]);
      caption_image_.push_back(0);
      continue;
    }
    caption_image_.push_back(it->second);
    image_captions_[it->second].push_back(c);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw DataError("captions map to unknown images: " + list);
  }
  if (!image_embeddings_.empty()) l2_normalize_rows(image_embeddings_);
  if (!caption_embeddings_.empty()) l2_normalize_rows(caption_embeddings_);
}

std::size_t EmbeddingIndex::image_index(const std::string& id) const {
  auto it = image_lookup_.find(id);
  if (it == image_lookup_.end()) throw NotFoundError("unknown image id '" + id + "'");
  return it->second;
}

std::size_t EmbeddingIndex::caption_index(const std::string& id) const {
  auto it = caption_lookup_.find(id);
  if (it == caption_lookup_.end()) throw NotFoundError("unknown caption id '" + id + "'");
  return it->second;
}

std::pair<std::size_t, std::size_t> EmbeddingIndex::pair(Direction d, std::size_t query,
                                                         std::size_t item) const {
  return d == Direction::kTextToImage ? std::pair{query, item} : std::pair{item, query};
}

double EmbeddingIndex::score(Direction d, std::size_t query, std::size_t item) const {
  const auto [c, i] = pair(d, query, item);
  const auto a = caption_embeddings_.row(c);
  const auto b = image_embeddings_.row(i);
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

bool EmbeddingIndex::relevant(Direction d, std::size_t query, std::size_t item) const {
  const auto [c, i] = pair(d, query, item);
  return caption_image_[c] == i;
}

namespace {

std::vector<Candidate> sorted_corpus(const EmbeddingIndex& index, Direction d, std::size_t query) {
  if (query >= index.queries(d))
    throw NotFoundError(std::string(to_string(d)) + " query " + std::to_string(query) + " out of range");
  std::vector<Candidate> all(index.corpus(d));
  for (std::size_t j = 0; j < all.size(); ++j) all[j] = {j, index.score(d, query, j)};
  std::stable_sort(all.begin(), all.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  return all;
}

}  // namespace

CandidatePool first_stage_topk(const EmbeddingIndex& index, Direction d, std::size_t query, std::size_t k) {
  if (k < 1 || k > index.corpus(d))
    throw ConfigError("pool size " + std::to_string(k) + " outside [1, " + std::to_string(index.corpus(d)) +
                      "]");
  auto all = sorted_corpus(index, d, query);
  all.resize(k);
  return {d, query, std::move(all)};
}

CandidatePool first_stage_topk(const EmbeddingIndex& index, const std::string& query_id, Direction d,
                               std::size_t k) {
  const std::size_t q = d == Direction::kTextToImage ? index.caption_index(query_id) : index.image_index(query_id);
  return first_stage_topk(index, d, q, k);
}

std::vector<double> FirstStageScorer::score(std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  std::vector<double> out;
  for (auto [c, i] : pairs) out.push_back(index_.score(Direction::kTextToImage, c, i));
  return out;
}

std::vector<double> OracleScorer::score(std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  std::vector<double> out;
  for (auto [c, i] : pairs) out.push_back(index_.image_of(c) == i ? 1.0 : 0.0);
  return out;
}

std::vector<double> FunctionScorer::score(std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  std::vector<double> out;
  for (auto [c, i] : pairs) out.push_back(fn_(c, i));
  return out;
}

ModelScorer::ModelScorer(const Model& model, std::vector<Tensor> image_tokens,
                         std::vector<TokenizedText> captions, std::size_t batch)
    : model_(model), images_(std::move(image_tokens)), captions_(std::move(captions)), batch_(batch) {
  if (batch_ == 0) throw ConfigError("scorer batch must be positive");
  for (std::size_t i = 0; i < images_.size(); ++i)
    if (images_[i].cols() != model_.config.encoder.hidden)
      throw DimensionError("cached image " + std::to_string(i) + " has width " +
                           std::to_string(images_[i].cols()) + ", encoder expects " +
                           std::to_string(model_.config.encoder.hidden));
}

std::vector<double> ModelScorer::score(std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  for (auto [c, i] : pairs)
    if (c >= captions_.size() || i >= images_.size())
      throw NotFoundError("pair (caption " + std::to_string(c) + ", image " + std::to_string(i) +
                          ") outside the cached corpus");
  return score_pairs(model_, images_, captions_, pairs, batch_);
}

RankedList first_stage_ranking(const EmbeddingIndex& index, Direction d, std::size_t query) {
  RankedList out{d, query, {}};
  for (const Candidate& c : sorted_corpus(index, d, query)) out.order.push_back(c.item);
  return out;
}

RankedList rerank(const EmbeddingIndex& index, const RankedList& first_stage, std::size_t pool_size,
                  PairScorer& scorer) {
  const Direction d = first_stage.direction;
  const std::size_t k = std::min(pool_size, first_stage.order.size());
  if (k == 0) throw ConfigError("pool size must be positive");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t r = 0; r < k; ++r) pairs.push_back(index.pair(d, first_stage.query, first_stage.order[r]));

  std::vector<double> logits;
  try {
    logits = scorer.score(pairs);
  } catch (const Error& e) {
    rethrow_with_context(e, std::string(to_string(d)) + " query " + std::to_string(first_stage.query));
  }
  if (logits.size() != k)
    throw DimensionError("scorer returned " + std::to_string(logits.size()) + " logits for " +
                         std::to_string(k) + " pairs");
  for (std::size_t r = 0; r < k; ++r)
    if (!std::isfinite(logits[r]))
      throw NumericError("non-finite logit for (caption " + std::to_string(pairs[r].first) + ", image " +
                         std::to_string(pairs[r].second) + ")");

  std::vector<std::size_t> slot(k);
  std::iota(slot.begin(), slot.end(), 0);
  std::stable_sort(slot.begin(), slot.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  RankedList out = first_stage;
  for (std::size_t r = 0; r < k; ++r) out.order[r] = first_stage.order[slot[r]];
  return out;
}

double RecallReport::at(std::size_t k) const {
  for (std::size_t j = 0; j < ks.size(); ++j)
    if (ks[j] == k) return recall.at(j);
  throw NotFoundError("recall@" + std::to_string(k) + " not computed");
}

namespace {

// Per-k hit counts over one range of ranked lists.
std::vector<std::size_t> hit_counts(const EmbeddingIndex& index, std::span<const RankedList> ranked, Direction d,
                                    std::span<const std::size_t> ks) {
  std::vector<std::size_t> hits(ks.size(), 0);
  for (const RankedList& list : ranked) {
    if (d == Direction::kImageToText && index.captions_of(list.query).empty())
      throw DataError("image '" + index.image_id(list.query) + "' has no ground-truth caption");
    std::size_t first = list.order.size();
    for (std::size_t r = 0; r < list.order.size(); ++r)
      if (index.relevant(d, list.query, list.order[r])) {
        first = r;
        break;
      }
    for (std::size_t j = 0; j < ks.size(); ++j)
      if (first < ks[j]) ++hits[j];
  }
  return hits;
}

RecallReport make_report(Direction d, std::span<const std::size_t> ks, std::span<const std::size_t> hits,
                         std::size_t queries) {
  RecallReport out;
  out.direction = d;
  out.ks.assign(ks.begin(), ks.end());
  out.queries = queries;
  for (std::size_t h : hits) out.recall.push_back(queries ? static_cast<double>(h) / queries : 0.0);
  return out;
}

constexpr std::size_t kDefaultKs[] = {1, 5, 10};

}  // namespace

RecallReport recall_at_k(const EmbeddingIndex& index, std::span<const RankedList> ranked, Direction d,
                         std::span<const std::size_t> ks) {
  std::vector<bool> seen(index.queries(d), false);
  for (const RankedList& list : ranked) {
    if (list.direction != d) throw ConfigError("ranked list direction does not match");
    if (list.query >= seen.size())
      throw DataError(std::string(to_string(d)) + " query " + std::to_string(list.query) + " has no truth entry");
    seen[list.query] = true;
  }
  for (std::size_t q = 0; q < seen.size(); ++q)
    if (!seen[q])
      throw DataError(std::string("query '") +
                      (d == Direction::kTextToImage ? index.caption_id(q) : index.image_id(q)) +
                      "' has no ranked list");
  return make_report(d, ks, hit_counts(index, ranked, d, ks), ranked.size());
}

RecallReport recall_at_k(const EmbeddingIndex& index, std::span<const RankedList> ranked, Direction d) {
  return recall_at_k(index, ranked, d, kDefaultKs);
}

namespace {

struct DirectionHits {
  std::vector<std::size_t> baseline, reranked;
};

DirectionHits run_shard(const EmbeddingIndex& index, PairScorer& scorer, Direction d, std::size_t pool,
                        std::size_t begin, std::size_t end) {
  DirectionHits out{std::vector<std::size_t>(std::size(kDefaultKs)), std::vector<std::size_t>(std::size(kDefaultKs))};
  for (std::size_t q = begin; q < end; ++q) {
    RankedList first;
    try {
      first = first_stage_ranking(index, d, q);
    } catch (const Error& e) {
      rethrow_with_context(e, "first-stage");
    }
    RankedList second;
    try {
      second = rerank(index, first, pool, scorer);
    } catch (const Error& e) {
      rethrow_with_context(e, "rerank");
    }
    try {
      const auto a = hit_counts(index, std::span(&first, 1), d, kDefaultKs);
      const auto b = hit_counts(index, std::span(&second, 1), d, kDefaultKs);
      for (std::size_t j = 0; j < a.size(); ++j) {
        out.baseline[j] += a[j];
        out.reranked[j] += b[j];
      }
    } catch (const Error& e) {
      rethrow_with_context(e, "metric");
    }
  }
  return out;
}

void evaluate_direction(const EmbeddingIndex& index, PairScorer& scorer, Direction d, std::size_t pool,
                        std::size_t workers, RecallReport& baseline, RecallReport& reranked) {
  const std::size_t n = index.queries(d);
  if (pool < 1 || pool > index.corpus(d))
    throw ConfigError("pool size " + std::to_string(pool) + " outside [1, " + std::to_string(index.corpus(d)) +
                      "] for " + to_string(d));
  workers = std::max<std::size_t>(1, std::min(workers, n));
  std::vector<DirectionHits> shards(workers);
  std::vector<std::exception_ptr> failures(workers);
  auto job = [&](std::size_t w) {
    try {
      shards[w] = run_shard(index, scorer, d, pool, n * w / workers, n * (w + 1) / workers);
    } catch (...) {
      failures[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    job(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(job, w);
    for (auto& t : threads) t.join();
  }
  for (auto& f : failures)
    if (f) std::rethrow_exception(f);

  std::vector<std::size_t> a(std::size(kDefaultKs), 0), b(std::size(kDefaultKs), 0);
  for (const auto& s : shards)
    for (std::size_t j = 0; j < a.size(); ++j) {
      a[j] += s.baseline[j];
      b[j] += s.reranked[j];
    }
  baseline = make_report(d, kDefaultKs, a, n);
  reranked = make_report(d, kDefaultKs, b, n);
}

}  // namespace

EvaluationReport evaluate(const EmbeddingIndex& index, PairScorer& scorer, std::size_t pool_size,
                          std::size_t workers) {
  EvaluationReport out;
  out.pool_size = pool_size;
  evaluate_direction(index, scorer, Direction::kTextToImage, pool_size, workers, out.baseline_t2i,
                     out.reranked_t2i);
  evaluate_direction(index, scorer, Direction::kImageToText, pool_size, workers, out.baseline_i2t,
                     out.reranked_i2t);
  return out;
}

namespace {

std::string percent(double v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%6.2f", 100.0 * v);
  return buf;
}

std::string table_row(const std::string& label, const RecallReport& t2i, const RecallReport& i2t) {
  char head[32];
  std::snprintf(head, sizeof head, "%-16s", label.c_str());
  std::string row = head;
  for (const RecallReport* r : {&t2i, &i2t}) {
    row += " |";
    for (double v : r->recall) row += " " + percent(v);
  }
  return row + "\n";
}

}  // namespace

std::string format_report(const EvaluationReport& r) {
  std::ostringstream out;
  out << "pool size " << r.pool_size << ", " << r.baseline_t2i.queries << " text queries, "
      << r.baseline_i2t.queries << " image queries\n";
  char head[128];
  std::snprintf(head, sizeof head, "%-16s |%-21s |%s\n", "", " Text-To-Image", " Image-To-Text");
  out << head;
  std::snprintf(head, sizeof head, "%-16s |%7s%7s%7s |%7s%7s%7s\n", "", "R@1", "R@5", "R@10", "R@1", "R@5",
                "R@10");
  out << head;
  out << table_row("first stage", r.baseline_t2i, r.baseline_i2t);
  out << table_row("reranked", r.reranked_t2i, r.reranked_i2t);
  return out.str();
}

std::string format_key_values(const EvaluationReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "pool_size = " << r.pool_size << "\n";
  const std::pair<const char*, const RecallReport*> rows[] = {{"baseline", &r.baseline_t2i},
                                                              {"baseline", &r.baseline_i2t},
                                                              {"reranked", &r.reranked_t2i},
                                                              {"reranked", &r.reranked_i2t}};
  for (auto [stage, rep] : rows) {
    out << stage << "." << to_string(rep->direction) << ".queries = " << rep->queries << "\n";
    for (std::size_t j = 0; j < rep->ks.size(); ++j)
      out << stage << "." << to_string(rep->direction) << ".r" << rep->ks[j] << " = " << rep->recall[j] << "\n";
  }
  return out.str();
}

}  // namespace edje
