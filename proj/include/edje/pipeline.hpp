#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "edje/config.hpp"
#include "edje/errors.hpp"
#include "edje/feature_store.hpp"
#include "edje/model.hpp"
#include "edje/retrieval.hpp"
#include "edje/synth.hpp"
#include "edje/tokenizer.hpp"
#include "edje/training.hpp"

namespace edje {

enum class ScorerKind { kModel, kFirstStage, kOracle };
ScorerKind parse_scorer_kind(const std::string& name);
const char* to_string(ScorerKind kind);

struct RunSettings {
  std::string dir = "run";
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct FinetuneSettings {
  std::size_t steps = 0;
  double lr = 2e-5;
};

struct EvalSettings {
  std::size_t pool_size = 10;
  std::string split = "test";
  ScorerKind scorer = ScorerKind::kModel;
  std::size_t batch = 32;
};

struct BenchSettings {
  std::size_t batch = 64;
  std::size_t raw_tokens = 576;
  std::size_t caption_len = 64;
  std::size_t warmup = 1;
  std::size_t iters = 3;
  std::size_t chunk = 16;
};

struct PipelineConfig {
  RunSettings run;
  SynthConfig synth;
  ModelConfig model;
  TrainConfig train;
  FinetuneSettings finetune;
  std::uint16_t store_width = 16;
  EvalSettings eval;
  BenchSettings bench;
};

/// Every key the config file accepts, in resolved-dump order.
std::vector<std::string> config_keys();

/// Defaults overridden by `file`. Unknown keys and bad values raise
/// ConfigError naming the line.
PipelineConfig resolve_config(const ConfigFile& file);
PipelineConfig load_config(const std::string& path);

/// All keys with their effective values; parses back to the same config.
std::string resolved_text(const PipelineConfig& config);

struct RunPaths {
  std::filesystem::path dir;

  explicit RunPaths(std::filesystem::path d) : dir(std::move(d)) {}
  std::filesystem::path data() const { return dir / "data"; }
  std::filesystem::path raw() const { return data() / "raw.edjr"; }
  std::filesystem::path manifest() const { return data() / "manifest.tsv"; }
  std::filesystem::path embeddings() const { return data() / "embeddings.edjc"; }
  std::filesystem::path model() const { return dir / "model.edjc"; }
  std::filesystem::path vocab() const { return dir / "vocab.txt"; }
  std::filesystem::path loss_log() const { return dir / "loss_log.tsv"; }
  std::filesystem::path features() const { return dir / "features.edjf"; }
  std::filesystem::path report() const { return dir / "report.txt"; }
  std::filesystem::path bench() const { return dir / "bench.txt"; }
  std::filesystem::path metadata() const { return dir / "metadata.txt"; }
  std::filesystem::path resolved() const { return dir / "config.resolved"; }
};

/// One row of manifest.tsv.
struct ManifestRow {
  std::string caption_id, image_id, caption, split;
};

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);

/// Raw tokens, captions and embeddings of a synthesized run directory.
struct Corpus {
  std::vector<std::string> image_ids;
  std::vector<Tensor> image_tokens;
  Tensor image_embeddings;
  std::vector<ManifestRow> rows;
  Tensor caption_embeddings;  // row-aligned with `rows`

  std::size_t image_index(const std::string& id) const;
};

Corpus load_corpus(const RunPaths& paths, std::size_t d_vision);

/// Positive pairs for every caption of `split`.
TrainingData training_data(const Corpus& corpus, const std::string& split, const Vocabulary& vocab,
                           std::size_t max_text_len);

/// Retrieval index over the images and captions of `split`.
struct SplitIndex {
  std::vector<std::size_t> images;    // corpus image indices
  std::vector<std::size_t> captions;  // corpus row indices
};
SplitIndex split_members(const Corpus& corpus, const std::string& split);
EmbeddingIndex make_index(const Corpus& corpus, const SplitIndex& members);

/// Scores pairs with the checkpoint and vocabulary of a trained run, adapting
/// raw tokens in full precision instead of reading the feature store.
class RunScorer : public PairScorer {
 public:
  RunScorer(const PipelineConfig& config, const Corpus& corpus, const SplitIndex& members, std::size_t batch = 64);
  std::vector<double> score(std::span<const std::pair<std::size_t, std::size_t>> pairs) override;
  const Model& model() const { return *model_; }

 private:
  std::unique_ptr<Model> model_;
  std::unique_ptr<ModelScorer> scorer_;
};

/// The (caption, image) pairs inside each query's first-stage pool.
std::vector<std::pair<std::size_t, std::size_t>> pool_pairs(const EmbeddingIndex& index, Direction direction,
                                                            std::size_t pool_size);

struct CommandOptions {
  bool force = false;
  std::optional<std::filesystem::path> teacher;  // checkpoint for --distill
  std::optional<ScorerKind> scorer;
  std::optional<std::size_t> pool_size;
};

/// The pipeline stages. Each writes under config.run.dir and logs to `log`.
void cmd_synth(const PipelineConfig& config, const CommandOptions& options, std::ostream& log);
void cmd_train(const PipelineConfig& config, const CommandOptions& options, std::ostream& log);
StorageStats cmd_precompute(const PipelineConfig& config, const CommandOptions& options, std::ostream& log);
EvaluationReport cmd_evaluate(const PipelineConfig& config, const CommandOptions& options, std::ostream& log);

struct StageTiming {
  std::string name;
  double ms = 0.0;
};

struct BenchReport {
  std::string variant;
  std::size_t batch = 0;
  std::size_t vision_tokens = 0;  // per image, as the encoder sees them
  std::size_t caption_len = 0;
  double rerank_ms = 0.0;  // encoder + heads over cached features
  double full_ms = 0.0;    // adapter + encoder + heads
  std::vector<StageTiming> stages;
  std::string weights;
  std::string hardware;

  double pairs_per_second() const { return rerank_ms > 0 ? batch * 1000.0 / rerank_ms : 0.0; }
  double stage_sum() const;
};

BenchReport run_bench(const ModelConfig& model_config, const BenchSettings& settings, std::uint64_t seed,
                      const Model* trained = nullptr);
std::string format_bench(const BenchReport& report);
BenchReport cmd_bench(const PipelineConfig& config, const CommandOptions& options, std::ostream& log);

/// Process exit code for an error kind: config 2, data 3, numeric 4, other 1.
int exit_code_for(const Error& error);

}  // namespace edje
