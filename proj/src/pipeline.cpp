#include "edje/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <thread>

#include "edje/checkpoint.hpp"
#include "edje/encoder.hpp"
#include "edje/errors.hpp"

namespace edje {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

}  // namespace

ScorerKind parse_scorer_kind(const std::string& name) {
  if (name == "model") return ScorerKind::kModel;
  if (name == "first-stage") return ScorerKind::kFirstStage;
  if (name == "oracle") return ScorerKind::kOracle;
  throw ConfigError("unknown scorer '" + name + "' (expected model, first-stage or oracle)");
}

const char* to_string(ScorerKind kind) {
  switch (kind) {
    case ScorerKind::kModel: return "model";
    case ScorerKind::kFirstStage: return "first-stage";
    case ScorerKind::kOracle: return "oracle";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Config binding

namespace {

struct Binding {
  std::string key;
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

// `field` is a generic lambda returning a reference into the config.
template <typename F>
Binding size_key(std::string key, F field) {
  return {key, [=](PipelineConfig& c, const std::string& v) { field(c) = parse_size(key, v); },
          [=](const PipelineConfig& c) { return std::to_string(field(c)); }};
}

template <typename F>
Binding u64_key(std::string key, F field) {
  return {key, [=](PipelineConfig& c, const std::string& v) { field(c) = parse_u64(key, v); },
          [=](const PipelineConfig& c) { return std::to_string(field(c)); }};
}

template <typename F>
Binding double_key(std::string key, F field) {
  return {key, [=](PipelineConfig& c, const std::string& v) { field(c) = parse_double(key, v); },
          [=](const PipelineConfig& c) { return format_double(field(c)); }};
}

template <typename F>
Binding bool_key(std::string key, F field) {
  return {key, [=](PipelineConfig& c, const std::string& v) { field(c) = parse_bool(key, v); },
          [=](const PipelineConfig& c) { return std::string(field(c) ? "true" : "false"); }};
}

template <typename F>
Binding string_key(std::string key, F field) {
  return {key, [=](PipelineConfig& c, const std::string& v) { field(c) = v; },
          [=](const PipelineConfig& c) { return std::string(field(c)); }};
}

template <typename F>
Binding width_key(std::string key, F field) {
  return {key,
          [=](PipelineConfig& c, const std::string& v) {
            const auto w = parse_size(key, v);
            if (w != 16 && w != 32 && w != 64) throw ConfigError(key + ": width must be 16, 32 or 64");
            field(c) = static_cast<std::uint16_t>(w);
          },
          [=](const PipelineConfig& c) { return std::to_string(field(c)); }};
}

#define EDJE_FIELD(expr) [](auto& c) -> auto& { return c.expr; }

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = [] {
    std::vector<Binding> b;
    b.push_back(string_key("run.dir", EDJE_FIELD(run.dir)));
    b.push_back(u64_key("run.seed", EDJE_FIELD(run.seed)));
    b.push_back(size_key("run.workers", EDJE_FIELD(run.workers)));

    b.push_back(size_key("synth.train_images", EDJE_FIELD(synth.train_images)));
    b.push_back(size_key("synth.test_images", EDJE_FIELD(synth.test_images)));
    b.push_back(size_key("synth.captions_per_image", EDJE_FIELD(synth.captions_per_image)));
    b.push_back(size_key("synth.slots", EDJE_FIELD(synth.slots)));
    b.push_back(size_key("synth.values", EDJE_FIELD(synth.values)));
    b.push_back(size_key("synth.tokens", EDJE_FIELD(synth.tokens)));
    b.push_back(size_key("synth.d_vision", EDJE_FIELD(synth.d_vision)));
    b.push_back(size_key("synth.d_emb", EDJE_FIELD(synth.d_emb)));
    b.push_back(double_key("synth.slot_weight", EDJE_FIELD(synth.slot_weight)));
    b.push_back(double_key("synth.token_noise", EDJE_FIELD(synth.token_noise)));
    b.push_back(double_key("synth.embedding_noise", EDJE_FIELD(synth.embedding_noise)));
    b.push_back(double_key("synth.concept_weight", EDJE_FIELD(synth.concept_weight)));
    b.push_back(double_key("synth.instance_weight", EDJE_FIELD(synth.instance_weight)));
    b.push_back(width_key("synth.width", EDJE_FIELD(synth.width_bits)));

    b.push_back({"model.adapter",
                 [](PipelineConfig& c, const std::string& v) { c.model.adapter = parse_adapter_kind(v); },
                 [](const PipelineConfig& c) { return std::string(to_string(c.model.adapter)); }});
    b.push_back({"model.d_vision",
                 [](PipelineConfig& c, const std::string& v) {
                   c.model.compression.d_vision = c.model.local.d_vision = parse_size("model.d_vision", v);
                 },
                 [](const PipelineConfig& c) { return std::to_string(c.model.compression.d_vision); }});
    b.push_back(size_key("model.m", EDJE_FIELD(model.compression.tokens)));
    b.push_back({"model.adapter_hidden",
                 [](PipelineConfig& c, const std::string& v) {
                   c.model.compression.hidden = c.model.local.hidden = parse_size("model.adapter_hidden", v);
                 },
                 [](const PipelineConfig& c) { return std::to_string(c.model.compression.hidden); }});
    b.push_back(size_key("model.adapter_heads", EDJE_FIELD(model.compression.heads)));
    b.push_back(bool_key("model.out_proj", EDJE_FIELD(model.compression.out_proj)));
    b.push_back(bool_key("model.mlp_bias", EDJE_FIELD(model.compression.mlp_bias)));
    b.push_back(bool_key("model.local_norm", EDJE_FIELD(model.local.norm)));
    b.push_back(bool_key("model.local_bias", EDJE_FIELD(model.local.bias)));
    b.push_back(size_key("model.layers", EDJE_FIELD(model.encoder.layers)));
    b.push_back({"model.hidden",
                 [](PipelineConfig& c, const std::string& v) {
                   const auto h = parse_size("model.hidden", v);
                   c.model.encoder.hidden = c.model.compression.d_language = c.model.local.d_language = h;
                 },
                 [](const PipelineConfig& c) { return std::to_string(c.model.encoder.hidden); }});
    b.push_back(size_key("model.heads", EDJE_FIELD(model.encoder.heads)));
    b.push_back(size_key("model.mlp_hidden", EDJE_FIELD(model.encoder.mlp_hidden)));
    b.push_back(size_key("model.vocab_size", EDJE_FIELD(model.encoder.vocab_size)));
    b.push_back(size_key("model.max_text_len", EDJE_FIELD(model.encoder.max_text_len)));
    b.push_back(size_key("model.text_embedding_dim", EDJE_FIELD(model.encoder.text_embedding_dim)));
    b.push_back(bool_key("model.vision_positions", EDJE_FIELD(model.encoder.vision_positions)));

    b.push_back(double_key("loss.itm", EDJE_FIELD(train.weights.itm)));
    b.push_back(double_key("loss.mlm", EDJE_FIELD(train.weights.mlm)));
    b.push_back(double_key("loss.recovery", EDJE_FIELD(train.weights.recovery)));
    b.push_back(double_key("loss.distill", EDJE_FIELD(train.weights.distill)));
    b.push_back(size_key("mining.negatives", EDJE_FIELD(train.mining.negatives)));
    b.push_back({"mining.mode",
                 [](PipelineConfig& c, const std::string& v) { c.train.mining.mode = parse_mining_mode(v); },
                 [](const PipelineConfig& c) { return std::string(to_string(c.train.mining.mode)); }});
    b.push_back(double_key("mining.temperature", EDJE_FIELD(train.mining.temperature)));
    b.push_back(double_key("mask.prob", EDJE_FIELD(train.mask_prob)));
    b.push_back(double_key("optim.lr", EDJE_FIELD(train.optimizer.lr)));
    b.push_back(double_key("optim.weight_decay", EDJE_FIELD(train.optimizer.weight_decay)));
    b.push_back(double_key("optim.beta1", EDJE_FIELD(train.optimizer.beta1)));
    b.push_back(double_key("optim.beta2", EDJE_FIELD(train.optimizer.beta2)));
    b.push_back(double_key("optim.eps", EDJE_FIELD(train.optimizer.eps)));
    b.push_back(size_key("optim.warmup_steps", EDJE_FIELD(train.optimizer.warmup_steps)));
    b.push_back(double_key("optim.warmup_lr", EDJE_FIELD(train.optimizer.warmup_lr)));
    b.push_back(double_key("optim.min_lr", EDJE_FIELD(train.optimizer.min_lr)));
    b.push_back(double_key("optim.decay_rate", EDJE_FIELD(train.optimizer.decay_rate)));
    b.push_back(size_key("train.batch_size", EDJE_FIELD(train.batch_size)));
    b.push_back(size_key("train.steps", EDJE_FIELD(train.steps)));
    b.push_back(size_key("finetune.steps", EDJE_FIELD(finetune.steps)));
    b.push_back(double_key("finetune.lr", EDJE_FIELD(finetune.lr)));

    b.push_back(width_key("store.width", EDJE_FIELD(store_width)));

    b.push_back(size_key("eval.pool_size", EDJE_FIELD(eval.pool_size)));
    b.push_back(string_key("eval.split", EDJE_FIELD(eval.split)));
    b.push_back({"eval.scorer",
                 [](PipelineConfig& c, const std::string& v) { c.eval.scorer = parse_scorer_kind(v); },
                 [](const PipelineConfig& c) { return std::string(to_string(c.eval.scorer)); }});
    b.push_back(size_key("eval.batch", EDJE_FIELD(eval.batch)));

    b.push_back(size_key("bench.batch", EDJE_FIELD(bench.batch)));
    b.push_back(size_key("bench.raw_tokens", EDJE_FIELD(bench.raw_tokens)));
    b.push_back(size_key("bench.caption_len", EDJE_FIELD(bench.caption_len)));
    b.push_back(size_key("bench.warmup", EDJE_FIELD(bench.warmup)));
    b.push_back(size_key("bench.iters", EDJE_FIELD(bench.iters)));
    b.push_back(size_key("bench.chunk", EDJE_FIELD(bench.chunk)));
    return b;
  }();
  return table;
}

#undef EDJE_FIELD

void validate(const PipelineConfig& c) {
  c.synth.validate();
  c.model.validate();
  c.train.validate();
  if (c.run.workers == 0) throw ConfigError("run.workers must be positive");
  if (c.store_width != 16 && c.store_width != 64) throw ConfigError("store.width must be 16 or 64");
  if (c.finetune.steps > 0 && !(c.finetune.lr > 0)) throw ConfigError("finetune.lr must be positive");
  if (c.eval.pool_size == 0) throw ConfigError("eval.pool_size must be positive");
  if (c.eval.batch == 0) throw ConfigError("eval.batch must be positive");
  if (c.bench.batch == 0 || c.bench.iters == 0 || c.bench.chunk == 0 || c.bench.raw_tokens == 0)
    throw ConfigError("bench.batch, bench.iters, bench.chunk and bench.raw_tokens must be positive");
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& b : bindings()) out.push_back(b.key);
  return out;
}

PipelineConfig resolve_config(const ConfigFile& file) {
  PipelineConfig c;
  for (const auto& [key, value] : file.entries()) {
    const auto it = std::find_if(bindings().begin(), bindings().end(), [&](const Binding& b) { return b.key == key; });
    const std::string where = file.origin() + ":" + std::to_string(file.line_of(key));
    if (it == bindings().end()) throw ConfigError(where + ": unknown key '" + key + "'");
    try {
      it->set(c, value);
    } catch (const Error& e) {
      rethrow_with_context(e, where);
    }
  }
  c.train.seed = c.run.seed;
  try {
    validate(c);
  } catch (const Error& e) {
    rethrow_with_context(e, file.origin());
  }
  return c;
}

PipelineConfig load_config(const std::string& path) {
  try {
    return resolve_config(ConfigFile::load(path));
  } catch (const NotFoundError& e) {
    throw ConfigError(e.what());
  }
}

std::string resolved_text(const PipelineConfig& config) {
  std::string out;
  for (const auto& b : bindings()) out += b.key + " = " + b.get(config) + "\n";
  return out;
}

int exit_code_for(const Error& error) {
  switch (error.kind()) {
    case ErrorKind::kConfig: return 2;
    case ErrorKind::kData:
    case ErrorKind::kDimension:
    case ErrorKind::kFormat:
    case ErrorKind::kCorruption:
    case ErrorKind::kNotFound: return 3;
    case ErrorKind::kNumeric: return 4;
    default: return 1;
  }
}

// ---------------------------------------------------------------------------
// Data files

void write_manifest(const fs::path& path, const std::vector<ManifestRow>& rows) {
  std::ostringstream out;
  out << "caption_id\timage_id\tcaption\tsplit\n";
  for (const auto& r : rows) {
    for (const std::string* field : {&r.caption_id, &r.image_id, &r.caption, &r.split})
      if (field->find_first_of("\t\n") != std::string::npos)
        throw FormatError("manifest field contains a tab or newline: '" + *field + "'");
    out << r.caption_id << '\t' << r.image_id << '\t' << r.caption << '\t' << r.split << '\n';
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write '" + tmp.string() + "'");
    f << out.str();
  }
  fs::rename(tmp, path);
}

std::vector<ManifestRow> read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("manifest '" + path.string() + "' not found; run `edje synth` first");
  std::vector<ManifestRow> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 4)
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 4 tab-separated fields, got " +
                        std::to_string(fields.size()));
    rows.push_back({fields[0], fields[1], fields[2], fields[3]});
  }
  return rows;
}

std::size_t Corpus::image_index(const std::string& id) const {
  const auto it = std::find(image_ids.begin(), image_ids.end(), id);
  if (it == image_ids.end()) throw NotFoundError("unknown image id '" + id + "'");
  return static_cast<std::size_t>(it - image_ids.begin());
}

namespace {

std::string first_ten(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size() && i < 10; ++i) out += (i ? ", " : "") + items[i];
  if (items.size() > 10) out += ", ...";
  return out;
}

const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name, const fs::path& path) {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  throw FormatError("'" + path.string() + "' has no tensor '" + name + "'");
}

}  // namespace

Corpus load_corpus(const RunPaths& paths, std::size_t d_vision) {
  if (!fs::exists(paths.raw()))
    throw NotFoundError("raw dump '" + paths.raw().string() + "' not found; run `edje synth` first");
  Corpus out;
  RawDump dump = ingest_raw_dump(paths.raw(), d_vision);
  out.image_ids = std::move(dump.ids);
  out.image_tokens = std::move(dump.tokens);
  out.rows = read_manifest(paths.manifest());
  if (!fs::exists(paths.embeddings()))
    throw NotFoundError("embeddings '" + paths.embeddings().string() + "' not found; run `edje synth` first");
  const auto tensors = load_tensors(paths.embeddings());
  out.image_embeddings = find_tensor(tensors, "image_embeddings", paths.embeddings());
  out.caption_embeddings = find_tensor(tensors, "caption_embeddings", paths.embeddings());
  if (out.image_embeddings.rows() != out.image_ids.size())
    throw DataError("embeddings cover " + std::to_string(out.image_embeddings.rows()) + " images, raw dump has " +
                    std::to_string(out.image_ids.size()));
  if (out.caption_embeddings.rows() != out.rows.size())
    throw DataError("embeddings cover " + std::to_string(out.caption_embeddings.rows()) +
                    " captions, manifest has " + std::to_string(out.rows.size()));

  std::unordered_map<std::string, std::size_t> known;
  for (std::size_t i = 0; i < out.image_ids.size(); ++i) known.emplace(out.image_ids[i], i);
  std::vector<std::string> offenders;
  for (const auto& r : out.rows)
    if (!known.contains(r.image_id)) offenders.push_back(r.caption_id + "->" + r.image_id);
  if (!offenders.empty())
    throw DataError(std::to_string(offenders.size()) + " manifest rows name images missing from the raw dump: " +
                    first_ten(offenders));
  return out;
}

TrainingData training_data(const Corpus& corpus, const std::string& split, const Vocabulary& vocab,
                           std::size_t max_text_len) {
  std::unordered_map<std::string, std::size_t> image_of;
  for (std::size_t i = 0; i < corpus.image_ids.size(); ++i) image_of.emplace(corpus.image_ids[i], i);
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < corpus.rows.size(); ++r)
    if (corpus.rows[r].split == split) rows.push_back(r);
  if (rows.empty()) throw DataError("no captions in split '" + split + "'");

  const std::size_t d = corpus.caption_embeddings.cols();
  TrainingData out;
  out.image_embeddings = Tensor({rows.size(), corpus.image_embeddings.cols()});
  out.text_embeddings = Tensor({rows.size(), d});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& row = corpus.rows[rows[k]];
    const std::size_t img = image_of.at(row.image_id);
    out.vision.push_back(corpus.image_tokens[img]);
    out.texts.push_back(tokenize(row.caption, vocab, max_text_len));
    std::copy_n(corpus.image_embeddings.row(img).begin(), out.image_embeddings.cols(), out.image_embeddings.row(k).begin());
    std::copy_n(corpus.caption_embeddings.row(rows[k]).begin(), d, out.text_embeddings.row(k).begin());
  }
  return out;
}

SplitIndex split_members(const Corpus& corpus, const std::string& split) {
  SplitIndex out;
  std::unordered_map<std::string, bool> used;
  for (std::size_t r = 0; r < corpus.rows.size(); ++r)
    if (corpus.rows[r].split == split) {
      out.captions.push_back(r);
      used[corpus.rows[r].image_id] = true;
    }
  for (std::size_t i = 0; i < corpus.image_ids.size(); ++i)
    if (used.contains(corpus.image_ids[i])) out.images.push_back(i);
  if (out.captions.empty()) throw DataError("no captions in split '" + split + "'");
  return out;
}

EmbeddingIndex make_index(const Corpus& corpus, const SplitIndex& members) {
  std::vector<std::string> image_ids, caption_ids, truth;
  const std::size_t d = corpus.image_embeddings.cols();
  Tensor images({members.images.size(), d});
  Tensor captions({members.captions.size(), corpus.caption_embeddings.cols()});
  for (std::size_t k = 0; k < members.images.size(); ++k) {
    image_ids.push_back(corpus.image_ids[members.images[k]]);
    std::copy_n(corpus.image_embeddings.row(members.images[k]).begin(), d, images.row(k).begin());
  }
  for (std::size_t k = 0; k < members.captions.size(); ++k) {
    const auto& row = corpus.rows[members.captions[k]];
    caption_ids.push_back(row.caption_id);
    truth.push_back(row.image_id);
    std::copy_n(corpus.caption_embeddings.row(members.captions[k]).begin(), captions.cols(), captions.row(k).begin());
  }
  return EmbeddingIndex(std::move(image_ids), std::move(images), std::move(caption_ids), std::move(captions), truth);
}

// ---------------------------------------------------------------------------
// Run-directory bookkeeping

namespace {

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write '" + tmp.string() + "'");
    f << text;
    if (!f) throw IoError("write to '" + tmp.string() + "' failed");
  }
  fs::rename(tmp, path);
}

// metadata.txt holds `key = value` lines; each command updates its own keys.
void update_metadata(const RunPaths& paths, const PipelineConfig& config, const std::string& command,
                     const std::map<std::string, std::string>& extra) {
  std::map<std::string, std::string> kv;
  if (std::ifstream in(paths.metadata()); in) {
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find(" = ");
      if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
  }
  const std::string resolved = resolved_text(config);
  kv["edje.version"] = kVersion;
  kv["compiler"] = __VERSION__;
  kv["eigen.version"] = "3.4";
  kv[command + ".config_hash"] = hash_hex(resolved);
  for (const auto& [k, v] : extra) kv[command + "." + k] = v;
  std::string text;
  for (const auto& [k, v] : kv) text += k + " = " + v + "\n";
  write_text(paths.metadata(), text);
}

void begin_command(const RunPaths& paths, const PipelineConfig& config, const std::string& command,
                   std::ostream& log) {
  fs::create_directories(paths.dir);
  const std::string resolved = resolved_text(config);
  write_text(paths.resolved(), resolved);
  log << command << ": run dir " << paths.dir.string() << ", config hash " << hash_hex(resolved) << "\n";
}

Model load_model(const PipelineConfig& config, const fs::path& path) {
  if (!fs::exists(path)) throw NotFoundError("checkpoint '" + path.string() + "' not found; run `edje train` first");
  std::mt19937_64 rng(config.run.seed);
  Model model = Model::init(config.model, rng);
  try {
    load_checkpoint(path, model.named_parameters());
  } catch (const Error& e) {
    rethrow_with_context(e, "checkpoint '" + path.string() + "'");
  }
  return model;
}

ConstNamedParams snapshot_view(const std::vector<NamedTensor>& tensors, std::vector<Parameter>& storage,
                               const ConstNamedParams& like) {
  storage.clear();
  storage.reserve(tensors.size());
  ConstNamedParams out;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    storage.push_back(Parameter{tensors[i].value, like[i].second->decay});
    out.emplace_back(tensors[i].name, &storage.back());
  }
  return out;
}

std::vector<NamedTensor> snapshot(const Model& model) {
  std::vector<NamedTensor> out;
  for (const auto& [name, p] : model.named_parameters()) out.push_back({name, p->value});
  return out;
}

}  // namespace

RunScorer::RunScorer(const PipelineConfig& config, const Corpus& corpus, const SplitIndex& members,
                     std::size_t batch) {
  const RunPaths paths(config.run.dir);
  model_ = std::make_unique<Model>(load_model(config, paths.model()));
  const Vocabulary vocab = Vocabulary::load(paths.vocab());
  std::vector<Tensor> images;
  for (std::size_t i : members.images) images.push_back(model_->adapt(corpus.image_tokens[i]));
  std::vector<TokenizedText> captions;
  for (std::size_t r : members.captions)
    captions.push_back(tokenize(corpus.rows[r].caption, vocab, config.model.encoder.max_text_len));
  scorer_ = std::make_unique<ModelScorer>(*model_, std::move(images), std::move(captions), batch);
}

std::vector<double> RunScorer::score(std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  return scorer_->score(pairs);
}

std::vector<std::pair<std::size_t, std::size_t>> pool_pairs(const EmbeddingIndex& index, Direction direction,
                                                            std::size_t pool_size) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t q = 0; q < index.queries(direction); ++q)
    for (const auto& c : first_stage_topk(index, direction, q, pool_size).candidates)
      out.push_back(index.pair(direction, q, c.item));
  return out;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_synth(const PipelineConfig& config, const CommandOptions& options, std::ostream& log) {
  const RunPaths paths(config.run.dir);
  if (fs::exists(paths.data())) {
    if (!options.force)
      throw ConflictError("'" + paths.data().string() + "' already exists; pass --force to overwrite");
    fs::remove_all(paths.data());
  }
  begin_command(paths, config, "synth", log);
  const SynthDataset data = generate_synthetic(config.synth, config.run.seed);
  fs::create_directories(paths.data());
  write_raw_dump(paths.raw(), data.image_ids, data.image_tokens, config.synth.width_bits);
  std::vector<ManifestRow> rows;
  for (std::size_t c = 0; c < data.caption_ids.size(); ++c)
    rows.push_back({data.caption_ids[c], data.caption_images[c], data.captions[c], data.caption_splits[c]});
  write_manifest(paths.manifest(), rows);
  save_tensors(paths.embeddings(), {{"image_embeddings", data.image_embeddings},
                                    {"caption_embeddings", data.caption_embeddings}});

  // First-stage quality per split, so the headroom is visible up front.
  const Corpus corpus = load_corpus(paths, config.synth.d_vision);
  std::map<std::string, std::string> extra;
  for (const char* split : {"train", "test"}) {
    bool any = false;
    for (const auto& r : corpus.rows) any |= r.split == split;
    if (!any) continue;
    const EmbeddingIndex index = make_index(corpus, split_members(corpus, split));
    FirstStageScorer scorer(index);
    const auto report = evaluate(index, scorer, 1);
    log << "synth: " << split << " split " << index.images() << " images, " << index.captions()
        << " captions, first-stage R@1 t2i " << format_double(report.baseline_t2i.at(1)) << " i2t "
        << format_double(report.baseline_i2t.at(1)) << "\n";
    extra[std::string(split) + ".first_stage_r1_t2i"] = format_double(report.baseline_t2i.at(1));
  }
  extra["images"] = std::to_string(data.image_ids.size());
  extra["captions"] = std::to_string(data.caption_ids.size());
  update_metadata(paths, config, "synth", extra);
}

void cmd_train(const PipelineConfig& config, const CommandOptions& options, std::ostream& log) {
  const RunPaths paths(config.run.dir);
  begin_command(paths, config, "train", log);
  const Corpus corpus = load_corpus(paths, config.model.d_vision());
  if (corpus.caption_embeddings.cols() != config.model.encoder.text_embedding_dim)
    throw ConfigError("caption embeddings are " + std::to_string(corpus.caption_embeddings.cols()) +
                      "-d but model.text_embedding_dim is " + std::to_string(config.model.encoder.text_embedding_dim));

  std::optional<Model> teacher;
  Vocabulary vocab;
  if (options.teacher) {
    const fs::path teacher_dir = options.teacher->parent_path();
    const fs::path teacher_cfg = teacher_dir / "config.resolved";
    if (!fs::exists(teacher_cfg))
      throw NotFoundError("teacher config '" + teacher_cfg.string() + "' not found next to the teacher checkpoint");
    const PipelineConfig tc = load_config(teacher_cfg.string());
    teacher.emplace(load_model(tc, *options.teacher));
    vocab = Vocabulary::load(teacher_dir / "vocab.txt");
    log << "train: distilling from " << options.teacher->string() << " (" << to_string(tc.model.adapter)
        << " adapter)\n";
  } else {
    std::vector<std::string> captions;
    for (const auto& r : corpus.rows)
      if (r.split == "train") captions.push_back(r.caption);
    vocab = Vocabulary::build(captions, config.model.encoder.vocab_size);
  }
  if (vocab.size() > config.model.encoder.vocab_size)
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " tokens but model.vocab_size is " +
                      std::to_string(config.model.encoder.vocab_size));

  const TrainingData data = training_data(corpus, "train", vocab, config.model.encoder.max_text_len);
  std::mt19937_64 rng(config.run.seed);
  Model model = Model::init(config.model, rng);

  std::ostringstream loss_log;
  loss_log << "step\tphase\tlr\titm\tmlm\trecovery\tdistill\ttotal\n";
  std::size_t global_step = 0;
  std::string phase = "pretrain";
  // Parameters that last produced a finite loss, and the current ones.
  std::vector<NamedTensor> good, current = snapshot(model);
  bool have_good = false;
  auto on_step = [&](const TrainLogRow& row) {
    loss_log << global_step++ << '\t' << phase << '\t' << format_double(row.lr) << '\t'
             << format_double(row.losses.itm) << '\t' << format_double(row.losses.mlm) << '\t'
             << format_double(row.losses.recovery) << '\t' << format_double(row.losses.distill) << '\t'
             << format_double(row.losses.total) << '\n';
    good = std::move(current);
    have_good = true;
    current = snapshot(model);
  };

  auto run_phase = [&](const TrainConfig& tc) {
    if (tc.steps == 0) return;
    if (teacher)
      distill_local_to_compressed(*teacher, model, data, tc, on_step);
    else
      train(model, data, tc, nullptr, on_step);
  };

  try {
    run_phase(config.train);
    if (config.finetune.steps > 0) {
      phase = "finetune";
      TrainConfig ft = config.train;
      ft.steps = config.finetune.steps;
      ft.optimizer.lr = config.finetune.lr;
      ft.seed = config.run.seed + 1;
      run_phase(ft);
    }
  } catch (const NumericError& e) {
    write_text(paths.loss_log(), loss_log.str());
    vocab.save(paths.vocab());
    std::map<std::string, std::string> extra{{"status", "aborted"}, {"error", e.what()}};
    if (have_good) {
      std::vector<Parameter> storage;
      save_checkpoint(paths.model(), snapshot_view(good, storage, std::as_const(model).named_parameters()));
      extra["checkpoint_step"] = std::to_string(global_step - 1);
      log << "train: aborted (" << e.what() << "); kept parameters from before step " << global_step - 1 << "\n";
    }
    update_metadata(paths, config, "train", extra);
    throw;
  }

  save_checkpoint(paths.model(), std::as_const(model).named_parameters());
  vocab.save(paths.vocab());
  write_text(paths.loss_log(), loss_log.str());
  update_metadata(paths, config, "train",
                  {{"status", "ok"}, {"steps", std::to_string(global_step)}, {"pairs", std::to_string(data.size())},
                   {"distill_teacher", options.teacher ? options.teacher->string() : std::string("none")}});
  log << "train: " << global_step << " steps over " << data.size() << " pairs, checkpoint "
      << paths.model().string() << "\n";
}

StorageStats cmd_precompute(const PipelineConfig& config, const CommandOptions&, std::ostream& log) {
  const RunPaths paths(config.run.dir);
  begin_command(paths, config, "precompute", log);
  const Model model = load_model(config, paths.model());
  if (!fs::exists(paths.raw()))
    throw NotFoundError("raw dump '" + paths.raw().string() + "' not found; run `edje synth` first");
  const RawDump dump = ingest_raw_dump(paths.raw(), config.model.d_vision());

  const fs::path tmp = paths.features().string() + ".tmp";
  fs::remove(tmp);
  {
    FeatureStoreWriter writer(tmp);
    for (std::size_t i = 0; i < dump.ids.size(); ++i) writer.write(dump.ids[i], model.adapt(dump.tokens[i]), config.store_width);
    writer.close();
  }
  fs::remove(tmp.string() + ".lock");
  fs::rename(tmp, paths.features());

  const FeatureStore store(paths.features());
  const StorageStats stats = store.stats();
  log << "precompute: " << stats.records << " images, " << stats.tokens << " x " << stats.dim << " " << stats.dtype()
      << " tokens, " << format_kb(stats.bytes_per_image) << "/image (" << stats.bytes_per_image << " bytes), total "
      << stats.total_bytes << " bytes\n";
  update_metadata(paths, config, "precompute",
                  {{"records", std::to_string(stats.records)},
                   {"bytes_per_image", std::to_string(stats.bytes_per_image)},
                   {"kb_per_image", format_kb(stats.bytes_per_image)}});
  return stats;
}

EvaluationReport cmd_evaluate(const PipelineConfig& config_in, const CommandOptions& options, std::ostream& log) {
  PipelineConfig config = config_in;
  if (options.pool_size) config.eval.pool_size = *options.pool_size;
  if (options.scorer) config.eval.scorer = *options.scorer;
  const RunPaths paths(config.run.dir);
  begin_command(paths, config, "evaluate", log);

  const Corpus corpus = load_corpus(paths, config.model.d_vision());
  const SplitIndex members = split_members(corpus, config.eval.split);
  const EmbeddingIndex index = make_index(corpus, members);

  std::unique_ptr<PairScorer> scorer;
  std::optional<Model> model;
  if (config.eval.scorer == ScorerKind::kModel) {
    if (!fs::exists(paths.features()))
      throw NotFoundError("feature store '" + paths.features().string() + "' not found; run `edje precompute` first");
    model.emplace(load_model(config, paths.model()));
    const Vocabulary vocab = Vocabulary::load(paths.vocab());
    const FeatureStore store(paths.features());
    std::vector<std::string> missing;
    for (std::size_t i : members.images)
      if (!store.contains(corpus.image_ids[i])) missing.push_back(corpus.image_ids[i]);
    if (!missing.empty())
      throw DataError(std::to_string(missing.size()) + " images of split '" + config.eval.split +
                      "' are missing from the feature store: " + first_ten(missing));
    std::vector<Tensor> images;
    for (std::size_t i : members.images) images.push_back(store.read_tensor(corpus.image_ids[i]));
    std::vector<TokenizedText> captions;
    for (std::size_t r : members.captions)
      captions.push_back(tokenize(corpus.rows[r].caption, vocab, config.model.encoder.max_text_len));
    scorer = std::make_unique<ModelScorer>(*model, std::move(images), std::move(captions), config.eval.batch);
  } else if (config.eval.scorer == ScorerKind::kFirstStage) {
    scorer = std::make_unique<FirstStageScorer>(index);
  } else {
    scorer = std::make_unique<OracleScorer>(index);
  }

  const EvaluationReport report = evaluate(index, *scorer, config.eval.pool_size, config.run.workers);
  const std::string table = format_report(report);
  write_text(paths.report(), "split " + config.eval.split + ", scorer " + to_string(config.eval.scorer) + "\n" +
                                 table + "\n" + format_key_values(report));
  log << table;
  update_metadata(paths, config, "evaluate",
                  {{"split", config.eval.split},
                   {"scorer", to_string(config.eval.scorer)},
                   {"reranked_r1_t2i", format_double(report.reranked_t2i.at(1))},
                   {"reranked_r1_i2t", format_double(report.reranked_i2t.at(1))}});
  return report;
}

// ---------------------------------------------------------------------------
// Benchmark

double BenchReport::stage_sum() const {
  double s = 0;
  for (const auto& st : stages) s += st.ms;
  return s;
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string hardware_note() {
  std::string cpu = "unknown cpu";
  if (std::ifstream in("/proc/cpuinfo"); in) {
    std::string line;
    while (std::getline(in, line))
      if (line.rfind("model name", 0) == 0) {
        cpu = line.substr(line.find(':') + 2);
        break;
      }
  }
  return cpu + ", " + std::to_string(std::thread::hardware_concurrency()) +
         " hw threads, single-threaded fp64; absolute timings are specific to this machine";
}

}  // namespace

BenchReport run_bench(const ModelConfig& model_config, const BenchSettings& settings, std::uint64_t seed,
                      const Model* trained) {
  model_config.validate();
  std::mt19937_64 rng(seed);
  std::optional<Model> fresh;
  if (!trained) fresh.emplace(Model::init(model_config, rng));
  const Model& model = trained ? *trained : *fresh;
  const auto& enc = model.config.encoder;
  if (settings.caption_len < 3 || settings.caption_len > enc.max_text_len)
    throw ConfigError("bench.caption_len must be in [3, model.max_text_len]");

  const std::size_t b = settings.batch;
  std::vector<Tensor> raw;
  for (std::size_t i = 0; i < b; ++i)
    raw.push_back(Tensor::randn({settings.raw_tokens, model.config.d_vision()}, 1.0, rng));
  std::vector<TokenizedText> texts;
  std::uniform_int_distribution<TokenId> word(Vocabulary::kReserved, static_cast<TokenId>(enc.vocab_size - 1));
  for (std::size_t i = 0; i < b; ++i) {
    TokenizedText t;
    t.ids.push_back(Vocabulary::kCls);
    for (std::size_t k = 0; k + 2 < settings.caption_len; ++k) t.ids.push_back(word(rng));
    t.ids.push_back(Vocabulary::kSep);
    t.attention_mask.assign(t.ids.size(), 1);
    texts.push_back(std::move(t));
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < b; ++i) pairs.emplace_back(i, i);

  BenchReport report;
  report.variant = to_string(model.config.adapter);
  report.batch = b;
  report.vision_tokens = model.config.vision_tokens(settings.raw_tokens);
  report.caption_len = settings.caption_len;
  report.weights = trained ? "trained checkpoint" : "random init (timing does not depend on weights)";
  report.hardware = hardware_note();

  double adapter_ms = 0, encoder_ms = 0, heads_ms = 0, rerank_ms = 0, full_ms = 0;
  volatile double sink = 0;
  for (std::size_t it = 0; it < settings.warmup + settings.iters; ++it) {
    const bool timed = it >= settings.warmup;

    // End to end: adapter, then reranking over its outputs.
    auto t0 = Clock::now();
    std::vector<Tensor> adapted;
    for (const Tensor& r : raw) adapted.push_back(model.adapt(r));
    auto t1 = Clock::now();
    const auto logits = score_pairs(model, adapted, texts, pairs, settings.chunk);
    const double rerank = ms_since(t1);
    const double full = ms_since(t0);
    sink = sink + logits[0];

    // Per stage.
    auto ta = Clock::now();
    std::vector<Tensor> staged;
    for (const Tensor& r : raw) staged.push_back(model.adapt(r));
    const double a_ms = ms_since(ta);
    double e_ms = 0, h_ms = 0;
    for (std::size_t begin = 0; begin < b; begin += settings.chunk) {
      const std::size_t end = std::min(b, begin + settings.chunk);
      std::vector<SequenceLayout> layouts;
      std::vector<Var> vision;
      for (std::size_t p = begin; p < end; ++p) {
        layouts.push_back(make_layout(staged[p].rows(), texts[p]));
        vision.push_back(constant_ref(staged[p]));
      }
      auto te = Clock::now();
      auto batch = encode_batch(nullptr, layouts, vision, model.encoder);
      e_ms += ms_since(te);
      auto th = Clock::now();
      const Tensor l = itm_head(nullptr, batch.hidden, cls_rows(batch), model.encoder).value();
      h_ms += ms_since(th);
      sink = sink + l[0];
    }
    if (timed) {
      adapter_ms += a_ms;
      encoder_ms += e_ms;
      heads_ms += h_ms;
      rerank_ms += rerank;
      full_ms += full;
    }
  }
  const double n = static_cast<double>(settings.iters);
  report.rerank_ms = rerank_ms / n;
  report.full_ms = full_ms / n;
  report.stages = {{"adapter", adapter_ms / n}, {"encoder", encoder_ms / n}, {"heads", heads_ms / n}};
  return report;
}

std::string format_bench(const BenchReport& r) {
  std::ostringstream out;
  out.precision(6);
  out << "variant = " << r.variant << "\n"
      << "batch = " << r.batch << "\n"
      << "vision_tokens = " << r.vision_tokens << "\n"
      << "caption_len = " << r.caption_len << "\n"
      << "rerank_ms_per_batch = " << r.rerank_ms << "\n"
      << "rerank_pairs_per_second = " << r.pairs_per_second() << "\n"
      << "end_to_end_ms_per_batch = " << r.full_ms << "\n";
  for (const auto& s : r.stages) out << "stage." << s.name << "_ms = " << s.ms << "\n";
  out << "stage_sum_ms = " << r.stage_sum() << "\n"
      << "weights = " << r.weights << "\n"
      << "hardware = " << r.hardware << "\n"
      << "note = rerank timings assume cached adapter outputs; captions are " << r.caption_len
      << " tokens long; tokenization and disk reads are excluded\n";
  return out.str();
}

BenchReport cmd_bench(const PipelineConfig& config, const CommandOptions&, std::ostream& log) {
  const RunPaths paths(config.run.dir);
  begin_command(paths, config, "bench", log);
  std::optional<Model> trained;
  if (fs::exists(paths.model())) trained.emplace(load_model(config, paths.model()));
  const BenchReport report = run_bench(config.model, config.bench, config.run.seed, trained ? &*trained : nullptr);
  const std::string text = format_bench(report);
  write_text(paths.bench(), text);
  log << text;
  update_metadata(paths, config, "bench",
                  {{"rerank_ms_per_batch", format_double(report.rerank_ms)}, {"variant", report.variant}});
  return report;
}

}  // namespace edje
