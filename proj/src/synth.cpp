#include "edje/synth.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <set>

#include "edje/errors.hpp"

namespace edje {

namespace {

constexpr std::size_t kMaxSlots = 8;
constexpr std::size_t kMaxValues = 8;

const std::vector<std::vector<std::string>>& word_table() {
  static const std::vector<std::vector<std::string>> table{
      {"tiny", "small", "short", "tall", "large", "huge", "wide", "narrow"},
      {"red", "blue", "green", "yellow", "purple", "orange", "black", "white"},
      {"wooden", "metal", "glass", "stone", "paper", "plastic", "rubber", "woolen"},
      {"striped", "dotted", "plain", "checkered", "spotted", "wavy", "zigzag", "marbled"},
      {"cube", "sphere", "cone", "ring", "star", "disk", "pyramid", "torus"},
      {"resting", "rolling", "floating", "hanging", "leaning", "spinning", "sinking", "tilted"},
      {"beach", "forest", "city", "desert", "field", "kitchen", "garden", "street"},
      {"morning", "noon", "dusk", "night", "winter", "summer", "spring", "autumn"},
  };
  return table;
}

const char* const kPrefixes[] = {"a", "a photo of a", "an image of a", "a picture of a"};

std::string make_id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05zu", prefix, i);
  return buf;
}

}  // namespace

const std::string& slot_word(std::size_t slot, std::size_t value) {
  return word_table().at(slot).at(value);
}

void SynthConfig::validate() const {
  if (slots < 1 || slots > kMaxSlots) throw ConfigError("synth.slots must be in [1, 8]");
  if (values < 2 || values > kMaxValues) throw ConfigError("synth.values must be in [2, 8]");
  if (tokens < slots) throw ConfigError("synth.tokens must be at least synth.slots");
  if (d_vision == 0 || d_emb == 0) throw ConfigError("synth dimensions must be positive");
  if (train_images + test_images == 0) throw ConfigError("synth produces no images");
  double combos = 1;
  for (std::size_t s = 0; s < slots; ++s) combos *= double(values);
  if (combos < double(train_images))
    throw ConfigError("synth.values^synth.slots must be at least synth.train_images (distinct training latents)");
  if (captions_per_image == 0) throw ConfigError("synth.captions_per_image must be positive");
  if (!(slot_weight >= 0 && concept_weight >= 0 && token_noise >= 0 && embedding_noise >= 0 && instance_weight >= 0))
    throw ConfigError("synth noise levels must be non-negative");
  if (width_bits != 16 && width_bits != 32 && width_bits != 64)
    throw ConfigError("synth.width must be 16, 32 or 64");
}

SynthDataset generate_synthetic(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t n = config.images();
  std::normal_distribution<double> unit(0.0, 1.0);

  // Shared structure first so every image sees the same prototypes.
  std::vector<Tensor> prototypes;  // per slot: values x d_vision
  std::vector<Tensor> concepts;    // per slot: values x d_emb
  const Tensor slot_ids = Tensor::randn({config.slots, config.d_vision}, 1.0, rng);
  for (std::size_t s = 0; s < config.slots; ++s) {
    prototypes.push_back(Tensor::randn({config.values, config.d_vision}, 1.0, rng));
    concepts.push_back(Tensor::randn({config.values, config.d_emb}, 1.0 / std::sqrt(double(config.slots)), rng));
  }

  SynthDataset out;
  out.image_embeddings = Tensor({n, config.d_emb});
  const std::size_t m = n * config.captions_per_image;
  out.caption_embeddings = Tensor({m, config.d_emb});
  std::uniform_int_distribution<std::size_t> value(0, config.values - 1);
  std::uniform_int_distribution<std::size_t> prefix(0, std::size(kPrefixes) - 1);

  std::set<std::vector<std::size_t>> train_latents;  // training pairs stay distinguishable
  for (std::size_t i = 0; i < n; ++i) {
    const std::string id = make_id("img", i);
    const std::string split = i < config.train_images ? "train" : "test";
    std::vector<std::size_t> latent(config.slots);
    do {
      for (auto& v : latent) v = value(rng);
    } while (i < config.train_images && !train_latents.insert(latent).second);

    Tensor tokens({config.tokens, config.d_vision});
    for (std::size_t t = 0; t < config.tokens; ++t) {
      const std::size_t s = t % config.slots;
      for (std::size_t k = 0; k < config.d_vision; ++k)
        tokens(t, k) = config.slot_weight * slot_ids(s, k) + prototypes[s](latent[s], k) +
                       config.token_noise * unit(rng);
    }

    std::vector<double> shared(config.d_emb, 0.0);
    for (std::size_t s = 0; s < config.slots; ++s)
      for (std::size_t k = 0; k < config.d_emb; ++k) shared[k] += config.concept_weight * concepts[s](latent[s], k);
    for (std::size_t k = 0; k < config.d_emb; ++k)
      shared[k] += config.instance_weight * unit(rng);
    for (std::size_t k = 0; k < config.d_emb; ++k)
      out.image_embeddings(i, k) = shared[k] + config.embedding_noise * unit(rng);

    for (std::size_t c = 0; c < config.captions_per_image; ++c) {
      const std::size_t row = i * config.captions_per_image + c;
      std::string text = kPrefixes[c == 0 ? 0 : prefix(rng)];
      for (std::size_t s = 0; s < config.slots; ++s) text += " " + slot_word(s, latent[s]);
      out.caption_ids.push_back(make_id("cap", row));
      out.captions.push_back(std::move(text));
      out.caption_images.push_back(id);
      out.caption_splits.push_back(split);
      for (std::size_t k = 0; k < config.d_emb; ++k)
        out.caption_embeddings(row, k) = shared[k] + config.embedding_noise * unit(rng);
    }

    out.image_ids.push_back(id);
    out.image_splits.push_back(split);
    out.image_tokens.push_back(std::move(tokens));
    out.latents.push_back(std::move(latent));
  }
  return out;
}

}  // namespace edje
