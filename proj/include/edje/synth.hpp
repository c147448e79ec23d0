#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "edje/tensor.hpp"

namespace edje {

/// Planted-structure corpus. Each image has a latent value per slot; its raw
/// tokens are noisy copies of per-(slot, value) prototypes, its captions
/// name the value words, and both embeddings share the latent plus a
/// per-instance vector before independent noise. Tokens also carry a
/// per-slot identity vector, the analogue of a ViT position embedding.
/// Training images get distinct latents.
struct SynthConfig {
  std::size_t train_images = 32;
  std::size_t test_images = 200;
  std::size_t captions_per_image = 1;
  std::size_t slots = 4;
  std::size_t values = 6;
  std::size_t tokens = 16;  // raw vision tokens per image
  std::size_t d_vision = 16;
  std::size_t d_emb = 16;
  double slot_weight = 1.0;  // per-slot identity vector added to each token
  double token_noise = 0.5;
  double embedding_noise = 0.5;
  double concept_weight = 1.0;  // latent share of the embeddings
  double instance_weight = 1.0;
  std::uint16_t width_bits = 64;  // raw dump element width

  void validate() const;
  std::size_t images() const noexcept { return train_images + test_images; }
};

struct SynthDataset {
  std::vector<std::string> image_ids;
  std::vector<std::string> image_splits;  // "train" or "test"
  std::vector<Tensor> image_tokens;        // tokens x d_vision
  std::vector<std::vector<std::size_t>> latents;
  Tensor image_embeddings;  // images x d_emb

  std::vector<std::string> caption_ids;
  std::vector<std::string> captions;
  std::vector<std::string> caption_images;  // image id per caption
  std::vector<std::string> caption_splits;
  Tensor caption_embeddings;  // captions x d_emb
};

/// Word for value v of slot s.
const std::string& slot_word(std::size_t slot, std::size_t value);

SynthDataset generate_synthetic(const SynthConfig& config, std::uint64_t seed);

}  // namespace edje
