#pragma once

#include <random>
#include <span>
#include <string>

#include "edje/adapter.hpp"
#include "edje/encoder.hpp"

namespace edje {

enum class AdapterKind { kLocal, kCompressed };

AdapterKind parse_adapter_kind(const std::string& name);
const char* to_string(AdapterKind kind);

/// Adapter and joint encoder. The adapter's d_language must equal the
/// encoder's hidden size.
struct ModelConfig {
  AdapterKind adapter = AdapterKind::kCompressed;
  CompressionAdapterConfig compression;
  LocalAdapterConfig local;
  EncoderConfig encoder;

  void validate() const;
  std::size_t d_vision() const;
  /// Tokens the encoder sees per image for `raw_tokens` adapter inputs.
  std::size_t vision_tokens(std::size_t raw_tokens) const;
};

struct Model {
  ModelConfig config;
  CompressionAdapterParams compression;
  LocalAdapterParams local;
  EncoderParams encoder;

  static Model init(const ModelConfig& config, std::mt19937_64& rng);

  NamedParams named_parameters();
  ConstNamedParams named_parameters() const;

  /// Adapts a stack of images (token_counts rows each) into encoder tokens.
  Var adapt(Tape* tape, const Var& raw, std::span<const std::size_t> token_counts) const;
  Tensor adapt(const Tensor& raw) const;
};

}  // namespace edje
