#include "edje/model.hpp"

#include "edje/errors.hpp"

namespace edje {

AdapterKind parse_adapter_kind(const std::string& name) {
  if (name == "local") return AdapterKind::kLocal;
  if (name == "compressed") return AdapterKind::kCompressed;
  throw ConfigError("adapter variant must be 'local' or 'compressed', got '" + name + "'");
}

const char* to_string(AdapterKind kind) {
  return kind == AdapterKind::kLocal ? "local" : "compressed";
}

void ModelConfig::validate() const {
  encoder.validate();
  if (adapter == AdapterKind::kCompressed) {
    compression.validate();
    if (compression.d_language != encoder.hidden) {
      throw ConfigError("adapter d_language " + std::to_string(compression.d_language) +
                        " does not match encoder hidden " + std::to_string(encoder.hidden));
    }
  } else {
    local.validate();
    if (local.d_language != encoder.hidden) {
      throw ConfigError("adapter d_language " + std::to_string(local.d_language) +
                        " does not match encoder hidden " + std::to_string(encoder.hidden));
    }
  }
}

std::size_t ModelConfig::d_vision() const {
  return adapter == AdapterKind::kCompressed ? compression.d_vision : local.d_vision;
}

std::size_t ModelConfig::vision_tokens(std::size_t raw_tokens) const {
  return adapter == AdapterKind::kCompressed ? compression.tokens : raw_tokens;
}

Model Model::init(const ModelConfig& config, std::mt19937_64& rng) {
  config.validate();
  Model m;
  m.config = config;
  if (config.adapter == AdapterKind::kCompressed) {
    m.compression = CompressionAdapterParams::init(config.compression, rng);
  } else {
    m.local = LocalAdapterParams::init(config.local, rng);
  }
  m.encoder = EncoderParams::init(config.encoder, rng);
  return m;
}

NamedParams Model::named_parameters() {
  NamedParams out = config.adapter == AdapterKind::kCompressed ? compression.named_parameters()
                                                               : local.named_parameters();
  for (auto& entry : encoder.named_parameters()) out.push_back(entry);
  return out;
}

ConstNamedParams Model::named_parameters() const {
  ConstNamedParams out;
  for (auto& [name, p] : const_cast<Model*>(this)->named_parameters()) out.emplace_back(name, p);
  return out;
}

Var Model::adapt(Tape* tape, const Var& raw, std::span<const std::size_t> token_counts) const {
  if (config.adapter == AdapterKind::kCompressed) return compress(tape, raw, token_counts, compression);
  return local_project(tape, raw, local);
}

Tensor Model::adapt(const Tensor& raw) const {
  if (config.adapter == AdapterKind::kCompressed) return compress(raw, compression);
  return local_project(raw, local);
}

}  // namespace edje
