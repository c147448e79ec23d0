#include "edje/adapter.hpp"

#include "edje/errors.hpp"
#include "edje/init.hpp"

namespace edje {

namespace {

void require_positive(const char* what, std::size_t v) {
  if (v == 0) throw ConfigError(std::string("adapter ") + what + " must be positive");
}

void check_width(const char* op, const Tensor& x, std::size_t expected) {
  if (x.cols() != expected || x.empty()) {
    throw ConfigError(std::string(op) + ": input " + shape_string(x.shape()) +
                      " does not have d_vision = " + std::to_string(expected) + " columns");
  }
}

}  // namespace

void CompressionAdapterConfig::validate() const {
  require_positive("tokens", tokens);
  require_positive("d_vision", d_vision);
  require_positive("d_language", d_language);
  require_positive("hidden", hidden);
  if (heads == 0 || d_vision % heads != 0) {
    throw ConfigError("adapter d_vision " + std::to_string(d_vision) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

void LocalAdapterConfig::validate() const {
  require_positive("d_vision", d_vision);
  require_positive("d_language", d_language);
  require_positive("hidden", hidden);
}

CompressionAdapterParams CompressionAdapterParams::init(const CompressionAdapterConfig& config,
                                                        std::mt19937_64& rng) {
  config.validate();
  CompressionAdapterParams p;
  p.config = config;
  const std::size_t dv = config.d_vision;
  p.query = Parameter{Tensor::randn({config.tokens, dv}, 1.0, rng), false};
  p.w_k = init_weight(dv, dv, rng);
  p.w_v = init_weight(dv, dv, rng);
  if (config.out_proj) p.w_out = init_weight(dv, dv, rng);
  p.ln_gain = init_constant(dv, 1.0);
  p.ln_bias = init_constant(dv, 0.0);
  p.mlp_w1 = init_weight(dv, config.hidden, rng);
  p.mlp_w2 = init_weight(config.hidden, dv, rng);
  if (config.mlp_bias) {
    p.mlp_b1 = init_constant(config.hidden, 0.0);
    p.mlp_b2 = init_constant(dv, 0.0);
  }
  p.w_proj = init_weight(dv, config.d_language, rng);
  return p;
}

NamedParams CompressionAdapterParams::named_parameters(const std::string& prefix) {
  NamedParams out{{prefix + "query", &query}, {prefix + "w_k", &w_k}, {prefix + "w_v", &w_v}};
  if (config.out_proj) out.emplace_back(prefix + "w_out", &w_out);
  out.emplace_back(prefix + "ln_gain", &ln_gain);
  out.emplace_back(prefix + "ln_bias", &ln_bias);
  out.emplace_back(prefix + "mlp_w1", &mlp_w1);
  if (config.mlp_bias) out.emplace_back(prefix + "mlp_b1", &mlp_b1);
  out.emplace_back(prefix + "mlp_w2", &mlp_w2);
  if (config.mlp_bias) out.emplace_back(prefix + "mlp_b2", &mlp_b2);
  out.emplace_back(prefix + "w_proj", &w_proj);
  return out;
}

ConstNamedParams CompressionAdapterParams::named_parameters(const std::string& prefix) const {
  ConstNamedParams out;
  for (auto& [name, p] : const_cast<CompressionAdapterParams*>(this)->named_parameters(prefix)) {
    out.emplace_back(name, p);
  }
  return out;
}

LocalAdapterParams LocalAdapterParams::init(const LocalAdapterConfig& config, std::mt19937_64& rng) {
  config.validate();
  LocalAdapterParams p;
  p.config = config;
  if (config.norm) {
    p.ln_gain = init_constant(config.d_vision, 1.0);
    p.ln_bias = init_constant(config.d_vision, 0.0);
  }
  p.w1 = init_weight(config.d_vision, config.hidden, rng);
  p.w2 = init_weight(config.hidden, config.d_language, rng);
  if (config.bias) {
    p.b1 = init_constant(config.hidden, 0.0);
    p.b2 = init_constant(config.d_language, 0.0);
  }
  return p;
}

NamedParams LocalAdapterParams::named_parameters(const std::string& prefix) {
  NamedParams out;
  if (config.norm) {
    out.emplace_back(prefix + "ln_gain", &ln_gain);
    out.emplace_back(prefix + "ln_bias", &ln_bias);
  }
  out.emplace_back(prefix + "w1", &w1);
  if (config.bias) out.emplace_back(prefix + "b1", &b1);
  out.emplace_back(prefix + "w2", &w2);
  if (config.bias) out.emplace_back(prefix + "b2", &b2);
  return out;
}

ConstNamedParams LocalAdapterParams::named_parameters(const std::string& prefix) const {
  ConstNamedParams out;
  for (auto& [name, p] : const_cast<LocalAdapterParams*>(this)->named_parameters(prefix)) {
    out.emplace_back(name, p);
  }
  return out;
}

Var compress(Tape* tape, const Var& x, std::span<const std::size_t> token_counts,
             const CompressionAdapterParams& params) {
  const auto& cfg = params.config;
  check_width("compress", x.value(), cfg.d_vision);
  AttentionLayout layout;
  std::size_t offset = 0;
  for (std::size_t n : token_counts) {
    if (n == 0) throw ConfigError("compress: image with zero vision tokens");
    layout.segments.push_back({0, cfg.tokens, offset, n});
    offset += n;
  }
  if (offset != x.rows()) {
    throw ConfigError("compress: token counts sum to " + std::to_string(offset) + " but input has " +
                      std::to_string(x.rows()) + " rows");
  }
  Var k = matmul(x, bind(tape, params.w_k));
  Var v = matmul(x, bind(tape, params.w_v));
  Var h = attention(bind(tape, params.query), k, v, cfg.heads, layout);
  if (cfg.out_proj) h = matmul(h, bind(tape, params.w_out));
  Var z = layer_norm(h, bind(tape, params.ln_gain), bind(tape, params.ln_bias), cfg.ln_eps);
  Var hidden = matmul(z, bind(tape, params.mlp_w1));
  if (cfg.mlp_bias) hidden = add_bias(hidden, bind(tape, params.mlp_b1));
  Var mlp = matmul(gelu(hidden), bind(tape, params.mlp_w2));
  if (cfg.mlp_bias) mlp = add_bias(mlp, bind(tape, params.mlp_b2));
  Var o = add(h, mlp);
  return matmul(o, bind(tape, params.w_proj));
}

Tensor compress(const Tensor& x, const CompressionAdapterParams& params) {
  const std::size_t counts[] = {x.rows()};
  return compress(nullptr, constant_ref(x), counts, params).value();
}

std::vector<Tensor> compression_attention(const Tensor& x, const CompressionAdapterParams& params) {
  check_width("compression_attention", x, params.config.d_vision);
  Tensor k = matmul(constant_ref(x), constant_ref(params.w_k.value)).value();
  return attention_probabilities(params.query.value, k, params.config.heads,
                                 AttentionLayout::single(params.config.tokens, x.rows()));
}

Var local_project(Tape* tape, const Var& x, const LocalAdapterParams& params) {
  const auto& cfg = params.config;
  check_width("local_project", x.value(), cfg.d_vision);
  Var z = cfg.norm ? layer_norm(x, bind(tape, params.ln_gain), bind(tape, params.ln_bias), cfg.ln_eps)
                   : x;
  Var hidden = matmul(z, bind(tape, params.w1));
  if (cfg.bias) hidden = add_bias(hidden, bind(tape, params.b1));
  Var out = matmul(gelu(hidden), bind(tape, params.w2));
  if (cfg.bias) out = add_bias(out, bind(tape, params.b2));
  return out;
}

Tensor local_project(const Tensor& x, const LocalAdapterParams& params) {
  return local_project(nullptr, constant_ref(x), params).value();
}

std::size_t adapter_param_count(const CompressionAdapterParams& params) {
  std::size_t n = 0;
  for (const auto& [name, p] : params.named_parameters()) n += p->value.size();
  return n;
}

std::size_t adapter_param_count(const LocalAdapterParams& params) {
  std::size_t n = 0;
  for (const auto& [name, p] : params.named_parameters()) n += p->value.size();
  return n;
}

}  // namespace edje
