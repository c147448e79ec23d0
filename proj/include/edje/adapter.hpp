#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "edje/autograd.hpp"

namespace edje {

using NamedParams = std::vector<std::pair<std::string, Parameter*>>;
using ConstNamedParams = std::vector<std::pair<std::string, const Parameter*>>;

struct CompressionAdapterConfig {
  std::size_t tokens = 64;  // m, compressed tokens per image
  std::size_t d_vision = 1024;
  std::size_t d_language = 384;
  std::size_t hidden = 8192;
  std::size_t heads = 8;
  bool out_proj = true;  // projection after the concatenated heads
  bool mlp_bias = true;
  double ln_eps = 1e-5;

  void validate() const;
};

/// m learnable queries cross-attending over the vision tokens:
///   K = X W_K, V = X W_V, H = MHA(Q, K, V)
///   O = H + MLP(LayerNorm(H)), Y = O W_proj
struct CompressionAdapterParams {
  CompressionAdapterConfig config;
  Parameter query;    // m x d_vision
  Parameter w_k;      // d_vision x d_vision
  Parameter w_v;      // d_vision x d_vision
  Parameter w_out;    // d_vision x d_vision, unused when !out_proj
  Parameter ln_gain;  // d_vision
  Parameter ln_bias;  // d_vision
  Parameter mlp_w1;   // d_vision x hidden
  Parameter mlp_b1;   // hidden
  Parameter mlp_w2;   // hidden x d_vision
  Parameter mlp_b2;   // d_vision
  Parameter w_proj;   // d_vision x d_language, no bias

  static CompressionAdapterParams init(const CompressionAdapterConfig& config, std::mt19937_64& rng);

  NamedParams named_parameters(const std::string& prefix = "adapter.");
  ConstNamedParams named_parameters(const std::string& prefix = "adapter.") const;
};

struct LocalAdapterConfig {
  std::size_t d_vision = 1024;
  std::size_t d_language = 384;
  std::size_t hidden = 8192;
  bool norm = true;
  bool bias = true;
  double ln_eps = 1e-5;

  void validate() const;
};

/// Per-token MLP: Y = W2 gelu(W1 LayerNorm(x) + b1) + b2, row by row.
struct LocalAdapterParams {
  LocalAdapterConfig config;
  Parameter ln_gain;  // d_vision, unused when !norm
  Parameter ln_bias;
  Parameter w1;  // d_vision x hidden
  Parameter b1;  // hidden, unused when !bias
  Parameter w2;  // hidden x d_language
  Parameter b2;  // d_language

  static LocalAdapterParams init(const LocalAdapterConfig& config, std::mt19937_64& rng);

  NamedParams named_parameters(const std::string& prefix = "adapter.");
  ConstNamedParams named_parameters(const std::string& prefix = "adapter.") const;
};

/// Compresses a stack of images. `x` holds each image's vision tokens
/// consecutively, `token_counts[i]` rows for image i; the result holds m rows
/// per image in the same order.
Var compress(Tape* tape, const Var& x, std::span<const std::size_t> token_counts,
             const CompressionAdapterParams& params);
/// Single image, no gradient: n x d_vision -> m x d_language.
Tensor compress(const Tensor& x, const CompressionAdapterParams& params);

/// Attention weights of the queries over one image's tokens, one matrix per head.
std::vector<Tensor> compression_attention(const Tensor& x, const CompressionAdapterParams& params);

Var local_project(Tape* tape, const Var& x, const LocalAdapterParams& params);
Tensor local_project(const Tensor& x, const LocalAdapterParams& params);

std::size_t adapter_param_count(const CompressionAdapterParams& params);
std::size_t adapter_param_count(const LocalAdapterParams& params);

}  // namespace edje
