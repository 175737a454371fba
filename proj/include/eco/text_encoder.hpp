#ifndef ECO_TEXT_ENCODER_HPP_
#define ECO_TEXT_ENCODER_HPP_

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eco/numerics.hpp"

namespace eco {

using TokenId = std::uint32_t;

struct EncoderConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t width = 64;
  std::size_t output_dim = 32;
  std::size_t max_positions = 32;
  std::size_t vocab_size = 128;
  double eps = 1e-5;

  std::size_t head_dim() const { return width / heads; }
  // Throws ConfigError on a zero extent or width not divisible by heads.
  void validate() const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Total scalar count of EncoderWeights for a config:
// V*w + T*w + L*(12w^2 + 13w) + 2w + w*d.
std::size_t parameter_count(const EncoderConfig& config);

template <typename T>
struct BlockWeights {
  Tensor<T> ln1_gain, ln1_bias;  // [w]
  Tensor<T> qkv_weight;          // [w, 3w], columns are q | k | v
  Tensor<T> qkv_bias;            // [3w]
  Tensor<T> out_weight;          // [w, w]
  Tensor<T> out_bias;            // [w]
  Tensor<T> ln2_gain, ln2_bias;  // [w]
  Tensor<T> fc_weight;           // [w, 4w]
  Tensor<T> fc_bias;             // [4w]
  Tensor<T> proj_weight;         // [4w, w]
  Tensor<T> proj_bias;           // [w]
};

// Frozen text-encoder parameters. token_table is the word-embedding layer.
template <typename T>
struct EncoderWeights {
  EncoderConfig config;
  Tensor<T> token_table;  // [V, w]
  Tensor<T> positional;   // [T, w]
  std::vector<BlockWeights<T>> blocks;
  Tensor<T> ln_final_gain, ln_final_bias;  // [w]
  Tensor<T> projection;                    // [w, d]

  // Every tensor under its canonical serialization name, in a fixed order.
  std::vector<std::pair<std::string, const Tensor<T>*>> named_tensors() const;
  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors();

  template <typename U>
  EncoderWeights<U> cast() const;

  // Content fingerprint over config and every tensor's bytes.
  std::uint64_t hash() const;
};

// Expected shape of each named tensor for a config, in named_tensors() order.
std::vector<std::pair<std::string, Shape>> weight_schema(
    const EncoderConfig& config);

enum class InitScheme {
  // Gaussian(0, 0.02) for every matrix and table.
  kUniform,
  // Width-scaled: attention and projections w^-1/2, MLP (2w)^-1/2, residual
  // outputs w^-1/2 (2L)^-1/2, positional 0.01, token table 0.02.
  kWidthScaled,
};

// Zero biases, unit layer-norm gains, Gaussian matrices; deterministic in rng.
template <typename T>
EncoderWeights<T> init_random(const EncoderConfig& config, SeededRng& rng,
                              InitScheme scheme = InitScheme::kUniform);

template <typename T>
Tensor<T> embed_tokens(const EncoderWeights<T>& weights,
                       std::span<const TokenId> ids);

// Saved activations for one encode_sequence call. Only rows 0..eot_index are
// computed: with a causal mask nothing after the EOT row reaches the feature.
template <typename T>
struct ForwardCache {
  struct Layer {
    Tensor<T> input;                  // residual stream into the block [n, w]
    std::vector<NormStats<T>> ln1;    // per row
    Tensor<T> qkv;                    // [n, 3w]
    Tensor<T> attention;              // [H, n, n], zero above the diagonal
    Tensor<T> mid;                    // residual after attention [n, w]
    std::vector<NormStats<T>> ln2;
    Tensor<T> mlp_pre;                // [n, 4w] before QuickGELU
  };
  std::size_t length = 0;  // full input length
  std::size_t eot_index = 0;
  std::vector<Layer> layers;
  Tensor<T> final_input;  // EOT row entering the final layer norm [w]
  NormStats<T> final_stats;
};

template <typename T>
struct EncodeResult {
  Tensor<T> feature;  // [d], not length-normalized
  ForwardCache<T> cache;
};

template <typename T>
EncodeResult<T> encode_sequence(const EncoderWeights<T>& weights,
                                const Tensor<T>& embeddings,
                                std::size_t eot_index);

// Gradient of dot(d_feature, feature) with respect to the input embeddings.
// Rows after eot_index are zero. No weight gradients are formed.
template <typename T>
Tensor<T> encode_backward(const EncoderWeights<T>& weights,
                          const ForwardCache<T>& cache,
                          const Tensor<T>& d_feature);

}  // namespace eco

#endif  // ECO_TEXT_ENCODER_HPP_
