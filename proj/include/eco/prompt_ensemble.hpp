#ifndef ECO_PROMPT_ENSEMBLE_HPP_
#define ECO_PROMPT_ENSEMBLE_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "eco/numerics.hpp"
#include "eco/text_encoder.hpp"

namespace eco {

struct ClassEntry {
  std::string name;
  std::vector<TokenId> tokens;

  friend bool operator==(const ClassEntry&, const ClassEntry&) = default;
};

// Pre-tokenized class names, shared by every prompt.
struct ClassTokenTable {
  std::vector<ClassEntry> classes;

  std::size_t size() const { return classes.size(); }
  // K >= 2, non-empty sequences, every id below vocab_size.
  void validate(std::size_t vocab_size) const;

  friend bool operator==(const ClassTokenTable&,
                         const ClassTokenTable&) = default;
};

struct SpecialTokens {
  TokenId sot = 0;
  TokenId eot = 0;

  void validate(std::size_t vocab_size) const;
};

// D prompts of N learnable context vectors in token-embedding space.
template <typename T>
struct PromptEnsemble {
  std::size_t prompts = 0;  // D
  std::size_t ctx_len = 0;  // N
  Tensor<T> context;        // [D, N, w]

  std::size_t width() const { return context.rank() == 3 ? context.extent(2) : 0; }
  std::size_t trainable_parameters() const { return context.size(); }
  std::uint64_t hash() const;
  void validate() const;

  template <typename U>
  PromptEnsemble<U> cast() const {
    return {prompts, ctx_len, context.template cast<U>()};
  }
};

template <typename T>
PromptEnsemble<T> init_context(std::size_t prompts, std::size_t ctx_len,
                               std::size_t width, double std, SeededRng& rng);

template <typename T>
struct AssembledSequence {
  Tensor<T> embeddings;  // [len, w]
  std::size_t eot_index = 0;
  std::vector<std::size_t> ctx_positions;
};

// [E(sot), v_i1 .. v_iN, E(class tokens of k)..., E(eot)].
template <typename T>
AssembledSequence<T> assemble_sequence(const PromptEnsemble<T>& ensemble,
                                       std::size_t prompt_index,
                                       const ClassTokenTable& classes,
                                       std::size_t class_index,
                                       const EncoderWeights<T>& weights,
                                       const SpecialTokens& specials);

struct EnsembleOptions {
  // L2-normalize each prompt's feature before averaging. Off by default: the
  // class feature is the plain mean of the raw per-prompt features.
  bool normalize_before_average = false;
  std::size_t threads = 1;
};

template <typename T>
struct EnsembleFeatures {
  Tensor<T> features;  // [K, d]
  std::size_t prompts = 0;
  std::size_t classes = 0;
  std::size_t ctx_len = 0;
  bool normalized = false;
  // Indexed [i * K + k].
  std::vector<ForwardCache<T>> caches;
  std::vector<Tensor<T>> prompt_features;
};

template <typename T>
EnsembleFeatures<T> ensemble_class_features(
    const EncoderWeights<T>& weights, const PromptEnsemble<T>& ensemble,
    const ClassTokenTable& classes, const SpecialTokens& specials,
    const EnsembleOptions& options = {});

// Gradient of the loss w.r.t. every context vector, given dL/dfeatures.
// Class and special-token gradients are dropped; the sum over classes runs in
// ascending k.
template <typename T>
Tensor<T> scatter_feature_grads(const Tensor<T>& d_features,
                                const EnsembleFeatures<T>& forward,
                                const EncoderWeights<T>& weights,
                                std::size_t threads = 1);

template <typename T>
struct PrototypeBank {
  Tensor<T> prototypes;  // [K, d]
  std::uint64_t encoder_hash = 0;
  std::uint64_t ensemble_hash = 0;

  std::size_t classes() const { return prototypes.extent(0); }
  std::size_t dim() const { return prototypes.extent(1); }
};

template <typename T>
PrototypeBank<T> precompute_prototypes(const EncoderWeights<T>& weights,
                                       const PromptEnsemble<T>& ensemble,
                                       const ClassTokenTable& classes,
                                       const SpecialTokens& specials,
                                       const EnsembleOptions& options = {});

}  // namespace eco

#endif  // ECO_PROMPT_ENSEMBLE_HPP_
