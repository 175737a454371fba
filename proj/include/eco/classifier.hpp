#ifndef ECO_CLASSIFIER_HPP_
#define ECO_CLASSIFIER_HPP_

#include <cstdint>
#include <span>
#include <vector>

#include "eco/bank.hpp"
#include "eco/numerics.hpp"
#include "eco/prompt_ensemble.hpp"
#include "eco/text_encoder.hpp"

namespace eco {

// CLIP's converged logit scale is 100.
inline constexpr double kDefaultTemperature = 0.01;

struct ClassifierConfig {
  double temperature = kDefaultTemperature;

  void validate() const;
};

// cos(text_k, query) / temperature for every class. Cosines are clamped to
// [-1, 1] after normalization.
template <typename T>
std::vector<T> cosine_logits(std::span<const T> query,
                             const Tensor<T>& text_features, double temperature);

// p(y = k | query) = softmax_k(cos(text_k, query) / temperature).
template <typename T>
std::vector<T> class_probabilities(std::span<const T> query,
                                   const Tensor<T>& text_features,
                                   double temperature);

template <typename T>
struct LossGrad {
  T loss{0};                   // mean cross-entropy over the batch
  Tensor<T> d_text_features;   // [K, d]
  Tensor<T> probabilities;     // [B, K]
};

// Mean cross-entropy of the cosine softmax and its exact gradient with
// respect to each text feature. Query gradients are not formed.
template <typename T>
LossGrad<T> cross_entropy(const Tensor<T>& queries,
                          std::span<const std::uint32_t> labels,
                          const Tensor<T>& text_features, double temperature);

// argmax_k cos(prototype_k, query); ties go to the lowest index. The argmax
// of the softmax is the same for every positive temperature.
template <typename T>
std::size_t predict(const Tensor<T>& prototypes, std::span<const T> query);

template <typename T>
std::size_t predict(const PrototypeBank<T>& bank, std::span<const T> query) {
  return predict(bank.prototypes, query);
}

// Fraction of bank records whose prediction matches the label.
template <typename T>
double accuracy(const Tensor<T>& prototypes, const EmbeddingBank& bank);

// Hand-prompt ensembling: per class, average the encoded features of its P
// token sequences (each a complete sequence ending with its EOT token), then
// classify the bank by cosine. `prompts[k]` lists class k's sequences.
template <typename T>
double zero_shot_baseline(
    const EncoderWeights<T>& weights,
    const std::vector<std::vector<std::vector<TokenId>>>& prompts,
    const EmbeddingBank& bank, std::size_t threads = 1);

// The averaged hand-prompt class features used by zero_shot_baseline.
template <typename T>
Tensor<T> hand_prompt_features(
    const EncoderWeights<T>& weights,
    const std::vector<std::vector<std::vector<TokenId>>>& prompts,
    std::size_t threads = 1);

struct LinearProbeOptions {
  double tolerance = 1e-6;  // on the gradient norm
  std::size_t max_iterations = 20000;
};

struct LinearProbeModel {
  Tensor<double> weights;  // [d, K]
  Tensor<double> bias;     // [K]
  std::size_t iterations = 0;
  double gradient_norm = 0.0;

  std::size_t predict(std::span<const float> x) const;
};

// Multinomial logistic regression on raw features, with l2/2 * |theta|^2 on
// weights and bias, by full-batch accelerated gradient descent.
LinearProbeModel fit_linear_probe(const EmbeddingBank& train, double l2,
                                  const LinearProbeOptions& options = {});

double linear_probe(const EmbeddingBank& train, const EmbeddingBank& test,
                    double l2, const LinearProbeOptions& options = {});

}  // namespace eco

#endif  // ECO_CLASSIFIER_HPP_
