#include "eco/prompt_ensemble.hpp"

#include <cmath>
#include <type_traits>

namespace eco {

void ClassTokenTable::validate(std::size_t vocab_size) const {
  if (classes.size() < 2) {
    throw ConfigError("class table needs at least 2 classes, got " +
                      std::to_string(classes.size()));
  }
  for (std::size_t k = 0; k < classes.size(); ++k) {
    if (classes[k].tokens.empty()) {
      throw ConfigError("class " + std::to_string(k) + " ('" +
                        classes[k].name + "') has no tokens");
    }
    for (TokenId id : classes[k].tokens) {
      if (id >= vocab_size) {
        throw VocabularyError("class '" + classes[k].name + "' uses token id " +
                              std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab_size));
      }
    }
  }
}

void SpecialTokens::validate(std::size_t vocab_size) const {
  if (sot >= vocab_size || eot >= vocab_size) {
    throw VocabularyError("special token ids (" + std::to_string(sot) + ", " +
                          std::to_string(eot) + ") exceed vocabulary of " +
                          std::to_string(vocab_size));
  }
  if (sot == eot) throw ConfigError("sot and eot ids must differ");
}

template <typename T>
std::uint64_t PromptEnsemble<T>::hash() const {
  Hasher h;
  h.update_u64(prompts);
  h.update_u64(ctx_len);
  h.update_tensor(context);
  return h.digest();
}

template <typename T>
void PromptEnsemble<T>::validate() const {
  if (prompts == 0 || ctx_len == 0) {
    throw ConfigError("prompt ensemble needs D >= 1 and N >= 1");
  }
  if (context.rank() != 3 || context.extent(0) != prompts ||
      context.extent(1) != ctx_len) {
    throw DimensionError("context tensor " + shape_to_string(context.shape()) +
                         " does not match D=" + std::to_string(prompts) +
                         ", N=" + std::to_string(ctx_len));
  }
}

template <typename T>
PromptEnsemble<T> init_context(std::size_t prompts, std::size_t ctx_len,
                               std::size_t width, double std, SeededRng& rng) {
  if (prompts == 0 || ctx_len == 0 || width == 0) {
    throw ConfigError("init_context needs D, N and width >= 1 (got D=" +
                      std::to_string(prompts) + ", N=" +
                      std::to_string(ctx_len) + ")");
  }
  PromptEnsemble<T> e{prompts, ctx_len, Tensor<T>({prompts, ctx_len, width})};
  for (T& v : e.context.values()) v = static_cast<T>(rng.gaussian(0.0, std));
  return e;
}

template <typename T>
AssembledSequence<T> assemble_sequence(const PromptEnsemble<T>& ensemble,
                                       std::size_t prompt_index,
                                       const ClassTokenTable& classes,
                                       std::size_t class_index,
                                       const EncoderWeights<T>& weights,
                                       const SpecialTokens& specials) {
  if (prompt_index >= ensemble.prompts || class_index >= classes.size()) {
    throw ContractError("prompt " + std::to_string(prompt_index) + " / class " +
                        std::to_string(class_index) + " out of range");
  }
  const std::size_t w = weights.config.width;
  if (ensemble.width() != w) {
    throw DimensionError("context width " + std::to_string(ensemble.width()) +
                         " differs from encoder width " + std::to_string(w));
  }
  const auto& class_tokens = classes.classes[class_index].tokens;
  const std::size_t n = ensemble.ctx_len;
  const std::size_t len = n + class_tokens.size() + 2;
  if (len > weights.config.max_positions) {
    throw SequenceLengthError(
        "assembled sequence for class '" + classes.classes[class_index].name +
        "' has length " + std::to_string(len) + " > max positions " +
        std::to_string(weights.config.max_positions));
  }

  std::vector<TokenId> framed;
  framed.reserve(class_tokens.size() + 2);
  framed.push_back(specials.sot);
  framed.insert(framed.end(), class_tokens.begin(), class_tokens.end());
  framed.push_back(specials.eot);
  const Tensor<T> gathered = embed_tokens(weights, std::span<const TokenId>(framed));

  AssembledSequence<T> seq;
  seq.embeddings = Tensor<T>({len, w});
  seq.eot_index = len - 1;
  auto put = [&](std::size_t dst, std::span<const T> src) {
    std::copy(src.begin(), src.end(), seq.embeddings.row(dst).begin());
  };
  put(0, gathered.row(0));
  const T* ctx = &ensemble.context(prompt_index, 0, 0);
  for (std::size_t j = 0; j < n; ++j) {
    put(1 + j, std::span<const T>(ctx + j * w, w));
    seq.ctx_positions.push_back(1 + j);
  }
  for (std::size_t c = 0; c < class_tokens.size(); ++c) {
    put(1 + n + c, gathered.row(1 + c));
  }
  put(len - 1, gathered.row(framed.size() - 1));
  return seq;
}

template <typename T>
EnsembleFeatures<T> ensemble_class_features(const EncoderWeights<T>& weights,
                                            const PromptEnsemble<T>& ensemble,
                                            const ClassTokenTable& classes,
                                            const SpecialTokens& specials,
                                            const EnsembleOptions& options) {
  ensemble.validate();
  const std::size_t D = ensemble.prompts, K = classes.size();
  const std::size_t d = weights.config.output_dim;

  EnsembleFeatures<T> out;
  out.prompts = D;
  out.classes = K;
  out.ctx_len = ensemble.ctx_len;
  out.normalized = options.normalize_before_average;
  out.caches.resize(D * K);
  out.prompt_features.resize(D * K);

  parallel_for(D * K, options.threads, [&](std::size_t idx) {
    const std::size_t i = idx / K, k = idx % K;
    auto seq = assemble_sequence(ensemble, i, classes, k, weights, specials);
    auto enc = encode_sequence(weights, seq.embeddings, seq.eot_index);
    out.prompt_features[idx] = std::move(enc.feature);
    out.caches[idx] = std::move(enc.cache);
  });

  // Float features are summed in double: a handful of float terms add up
  // exactly there, so the mean does not depend on prompt order, and D=1
  // reproduces the single-prompt feature bit for bit.
  using Acc = std::conditional_t<std::is_same_v<T, float>, double, T>;
  out.features = Tensor<T>({K, d});
  const Acc inv_d = Acc{1} / static_cast<Acc>(D);
  std::vector<Acc> acc(d);
  for (std::size_t k = 0; k < K; ++k) {
    std::fill(acc.begin(), acc.end(), Acc{0});
    for (std::size_t i = 0; i < D; ++i) {
      const auto f = out.prompt_features[i * K + k].values();
      T scale{1};
      if (options.normalize_before_average) {
        T sq{0};
        for (T v : f) sq += v * v;
        if (!(sq > T{0})) {
          throw DegenerateFeatureError("prompt " + std::to_string(i) +
                                       " produced a zero feature for class " +
                                       std::to_string(k));
        }
        scale = T{1} / std::sqrt(sq);
      }
      for (std::size_t j = 0; j < d; ++j) acc[j] += static_cast<Acc>(f[j] * scale);
    }
    auto row = out.features.row(k);
    for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<T>(acc[j] * inv_d);
  }
  return out;
}

template <typename T>
Tensor<T> scatter_feature_grads(const Tensor<T>& d_features,
                                const EnsembleFeatures<T>& forward,
                                const EncoderWeights<T>& weights,
                                std::size_t threads) {
  const std::size_t D = forward.prompts, K = forward.classes,
                    N = forward.ctx_len;
  const std::size_t w = weights.config.width, d = weights.config.output_dim;
  if (d_features.rank() != 2 || d_features.extent(0) != K ||
      d_features.extent(1) != d) {
    throw ContractError("feature gradient " +
                        shape_to_string(d_features.shape()) +
                        " does not match the forward pass [" +
                        std::to_string(K) + "x" + std::to_string(d) + "]");
  }
  if (forward.caches.size() != D * K) {
    throw ContractError("forward caches do not cover D x K sequences");
  }

  std::vector<Tensor<T>> input_grads(D * K);
  parallel_for(D * K, threads, [&](std::size_t idx) {
    const std::size_t k = idx % K;
    Tensor<T> g({d});
    auto src = d_features.row(k);
    std::copy(src.begin(), src.end(), g.values().begin());
    if (forward.normalized) {
      // Through f / |f|: (g - fhat (fhat . g)) / |f|.
      const auto f = forward.prompt_features[idx].values();
      T sq{0};
      for (T v : f) sq += v * v;
      const T norm = std::sqrt(sq);
      T proj{0};
      for (std::size_t j = 0; j < d; ++j) proj += (f[j] / norm) * g[j];
      for (std::size_t j = 0; j < d; ++j) g[j] = (g[j] - (f[j] / norm) * proj) / norm;
    }
    input_grads[idx] = encode_backward(weights, forward.caches[idx], g);
  });

  Tensor<T> grad({D, N, w});
  const T inv_d = T{1} / static_cast<T>(D);
  for (std::size_t i = 0; i < D; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      const Tensor<T>& g = input_grads[i * K + k];
      // Context rows sit at positions 1..N of every assembled sequence.
      for (std::size_t j = 0; j < N; ++j) {
        auto src = g.row(1 + j);
        T* dst = &grad(i, j, 0);
        for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
      }
    }
  }
  for (T& v : grad.values()) v *= inv_d;
  return grad;
}

template <typename T>
PrototypeBank<T> precompute_prototypes(const EncoderWeights<T>& weights,
                                       const PromptEnsemble<T>& ensemble,
                                       const ClassTokenTable& classes,
                                       const SpecialTokens& specials,
                                       const EnsembleOptions& options) {
  auto fwd = ensemble_class_features(weights, ensemble, classes, specials, options);
  return {std::move(fwd.features), weights.hash(), ensemble.hash()};
}

#define ECO_INSTANTIATE_ENSEMBLE(T)                                           \
  template struct PromptEnsemble<T>;                                          \
  template PromptEnsemble<T> init_context<T>(std::size_t, std::size_t,        \
                                             std::size_t, double, SeededRng&); \
  template AssembledSequence<T> assemble_sequence<T>(                         \
      const PromptEnsemble<T>&, std::size_t, const ClassTokenTable&,          \
      std::size_t, const EncoderWeights<T>&, const SpecialTokens&);           \
  template EnsembleFeatures<T> ensemble_class_features<T>(                    \
      const EncoderWeights<T>&, const PromptEnsemble<T>&,                     \
      const ClassTokenTable&, const SpecialTokens&, const EnsembleOptions&);  \
  template Tensor<T> scatter_feature_grads<T>(                                \
      const Tensor<T>&, const EnsembleFeatures<T>&, const EncoderWeights<T>&, \
      std::size_t);                                                           \
  template PrototypeBank<T> precompute_prototypes<T>(                         \
      const EncoderWeights<T>&, const PromptEnsemble<T>&,                     \
      const ClassTokenTable&, const SpecialTokens&, const EnsembleOptions&);

ECO_INSTANTIATE_ENSEMBLE(float)
ECO_INSTANTIATE_ENSEMBLE(double)
#undef ECO_INSTANTIATE_ENSEMBLE

}  // namespace eco
