#ifndef ECO_TESTS_SUPPORT_HPP_
#define ECO_TESTS_SUPPORT_HPP_

#include <cmath>
#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include "eco/bank.hpp"
#include "eco/classifier.hpp"
#include "eco/numerics.hpp"
#include "eco/prompt_ensemble.hpp"
#include "eco/text_encoder.hpp"
#include "eco/trainer.hpp"

namespace eco::testing {

inline EncoderConfig small_config() {
  EncoderConfig c;
  c.layers = 2;
  c.heads = 2;
  c.width = 16;
  c.output_dim = 8;
  c.max_positions = 24;
  c.vocab_size = 40;
  return c;
}

template <typename T>
EncoderWeights<T> toy_weights(std::uint64_t seed, const EncoderConfig& config = {}) {
  SeededRng rng(seed);
  return init_random<T>(config, rng, InitScheme::kWidthScaled);
}

inline SpecialTokens specials_for(const EncoderConfig& c) {
  const auto V = static_cast<TokenId>(c.vocab_size);
  return {V - 2, V - 1};
}

// K classes with 1..max_tokens random non-special tokens each.
inline ClassTokenTable random_classes(std::size_t K, const EncoderConfig& c,
                                      SeededRng& rng, std::size_t max_tokens = 2) {
  ClassTokenTable t;
  for (std::size_t k = 0; k < K; ++k) {
    ClassEntry e{"class_" + std::to_string(k), {}};
    const std::size_t n = 1 + rng.uniform_index(max_tokens);
    for (std::size_t i = 0; i < n; ++i) {
      e.tokens.push_back(static_cast<TokenId>(rng.uniform_index(c.vocab_size - 2)));
    }
    t.classes.push_back(std::move(e));
  }
  return t;
}

inline EmbeddingBank random_bank(const ClassTokenTable& classes, std::size_t per_class,
                                 std::size_t dim, SeededRng& rng) {
  EmbeddingBank b;
  b.dim = dim;
  b.classes = classes;
  std::vector<float> v(dim);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    for (std::size_t r = 0; r < per_class; ++r) {
      for (float& x : v) x = static_cast<float>(rng.gaussian(0.0, 1.0));
      b.add(static_cast<std::uint32_t>(k), v);
    }
  }
  return b;
}

template <typename T>
Tensor<T> random_tensor(Shape shape, SeededRng& rng, double std = 1.0) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.values()) v = static_cast<T>(rng.gaussian(0.0, std));
  return t;
}

// Plain-loop reimplementation of the text encoder: every row is computed,
// masking is done with -inf before a textbook softmax, and nothing is shared
// with the library beyond reading the weight tensors.
inline std::vector<double> straight_line_encode(const EncoderWeights<double>& W,
                                                const Tensor<double>& input,
                                                std::size_t eot) {
  const auto& c = W.config;
  const std::size_t n = input.extent(0), w = c.width, H = c.heads, hd = w / H;
  using Mat = std::vector<std::vector<double>>;
  auto layer_norm_row = [&](const std::vector<double>& x, const Tensor<double>& g,
                            const Tensor<double>& b) {
    double mean = 0, var = 0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x.size());
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      y[i] = g[i] * (x[i] - mean) / std::sqrt(var + c.eps) + b[i];
    }
    return y;
  };
  auto affine = [](const std::vector<double>& x, const Tensor<double>& M,
                   const Tensor<double>& b) {
    std::vector<double> y(M.extent(1));
    for (std::size_t j = 0; j < y.size(); ++j) {
      double s = b.empty() ? 0.0 : b[j];
      for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * M(i, j);
      y[j] = s;
    }
    return y;
  };
  Mat h(n, std::vector<double>(w));
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j < w; ++j) h[t][j] = input(t, j) + W.positional(t, j);
  }
  for (const auto& B : W.blocks) {
    Mat q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const auto qkv = affine(layer_norm_row(h[t], B.ln1_gain, B.ln1_bias),
                              B.qkv_weight, B.qkv_bias);
      q[t].assign(qkv.begin(), qkv.begin() + static_cast<long>(w));
      k[t].assign(qkv.begin() + static_cast<long>(w), qkv.begin() + static_cast<long>(2 * w));
      v[t].assign(qkv.begin() + static_cast<long>(2 * w), qkv.end());
    }
    Mat attn_out(n, std::vector<double>(w, 0.0));
    for (std::size_t head = 0; head < H; ++head) {
      for (std::size_t t = 0; t < n; ++t) {
        std::vector<double> s(n);
        for (std::size_t u = 0; u < n; ++u) {
          if (u > t) {
            s[u] = -INFINITY;
            continue;
          }
          double dot = 0;
          for (std::size_t j = 0; j < hd; ++j) dot += q[t][head * hd + j] * k[u][head * hd + j];
          s[u] = dot / std::sqrt(static_cast<double>(hd));
        }
        double mx = -INFINITY, z = 0;
        for (double x : s) mx = std::max(mx, x);
        for (double& x : s) z += (x = std::exp(x - mx));
        for (std::size_t u = 0; u < n; ++u) {
          for (std::size_t j = 0; j < hd; ++j) {
            attn_out[t][head * hd + j] += s[u] / z * v[u][head * hd + j];
          }
        }
      }
    }
    for (std::size_t t = 0; t < n; ++t) {
      const auto o = affine(attn_out[t], B.out_weight, B.out_bias);
      for (std::size_t j = 0; j < w; ++j) h[t][j] += o[j];
      auto m = affine(layer_norm_row(h[t], B.ln2_gain, B.ln2_bias), B.fc_weight, B.fc_bias);
      for (double& x : m) x = x / (1.0 + std::exp(-1.702 * x));
      const auto p = affine(m, B.proj_weight, B.proj_bias);
      for (std::size_t j = 0; j < w; ++j) h[t][j] += p[j];
    }
  }
  const auto fin = layer_norm_row(h[eot], W.ln_final_gain, W.ln_final_bias);
  return affine(fin, W.projection, Tensor<double>());
}

struct ReferenceRun {
  Tensor<float> context;  // [N, w]
  std::vector<double> loss_history;
};

// Single-prompt context optimization written directly against the encoder:
// one learnable [N, w] context, class feature = encoder output, no ensemble
// machinery. Shares the trainer's schedule, seed streams and update rule.
inline ReferenceRun coop_reference_train(const EncoderWeights<float>& W,
                                         Tensor<float> context,
                                         const ClassTokenTable& classes,
                                         const SpecialTokens& specials,
                                         const FewShotSplit& split,
                                         const EmbeddingBank& bank,
                                         const TrainConfig& cfg) {
  const std::size_t N = context.extent(0), w = context.extent(1);
  const std::size_t K = classes.size(), d = bank.dim;
  std::vector<std::size_t> order = split.flattened();
  const std::size_t batch = cfg.effective_batch_size(K);
  SeededRng shuffle = stream_rng(cfg.seed, SeedStream::kShuffle);
  std::vector<float> velocity(context.size(), 0.0f);
  ReferenceRun run;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto lr = static_cast<float>(cfg.learning_rate(epoch));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle.uniform_index(i)]);
    }
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t B = std::min(batch, order.size() - start);
      Tensor<float> queries({B, d});
      std::vector<std::uint32_t> labels(B);
      for (std::size_t b = 0; b < B; ++b) {
        const auto v = bank.vector(order[start + b]);
        for (std::size_t j = 0; j < d; ++j) queries(b, j) = v[j];
        labels[b] = bank.labels[order[start + b]];
      }
      Tensor<float> text({K, d});
      std::vector<ForwardCache<float>> caches;
      for (std::size_t k = 0; k < K; ++k) {
        std::vector<TokenId> ids{specials.sot};
        for (std::size_t j = 0; j < N; ++j) ids.push_back(specials.sot);  // placeholders
        ids.insert(ids.end(), classes.classes[k].tokens.begin(),
                   classes.classes[k].tokens.end());
        ids.push_back(specials.eot);
        Tensor<float> emb = embed_tokens(W, std::span<const TokenId>(ids));
        for (std::size_t j = 0; j < N; ++j) {
          for (std::size_t c = 0; c < w; ++c) emb(1 + j, c) = context(j, c);
        }
        auto enc = encode_sequence(W, emb, ids.size() - 1);
        for (std::size_t j = 0; j < d; ++j) text(k, j) = enc.feature[j];
        caches.push_back(std::move(enc.cache));
      }
      const auto lg = cross_entropy(queries, labels, text, cfg.temperature);
      total += static_cast<double>(lg.loss) * static_cast<double>(B);
      std::vector<float> grad(context.size(), 0.0f);
      for (std::size_t k = 0; k < K; ++k) {
        Tensor<float> g({d});
        for (std::size_t j = 0; j < d; ++j) g[j] = lg.d_text_features(k, j);
        const Tensor<float> gi = encode_backward(W, caches[k], g);
        for (std::size_t j = 0; j < N; ++j) {
          for (std::size_t c = 0; c < w; ++c) grad[j * w + c] += gi(1 + j, c);
        }
      }
      for (std::size_t i = 0; i < grad.size(); ++i) {
        velocity[i] = static_cast<float>(cfg.momentum) * velocity[i] + grad[i];
        context[i] -= lr * velocity[i];
      }
    }
    run.loss_history.push_back(total / static_cast<double>(order.size()));
  }
  run.context = std::move(context);
  return run;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("eco_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace eco::testing

#endif  // ECO_TESTS_SUPPORT_HPP_
