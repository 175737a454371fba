#include "eco/classifier.hpp"

#include <algorithm>
#include <cmath>

namespace eco {

void ClassifierConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("temperature must be positive and finite");
  }
}

namespace {

template <typename T>
T norm_or_throw(std::span<const T> v, const char* what) {
  T sq{0};
  for (T x : v) sq += x * x;
  if (!(sq > T{0}) || !std::isfinite(sq)) {
    throw DegenerateFeatureError(std::string(what) +
                                 " has zero or non-finite norm");
  }
  return std::sqrt(sq);
}

template <typename T>
void check_text_features(const Tensor<T>& text, std::size_t dim) {
  if (text.rank() != 2 || text.extent(1) != dim || text.extent(0) == 0) {
    throw DimensionError("text features " + shape_to_string(text.shape()) +
                         " do not match query dim " + std::to_string(dim));
  }
}

template <typename T>
T clamp_unit(T c) {
  return std::clamp(c, T{-1}, T{1});
}

}  // namespace

template <typename T>
std::vector<T> cosine_logits(std::span<const T> query,
                             const Tensor<T>& text_features,
                             double temperature) {
  ClassifierConfig{temperature}.validate();
  check_text_features(text_features, query.size());
  const T qn = norm_or_throw(query, "query feature");
  const std::size_t K = text_features.extent(0);
  const T inv_tau = static_cast<T>(1.0 / temperature);
  std::vector<T> logits(K);
  for (std::size_t k = 0; k < K; ++k) {
    auto t = text_features.row(k);
    const T tn = norm_or_throw(t, "text feature");
    T dot{0};
    for (std::size_t j = 0; j < t.size(); ++j) dot += t[j] * query[j];
    logits[k] = clamp_unit(dot / (tn * qn)) * inv_tau;
  }
  return logits;
}

template <typename T>
std::vector<T> class_probabilities(std::span<const T> query,
                                   const Tensor<T>& text_features,
                                   double temperature) {
  auto p = cosine_logits(query, text_features, temperature);
  softmax_inplace(std::span<T>(p));
  return p;
}

template <typename T>
LossGrad<T> cross_entropy(const Tensor<T>& queries,
                          std::span<const std::uint32_t> labels,
                          const Tensor<T>& text_features, double temperature) {
  ClassifierConfig{temperature}.validate();
  if (queries.rank() != 2 || queries.extent(0) != labels.size()) {
    throw DimensionError("query batch " + shape_to_string(queries.shape()) +
                         " does not match " + std::to_string(labels.size()) +
                         " labels");
  }
  const std::size_t B = queries.extent(0), d = queries.extent(1);
  check_text_features(text_features, d);
  const std::size_t K = text_features.extent(0);
  if (B == 0) throw DimensionError("cross_entropy on an empty batch");

  std::vector<T> tnorm(K);
  for (std::size_t k = 0; k < K; ++k) {
    tnorm[k] = norm_or_throw(text_features.row(k), "text feature");
  }
  const T inv_tau = static_cast<T>(1.0 / temperature);
  const T inv_b = T{1} / static_cast<T>(B);

  LossGrad<T> out;
  out.d_text_features = Tensor<T>({K, d});
  out.probabilities = Tensor<T>({B, K});
  std::vector<T> xhat(d), cosines(K), logits(K);
  T total{0};
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= K) {
      throw ContractError("label " + std::to_string(labels[b]) +
                          " out of range for " + std::to_string(K) + " classes");
    }
    auto x = queries.row(b);
    const T xn = norm_or_throw(x, "query feature");
    for (std::size_t j = 0; j < d; ++j) xhat[j] = x[j] / xn;
    for (std::size_t k = 0; k < K; ++k) {
      auto t = text_features.row(k);
      T dot{0};
      for (std::size_t j = 0; j < d; ++j) dot += t[j] * xhat[j];
      cosines[k] = dot / tnorm[k];
      logits[k] = clamp_unit(cosines[k]) * inv_tau;
    }
    T max_l = logits[0];
    for (T l : logits) max_l = std::max(max_l, l);
    T sum{0};
    for (T l : logits) sum += std::exp(l - max_l);
    const T log_z = max_l + std::log(sum);
    total += log_z - logits[labels[b]];

    auto probs = out.probabilities.row(b);
    for (std::size_t k = 0; k < K; ++k) probs[k] = std::exp(logits[k] - log_z);

    // d cos / d t_k = (xhat - cos * t_k / |t_k|) / |t_k|.
    for (std::size_t k = 0; k < K; ++k) {
      const T dlogit = (probs[k] - (k == labels[b] ? T{1} : T{0})) * inv_b;
      const T coeff = dlogit * inv_tau / tnorm[k];
      auto t = text_features.row(k);
      auto g = out.d_text_features.row(k);
      for (std::size_t j = 0; j < d; ++j) {
        g[j] += coeff * (xhat[j] - cosines[k] * t[j] / tnorm[k]);
      }
    }
  }
  out.loss = total * inv_b;
  return out;
}

template <typename T>
std::size_t predict(const Tensor<T>& prototypes, std::span<const T> query) {
  check_text_features(prototypes, query.size());
  const T qn = norm_or_throw(query, "query feature");
  std::size_t best = 0;
  T best_cos{0};
  for (std::size_t k = 0; k < prototypes.extent(0); ++k) {
    auto t = prototypes.row(k);
    const T tn = norm_or_throw(t, "prototype");
    T dot{0};
    for (std::size_t j = 0; j < t.size(); ++j) dot += t[j] * query[j];
    const T c = clamp_unit(dot / (tn * qn));
    if (k == 0 || c > best_cos) {
      best = k;
      best_cos = c;
    }
  }
  return best;
}

template <typename T>
double accuracy(const Tensor<T>& prototypes, const EmbeddingBank& bank) {
  if (bank.records() == 0) throw ProtocolError("accuracy on an empty bank");
  std::vector<T> q(bank.dim);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < bank.records(); ++r) {
    auto v = bank.vector(r);
    std::copy(v.begin(), v.end(), q.begin());
    if (predict(prototypes, std::span<const T>(q)) == bank.labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(bank.records());
}

template <typename T>
Tensor<T> hand_prompt_features(
    const EncoderWeights<T>& weights,
    const std::vector<std::vector<std::vector<TokenId>>>& prompts,
    std::size_t threads) {
  const std::size_t K = prompts.size(), d = weights.config.output_dim;
  Tensor<T> features({K, d});
  for (std::size_t k = 0; k < K; ++k) {
    if (prompts[k].empty()) {
      throw ConfigError("class " + std::to_string(k) + " has no hand prompts");
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t p = 0; p < prompts[k].size(); ++p) jobs.emplace_back(k, p);
  }
  std::vector<Tensor<T>> encoded(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t i) {
    const auto& ids = prompts[jobs[i].first][jobs[i].second];
    if (ids.empty()) throw ConfigError("empty hand prompt sequence");
    auto emb = embed_tokens(weights, std::span<const TokenId>(ids));
    encoded[i] = encode_sequence(weights, emb, ids.size() - 1).feature;
  });
  std::size_t i = 0;
  for (std::size_t k = 0; k < K; ++k) {
    auto acc = features.row(k);
    for (std::size_t p = 0; p < prompts[k].size(); ++p, ++i) {
      auto f = encoded[i].values();
      for (std::size_t j = 0; j < d; ++j) acc[j] += f[j];
    }
    const T inv = T{1} / static_cast<T>(prompts[k].size());
    for (T& v : acc) v *= inv;
  }
  return features;
}

template <typename T>
double zero_shot_baseline(
    const EncoderWeights<T>& weights,
    const std::vector<std::vector<std::vector<TokenId>>>& prompts,
    const EmbeddingBank& bank, std::size_t threads) {
  if (prompts.size() != bank.num_classes()) {
    throw DimensionError("hand prompts cover " + std::to_string(prompts.size()) +
                         " classes, bank has " +
                         std::to_string(bank.num_classes()));
  }
  return accuracy(hand_prompt_features(weights, prompts, threads), bank);
}

std::size_t LinearProbeModel::predict(std::span<const float> x) const {
  const std::size_t d = weights.extent(0), K = weights.extent(1);
  std::size_t best = 0;
  double best_score = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    double s = bias[k];
    for (std::size_t j = 0; j < d; ++j) s += weights(j, k) * x[j];
    if (k == 0 || s > best_score) {
      best = k;
      best_score = s;
    }
  }
  return best;
}

namespace {

// Objective value and gradient of the regularized mean cross-entropy.
double probe_objective(const EmbeddingBank& bank, double l2,
                       const Tensor<double>& w, const Tensor<double>& b,
                       Tensor<double>& gw, Tensor<double>& gb) {
  const std::size_t d = bank.dim, K = bank.num_classes(), B = bank.records();
  gw.fill(0.0);
  gb.fill(0.0);
  std::vector<double> s(K);
  double loss = 0.0;
  for (std::size_t r = 0; r < B; ++r) {
    auto x = bank.vector(r);
    for (std::size_t k = 0; k < K; ++k) {
      double v = b[k];
      for (std::size_t j = 0; j < d; ++j) v += w(j, k) * x[j];
      s[k] = v;
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double v : s) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    loss += log_z - s[bank.labels[r]];
    for (std::size_t k = 0; k < K; ++k) {
      const double g = std::exp(s[k] - log_z) - (k == bank.labels[r] ? 1.0 : 0.0);
      gb[k] += g;
      for (std::size_t j = 0; j < d; ++j) gw(j, k) += g * x[j];
    }
  }
  const double inv_b = 1.0 / static_cast<double>(B);
  double reg = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    gw[i] = gw[i] * inv_b + l2 * w[i];
    reg += w[i] * w[i];
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    gb[i] = gb[i] * inv_b + l2 * b[i];
    reg += b[i] * b[i];
  }
  return loss * inv_b + 0.5 * l2 * reg;
}

}  // namespace

LinearProbeModel fit_linear_probe(const EmbeddingBank& train, double l2,
                                  const LinearProbeOptions& options) {
  if (!(l2 >= 0.0)) throw ConfigError("l2 must be nonnegative");
  const std::size_t d = train.dim, K = train.num_classes();
  std::vector<bool> seen(K, false);
  for (auto label : train.labels) {
    if (label < K) seen[label] = true;
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (!seen[k]) {
      throw ProtocolError("linear probe training split has no example of class " +
                          std::to_string(k) + " ('" + train.classes.classes[k].name +
                          "')");
    }
  }

  // Softmax-CE curvature is at most 1/2 per unit of |[x, 1]|^2.
  double mean_sq = 0.0;
  for (std::size_t r = 0; r < train.records(); ++r) {
    double sq = 1.0;
    for (float v : train.vector(r)) sq += double(v) * double(v);
    mean_sq += sq;
  }
  mean_sq /= static_cast<double>(train.records());
  const double step = 1.0 / (0.5 * mean_sq + l2);

  LinearProbeModel m;
  m.weights = Tensor<double>({d, K});
  m.bias = Tensor<double>({K});
  Tensor<double> yw = m.weights, yb = m.bias;  // look-ahead point
  Tensor<double> gw({d, K}), gb({K});
  double t_prev = 1.0;
  double f_prev = probe_objective(train, l2, m.weights, m.bias, gw, gb);
  for (std::size_t it = 0; it < options.max_iterations; ++it) {
    probe_objective(train, l2, yw, yb, gw, gb);
    double gn = 0.0;
    for (double v : gw.values()) gn += v * v;
    for (double v : gb.values()) gn += v * v;
    gn = std::sqrt(gn);
    m.iterations = it;
    m.gradient_norm = gn;
    if (gn <= options.tolerance) {
      m.weights = yw;
      m.bias = yb;
      return m;
    }
    Tensor<double> nw = yw, nb = yb;
    for (std::size_t i = 0; i < nw.size(); ++i) nw[i] -= step * gw[i];
    for (std::size_t i = 0; i < nb.size(); ++i) nb[i] -= step * gb[i];
    Tensor<double> tw({d, K}), tb({K});
    const double f_new = probe_objective(train, l2, nw, nb, tw, tb);
    double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t_prev * t_prev));
    double beta = (t_prev - 1.0) / t_next;
    if (f_new > f_prev) {
      // Adaptive restart: drop momentum when the objective goes up.
      t_next = 1.0;
      beta = 0.0;
    }
    for (std::size_t i = 0; i < yw.size(); ++i) {
      yw[i] = nw[i] + beta * (nw[i] - m.weights[i]);
    }
    for (std::size_t i = 0; i < yb.size(); ++i) {
      yb[i] = nb[i] + beta * (nb[i] - m.bias[i]);
    }
    m.weights = std::move(nw);
    m.bias = std::move(nb);
    f_prev = f_new;
    t_prev = t_next;
  }
  return m;
}

double linear_probe(const EmbeddingBank& train, const EmbeddingBank& test,
                    double l2, const LinearProbeOptions& options) {
  if (train.dim != test.dim || train.num_classes() != test.num_classes()) {
    throw DimensionError("train and test banks disagree on dim or class count");
  }
  if (test.records() == 0) throw ProtocolError("linear probe on an empty test bank");
  const LinearProbeModel m = fit_linear_probe(train, l2, options);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < test.records(); ++r) {
    if (m.predict(test.vector(r)) == test.labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.records());
}

#define ECO_INSTANTIATE_CLASSIFIER(T)                                          \
  template std::vector<T> cosine_logits<T>(std::span<const T>,                 \
                                           const Tensor<T>&, double);          \
  template std::vector<T> class_probabilities<T>(std::span<const T>,           \
                                                 const Tensor<T>&, double);    \
  template LossGrad<T> cross_entropy<T>(const Tensor<T>&,                      \
                                        std::span<const std::uint32_t>,        \
                                        const Tensor<T>&, double);             \
  template std::size_t predict<T>(const Tensor<T>&, std::span<const T>);       \
  template double accuracy<T>(const Tensor<T>&, const EmbeddingBank&);         \
  template Tensor<T> hand_prompt_features<T>(                                  \
      const EncoderWeights<T>&,                                                \
      const std::vector<std::vector<std::vector<TokenId>>>&, std::size_t);     \
  template double zero_shot_baseline<T>(                                       \
      const EncoderWeights<T>&,                                                \
      const std::vector<std::vector<std::vector<TokenId>>>&,                   \
      const EmbeddingBank&, std::size_t);

ECO_INSTANTIATE_CLASSIFIER(float)
ECO_INSTANTIATE_CLASSIFIER(double)
#undef ECO_INSTANTIATE_CLASSIFIER

}  // namespace eco
