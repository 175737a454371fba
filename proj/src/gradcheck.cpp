#include "eco/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "eco/classifier.hpp"
#include "eco/prompt_ensemble.hpp"

namespace eco {

namespace {

double scaled_relative_error(const Tensor<double>& analytic,
                             const Tensor<double>& numeric, double fraction) {
  double scale = 0.0;
  for (double v : numeric.values()) scale = std::max(scale, std::abs(v));
  return max_relative_error(analytic.values(), numeric.values(),
                            std::max(fraction * scale, 1e-300));
}

Tensor<double> random_tensor(Shape shape, SeededRng& rng, double std) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.values()) v = rng.gaussian(0.0, std);
  return t;
}

// Non-trivial gains and biases so every layer-norm path is exercised.
void perturb_norms_and_biases(EncoderWeights<double>& w, SeededRng& rng) {
  for (auto& [name, t] : w.named_tensors()) {
    const bool gain = name.ends_with(".gain");
    const bool bias = name.ends_with(".bias");
    if (!gain && !bias) continue;
    for (double& v : t->values()) v += rng.gaussian(0.0, 0.1);
  }
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck(const EncoderConfig& config,
                                           std::uint64_t seed,
                                           const GradcheckOptions& options) {
  config.validate();
  SeededRng rng(seed);
  SeededRng weight_rng = rng.derive(1);
  EncoderWeights<double> weights =
      init_random<double>(config, weight_rng, InitScheme::kWidthScaled);
  SeededRng aux = rng.derive(2);
  perturb_norms_and_biases(weights, aux);
  const std::size_t w = config.width, d = config.output_dim;
  std::vector<GradcheckResult> results;

  // Encoder: gradient of dot(g, feature) w.r.t. the input rows.
  {
    const std::size_t len = std::min(options.sequence_length, config.max_positions);
    const Tensor<double> input = random_tensor({len, w}, aux, 0.5);
    const Tensor<double> g = random_tensor({d}, aux, 1.0);
    const std::size_t eot = len - 1;
    auto enc = encode_sequence(weights, input, eot);
    const Tensor<double> analytic = encode_backward(weights, enc.cache, g);
    const Tensor<double> numeric = finite_difference_grad(
        [&](const Tensor<double>& x) {
          const auto f = encode_sequence(weights, x, eot).feature;
          double s = 0.0;
          for (std::size_t j = 0; j < d; ++j) s += f[j] * g[j];
          return s;
        },
        input, options.step);
    results.push_back({"encoder",
                       scaled_relative_error(analytic, numeric, options.relative_floor),
                       input.size()});
  }

  // End-to-end: cross-entropy of the ensemble features w.r.t. the context.
  {
    ClassTokenTable classes;
    const auto V = static_cast<TokenId>(config.vocab_size);
    const SpecialTokens specials{V - 2, V - 1};
    for (std::size_t k = 0; k < options.classes; ++k) {
      ClassEntry e{"c" + std::to_string(k), {}};
      const std::size_t n_tokens = 1 + k % 2;
      for (std::size_t t = 0; t < n_tokens; ++t) {
        e.tokens.push_back(static_cast<TokenId>(aux.uniform_index(V - 2)));
      }
      classes.classes.push_back(std::move(e));
    }
    PromptEnsemble<double> ensemble =
        init_context<double>(options.prompts, options.ctx_len, w, 0.5, aux);
    const Tensor<double> queries = random_tensor({options.batch, d}, aux, 1.0);
    std::vector<std::uint32_t> labels(options.batch);
    for (std::size_t b = 0; b < options.batch; ++b) {
      labels[b] = static_cast<std::uint32_t>(b % options.classes);
    }
    // A moderate temperature keeps the loss away from saturation.
    const double tau = 0.5;
    auto fwd = ensemble_class_features(weights, ensemble, classes, specials);
    auto lg = cross_entropy(queries, labels, fwd.features, tau);
    const Tensor<double> analytic =
        scatter_feature_grads(lg.d_text_features, fwd, weights);
    const Tensor<double> numeric = finite_difference_grad(
        [&](const Tensor<double>& ctx) {
          PromptEnsemble<double> probe{ensemble.prompts, ensemble.ctx_len, ctx};
          auto f = ensemble_class_features(weights, probe, classes, specials);
          return cross_entropy(queries, labels, f.features, tau).loss;
        },
        ensemble.context, options.ensemble_step);
    results.push_back({"ensemble",
                       scaled_relative_error(analytic, numeric, options.relative_floor),
                       ensemble.context.size()});
  }

  // Loss: cross-entropy w.r.t. the text features, at CLIP's temperature.
  {
    const Tensor<double> text = random_tensor({options.classes, d}, aux, 1.0);
    const Tensor<double> queries = random_tensor({options.batch, d}, aux, 1.0);
    std::vector<std::uint32_t> labels(options.batch);
    for (std::size_t b = 0; b < options.batch; ++b) {
      labels[b] = static_cast<std::uint32_t>((b + 1) % options.classes);
    }
    const double tau = 0.07;
    const Tensor<double> analytic =
        cross_entropy(queries, labels, text, tau).d_text_features;
    const Tensor<double> numeric = finite_difference_grad(
        [&](const Tensor<double>& t) {
          return cross_entropy(queries, labels, t, tau).loss;
        },
        text, 1e-5);
    results.push_back({"loss",
                       scaled_relative_error(analytic, numeric, options.relative_floor),
                       text.size()});
  }
  return results;
}

EncoderConfig parse_dim_config(const std::string& text) {
  EncoderConfig c;  // toy defaults: L=2, H=4, w=64, d=32, V=128, T=32
  if (text.empty() || text == "toy") return c;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("malformed dim-config entry '" + item + "' (expected key=value)");
    }
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    if (value.empty() || value.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("dim-config value for '" + key + "' must be a positive integer");
    }
    const std::size_t v = std::stoul(value);
    if (key == "layers") {
      c.layers = v;
    } else if (key == "heads") {
      c.heads = v;
    } else if (key == "width") {
      c.width = v;
    } else if (key == "out") {
      c.output_dim = v;
    } else if (key == "vocab") {
      c.vocab_size = v;
    } else if (key == "positions") {
      c.max_positions = v;
    } else {
      throw ConfigError("unknown dim-config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

}  // namespace eco
