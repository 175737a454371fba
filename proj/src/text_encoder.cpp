#include "eco/text_encoder.hpp"

#include <cmath>

namespace eco {

void EncoderConfig::validate() const {
  if (layers == 0 || heads == 0 || width == 0 || output_dim == 0 ||
      max_positions == 0 || vocab_size == 0) {
    throw ConfigError("encoder config has a zero extent");
  }
  if (width % heads != 0) {
    throw ConfigError("encoder width " + std::to_string(width) +
                      " is not divisible by heads " + std::to_string(heads));
  }
  if (!(eps > 0.0)) throw ConfigError("encoder layer-norm eps must be positive");
}

std::size_t parameter_count(const EncoderConfig& c) {
  const std::size_t w = c.width;
  return c.vocab_size * w + c.max_positions * w +
         c.layers * (12 * w * w + 13 * w) + 2 * w + w * c.output_dim;
}

std::vector<std::pair<std::string, Shape>> weight_schema(
    const EncoderConfig& c) {
  const std::size_t w = c.width;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("token_embedding", Shape{c.vocab_size, w});
  out.emplace_back("positional_embedding", Shape{c.max_positions, w});
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.emplace_back(p + "ln_1.gain", Shape{w});
    out.emplace_back(p + "ln_1.bias", Shape{w});
    out.emplace_back(p + "attn.qkv.weight", Shape{w, 3 * w});
    out.emplace_back(p + "attn.qkv.bias", Shape{3 * w});
    out.emplace_back(p + "attn.out.weight", Shape{w, w});
    out.emplace_back(p + "attn.out.bias", Shape{w});
    out.emplace_back(p + "ln_2.gain", Shape{w});
    out.emplace_back(p + "ln_2.bias", Shape{w});
    out.emplace_back(p + "mlp.fc.weight", Shape{w, 4 * w});
    out.emplace_back(p + "mlp.fc.bias", Shape{4 * w});
    out.emplace_back(p + "mlp.proj.weight", Shape{4 * w, w});
    out.emplace_back(p + "mlp.proj.bias", Shape{w});
  }
  out.emplace_back("ln_final.gain", Shape{w});
  out.emplace_back("ln_final.bias", Shape{w});
  out.emplace_back("text_projection", Shape{w, c.output_dim});
  return out;
}

namespace {

template <typename Weights, typename Ptr>
std::vector<std::pair<std::string, Ptr>> collect(Weights& wt) {
  std::vector<std::pair<std::string, Ptr>> out;
  out.emplace_back("token_embedding", &wt.token_table);
  out.emplace_back("positional_embedding", &wt.positional);
  for (std::size_t l = 0; l < wt.blocks.size(); ++l) {
    auto& b = wt.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.emplace_back(p + "ln_1.gain", &b.ln1_gain);
    out.emplace_back(p + "ln_1.bias", &b.ln1_bias);
    out.emplace_back(p + "attn.qkv.weight", &b.qkv_weight);
    out.emplace_back(p + "attn.qkv.bias", &b.qkv_bias);
    out.emplace_back(p + "attn.out.weight", &b.out_weight);
    out.emplace_back(p + "attn.out.bias", &b.out_bias);
    out.emplace_back(p + "ln_2.gain", &b.ln2_gain);
    out.emplace_back(p + "ln_2.bias", &b.ln2_bias);
    out.emplace_back(p + "mlp.fc.weight", &b.fc_weight);
    out.emplace_back(p + "mlp.fc.bias", &b.fc_bias);
    out.emplace_back(p + "mlp.proj.weight", &b.proj_weight);
    out.emplace_back(p + "mlp.proj.bias", &b.proj_bias);
  }
  out.emplace_back("ln_final.gain", &wt.ln_final_gain);
  out.emplace_back("ln_final.bias", &wt.ln_final_bias);
  out.emplace_back("text_projection", &wt.projection);
  return out;
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>>
EncoderWeights<T>::named_tensors() const {
  return collect<const EncoderWeights<T>, const Tensor<T>*>(*this);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>>
EncoderWeights<T>::named_tensors() {
  return collect<EncoderWeights<T>, Tensor<T>*>(*this);
}

template <typename T>
template <typename U>
EncoderWeights<U> EncoderWeights<T>::cast() const {
  EncoderWeights<U> out;
  out.config = config;
  out.blocks.resize(blocks.size());
  auto src = named_tensors();
  auto dst = out.named_tensors();
  for (std::size_t i = 0; i < src.size(); ++i) {
    *dst[i].second = src[i].second->template cast<U>();
  }
  return out;
}

template <typename T>
std::uint64_t EncoderWeights<T>::hash() const {
  Hasher h;
  h.update_string(precision_name<T>());
  for (std::size_t v : {config.layers, config.heads, config.width,
                        config.output_dim, config.max_positions,
                        config.vocab_size}) {
    h.update_u64(v);
  }
  h.update(&config.eps, sizeof(config.eps));
  for (const auto& [name, tensor] : named_tensors()) {
    h.update_string(name);
    h.update_tensor(*tensor);
  }
  return h.digest();
}

template <typename T>
EncoderWeights<T> init_random(const EncoderConfig& config, SeededRng& rng,
                              InitScheme scheme) {
  config.validate();
  const double w = static_cast<double>(config.width);
  double token_std = 0.02, pos_std = 0.02, attn_std = 0.02, out_std = 0.02,
         fc_std = 0.02, proj_std = 0.02;
  if (scheme == InitScheme::kWidthScaled) {
    pos_std = 0.01;
    attn_std = 1.0 / std::sqrt(w);
    out_std = attn_std / std::sqrt(2.0 * static_cast<double>(config.layers));
    fc_std = 1.0 / std::sqrt(2.0 * w);
    proj_std = 1.0 / std::sqrt(w);
  }

  EncoderWeights<T> wt;
  wt.config = config;
  wt.blocks.resize(config.layers);
  // Draws follow schema order, so the stream is fixed by the config alone.
  const auto schema = weight_schema(config);
  auto slots = wt.named_tensors();
  for (std::size_t i = 0; i < schema.size(); ++i) {
    const std::string& name = schema[i].first;
    Tensor<T>& t = *slots[i].second;
    t = Tensor<T>(schema[i].second);
    auto ends_with = [&](const char* suffix) {
      const std::string s(suffix);
      return name.size() >= s.size() &&
             name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".gain")) {
      t.fill(T{1});
      continue;
    }
    if (ends_with(".bias")) continue;
    double std = 0.02;
    if (name == "token_embedding") {
      std = token_std;
    } else if (name == "positional_embedding") {
      std = pos_std;
    } else if (ends_with("attn.qkv.weight")) {
      std = attn_std;
    } else if (ends_with("attn.out.weight") || ends_with("mlp.proj.weight")) {
      std = out_std;
    } else if (ends_with("mlp.fc.weight")) {
      std = fc_std;
    } else if (name == "text_projection") {
      std = proj_std;
    }
    for (T& v : t.values()) v = static_cast<T>(rng.gaussian(0.0, std));
  }
  return wt;
}

template <typename T>
Tensor<T> embed_tokens(const EncoderWeights<T>& weights,
                       std::span<const TokenId> ids) {
  const std::size_t w = weights.config.width;
  Tensor<T> out({ids.size(), w});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] >= weights.config.vocab_size) {
      throw VocabularyError("token id " + std::to_string(ids[t]) +
                            " is outside the vocabulary of size " +
                            std::to_string(weights.config.vocab_size));
    }
    auto src = weights.token_table.row(ids[t]);
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

template <typename T>
EncodeResult<T> encode_sequence(const EncoderWeights<T>& weights,
                                const Tensor<T>& embeddings,
                                std::size_t eot_index) {
  const EncoderConfig& cfg = weights.config;
  const std::size_t w = cfg.width, H = cfg.heads, hd = cfg.head_dim();
  if (embeddings.rank() != 2 || embeddings.extent(1) != w) {
    throw DimensionError("encoder input must be [len x " + std::to_string(w) +
                         "], got " + shape_to_string(embeddings.shape()));
  }
  const std::size_t len = embeddings.extent(0);
  if (len > cfg.max_positions) {
    throw SequenceLengthError("sequence length " + std::to_string(len) +
                              " exceeds max positions " +
                              std::to_string(cfg.max_positions));
  }
  if (eot_index >= len) {
    throw SequenceLengthError("eot index " + std::to_string(eot_index) +
                              " is outside a sequence of length " +
                              std::to_string(len));
  }
  const T eps = static_cast<T>(cfg.eps);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  const std::size_t n = eot_index + 1;

  EncodeResult<T> result;
  ForwardCache<T>& cache = result.cache;
  cache.length = len;
  cache.eot_index = eot_index;
  cache.layers.resize(cfg.layers);

  Tensor<T> x({n, w});
  for (std::size_t t = 0; t < n; ++t) {
    auto er = embeddings.row(t);
    auto pr = weights.positional.row(t);
    auto xr = x.row(t);
    for (std::size_t j = 0; j < w; ++j) xr[j] = er[j] + pr[j];
  }

  std::vector<T> normed(w), hidden(4 * w), act(4 * w), tmp(w);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const BlockWeights<T>& b = weights.blocks[l];
    auto& lc = cache.layers[l];
    lc.input = x;
    lc.ln1.resize(n);
    lc.qkv = Tensor<T>({n, 3 * w});
    for (std::size_t t = 0; t < n; ++t) {
      lc.ln1[t] = layer_norm_into<T>(x.row(t), b.ln1_gain.values(),
                                     b.ln1_bias.values(), eps, normed);
      vecmat<T>(normed, b.qkv_weight, b.qkv_bias.values(), lc.qkv.row(t));
    }

    lc.attention = Tensor<T>({H, n, n});
    Tensor<T> attended({n, w});
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t qo = h * hd, ko = w + h * hd, vo = 2 * w + h * hd;
      for (std::size_t t = 0; t < n; ++t) {
        std::span<T> probs(&lc.attention(h, t, 0), t + 1);
        for (std::size_t s = 0; s <= t; ++s) {
          T dot{0};
          for (std::size_t j = 0; j < hd; ++j) {
            dot += lc.qkv(t, qo + j) * lc.qkv(s, ko + j);
          }
          probs[s] = dot * scale;
        }
        softmax_inplace(probs);
        for (std::size_t s = 0; s <= t; ++s) {
          const T p = probs[s];
          for (std::size_t j = 0; j < hd; ++j) {
            attended(t, qo + j) += p * lc.qkv(s, vo + j);
          }
        }
      }
    }

    for (std::size_t t = 0; t < n; ++t) {
      vecmat<T>(attended.row(t), b.out_weight, b.out_bias.values(), tmp);
      auto xr = x.row(t);
      for (std::size_t j = 0; j < w; ++j) xr[j] += tmp[j];
    }
    lc.mid = x;

    lc.ln2.resize(n);
    lc.mlp_pre = Tensor<T>({n, 4 * w});
    for (std::size_t t = 0; t < n; ++t) {
      lc.ln2[t] = layer_norm_into<T>(x.row(t), b.ln2_gain.values(),
                                     b.ln2_bias.values(), eps, normed);
      auto pre = lc.mlp_pre.row(t);
      vecmat<T>(normed, b.fc_weight, b.fc_bias.values(), pre);
      for (std::size_t j = 0; j < 4 * w; ++j) act[j] = quick_gelu(pre[j]);
      vecmat<T>(act, b.proj_weight, b.proj_bias.values(), tmp);
      auto xr = x.row(t);
      for (std::size_t j = 0; j < w; ++j) xr[j] += tmp[j];
    }
  }

  cache.final_input = Tensor<T>({w});
  auto eot_row = x.row(eot_index);
  std::copy(eot_row.begin(), eot_row.end(), cache.final_input.values().begin());
  cache.final_stats =
      layer_norm_into<T>(eot_row, weights.ln_final_gain.values(),
                         weights.ln_final_bias.values(), eps, normed);
  result.feature = Tensor<T>({cfg.output_dim});
  vecmat<T>(normed, weights.projection, {}, result.feature.values());
  return result;
}

template <typename T>
Tensor<T> encode_backward(const EncoderWeights<T>& weights,
                          const ForwardCache<T>& cache,
                          const Tensor<T>& d_feature) {
  const EncoderConfig& cfg = weights.config;
  const std::size_t w = cfg.width, H = cfg.heads, hd = cfg.head_dim();
  if (d_feature.size() != cfg.output_dim) {
    throw ContractError("feature gradient has " +
                        std::to_string(d_feature.size()) +
                        " entries but the encoder output dim is " +
                        std::to_string(cfg.output_dim));
  }
  if (cache.layers.size() != cfg.layers || cache.final_input.size() != w ||
      cache.eot_index >= cache.length) {
    throw ContractError("forward cache does not match the encoder weights");
  }
  const std::size_t n = cache.eot_index + 1;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  // Back through projection and final layer norm: only the EOT row is live.
  std::vector<T> d_normed(w);
  matvec<T>(weights.projection, d_feature.values(), d_normed);
  Tensor<T> dx({n, w});
  layer_norm_backward<T>(cache.final_input.values(),
                         weights.ln_final_gain.values(), cache.final_stats,
                         d_normed, dx.row(cache.eot_index));

  std::vector<T> d_act(4 * w), d_pre(4 * w), d_ln(w), d_in(w);
  for (std::size_t li = cfg.layers; li-- > 0;) {
    const BlockWeights<T>& b = weights.blocks[li];
    const auto& lc = cache.layers[li];

    // MLP sub-block: x_out = mid + proj(gelu(fc(ln2(mid)))).
    for (std::size_t t = 0; t < n; ++t) {
      auto g = dx.row(t);
      matvec<T>(b.proj_weight, std::span<const T>(g.data(), w), d_act);
      auto pre = lc.mlp_pre.row(t);
      for (std::size_t j = 0; j < 4 * w; ++j) {
        d_pre[j] = d_act[j] * quick_gelu_derivative(pre[j]);
      }
      matvec<T>(b.fc_weight, d_pre, d_ln);
      layer_norm_backward<T>(lc.mid.row(t), b.ln2_gain.values(), lc.ln2[t],
                             d_ln, d_in);
      for (std::size_t j = 0; j < w; ++j) g[j] += d_in[j];
    }

    // Attention sub-block: mid = input + out(attend(qkv(ln1(input)))).
    Tensor<T> d_attended({n, w});
    for (std::size_t t = 0; t < n; ++t) {
      matvec<T>(b.out_weight, std::span<const T>(dx.row(t).data(), w),
                d_attended.row(t));
    }
    Tensor<T> d_qkv({n, 3 * w});
    std::vector<T> d_probs(n);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t qo = h * hd, ko = w + h * hd, vo = 2 * w + h * hd;
      for (std::size_t t = 0; t < n; ++t) {
        const T* probs = &lc.attention(h, t, 0);
        T weighted{0};
        for (std::size_t s = 0; s <= t; ++s) {
          T dp{0};
          for (std::size_t j = 0; j < hd; ++j) {
            dp += d_attended(t, qo + j) * lc.qkv(s, vo + j);
            d_qkv(s, vo + j) += probs[s] * d_attended(t, qo + j);
          }
          d_probs[s] = dp;
          weighted += probs[s] * dp;
        }
        for (std::size_t s = 0; s <= t; ++s) {
          const T d_score = probs[s] * (d_probs[s] - weighted) * scale;
          for (std::size_t j = 0; j < hd; ++j) {
            d_qkv(t, qo + j) += d_score * lc.qkv(s, ko + j);
            d_qkv(s, ko + j) += d_score * lc.qkv(t, qo + j);
          }
        }
      }
    }
    for (std::size_t t = 0; t < n; ++t) {
      matvec<T>(b.qkv_weight, std::span<const T>(d_qkv.row(t).data(), 3 * w),
                d_ln);
      layer_norm_backward<T>(lc.input.row(t), b.ln1_gain.values(), lc.ln1[t],
                             d_ln, d_in);
      auto g = dx.row(t);
      for (std::size_t j = 0; j < w; ++j) g[j] += d_in[j];
    }
  }

  Tensor<T> out({cache.length, w});
  std::copy(dx.values().begin(), dx.values().end(), out.values().begin());
  return out;
}

#define ECO_INSTANTIATE_ENCODER(T)                                            \
  template struct EncoderWeights<T>;                                          \
  template EncoderWeights<T> init_random<T>(const EncoderConfig&, SeededRng&, \
                                            InitScheme);                      \
  template Tensor<T> embed_tokens<T>(const EncoderWeights<T>&,                \
                                     std::span<const TokenId>);               \
  template EncodeResult<T> encode_sequence<T>(const EncoderWeights<T>&,       \
                                              const Tensor<T>&, std::size_t); \
  template Tensor<T> encode_backward<T>(                                      \
      const EncoderWeights<T>&, const ForwardCache<T>&, const Tensor<T>&);

ECO_INSTANTIATE_ENCODER(float)
ECO_INSTANTIATE_ENCODER(double)
#undef ECO_INSTANTIATE_ENCODER

template EncoderWeights<double> EncoderWeights<float>::cast<double>() const;
template EncoderWeights<float> EncoderWeights<double>::cast<float>() const;
template EncoderWeights<float> EncoderWeights<float>::cast<float>() const;
template EncoderWeights<double> EncoderWeights<double>::cast<double>() const;

}  // namespace eco
