#include "eco/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>

namespace eco {

std::size_t TrainConfig::effective_batch_size(std::size_t classes) const {
  if (batch_size != 0) return batch_size;
  return std::min<std::size_t>(32, classes * shots);
}

double TrainConfig::learning_rate(std::size_t epoch) const {
  if (epoch < warmup_epochs) return std::min(warmup_lr, lr);
  const double t = static_cast<double>(epoch - warmup_epochs);
  const double span = static_cast<double>(epochs - warmup_epochs);
  return 0.5 * lr * (1.0 + std::cos(std::numbers::pi * t / span));
}

void TrainConfig::validate() const {
  if (shots == 0) throw ConfigError("shots must be at least 1");
  if (epochs == 0) throw ConfigError("epochs must be at least 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) {
    throw ConfigError("learning rate must be finite and nonnegative");
  }
  if (!(warmup_lr >= 0.0)) throw ConfigError("warmup lr must be nonnegative");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("momentum must lie in [0, 1)");
  }
  if (!(init_std >= 0.0)) throw ConfigError("init std must be nonnegative");
  ClassifierConfig{temperature}.validate();
}

bool is_protocol_shot_count(std::size_t shots) {
  return std::find(std::begin(kProtocolShots), std::end(kProtocolShots),
                   shots) != std::end(kProtocolShots);
}

SeededRng stream_rng(std::uint64_t seed, SeedStream stream) {
  return SeededRng(seed).derive(static_cast<std::uint64_t>(stream));
}

std::vector<std::size_t> FewShotSplit::flattened() const {
  std::vector<std::size_t> out;
  for (const auto& c : per_class) out.insert(out.end(), c.begin(), c.end());
  return out;
}

FewShotSplit sample_few_shot(const EmbeddingBank& bank, std::size_t shots,
                             SeededRng& rng) {
  if (shots == 0) throw ProtocolError("few-shot split needs at least 1 shot");
  const std::size_t K = bank.num_classes();
  std::vector<std::vector<std::size_t>> pools(K);
  for (std::size_t r = 0; r < bank.records(); ++r) {
    pools.at(bank.labels[r]).push_back(r);
  }
  FewShotSplit split;
  split.shots = shots;
  split.per_class.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    auto& pool = pools[k];
    if (pool.size() < shots) {
      throw ProtocolError("class " + std::to_string(k) + " ('" +
                          bank.classes.classes[k].name + "') has " +
                          std::to_string(pool.size()) + " examples, needs " +
                          std::to_string(shots));
    }
    // Partial Fisher-Yates: the first `shots` slots are a uniform sample.
    for (std::size_t i = 0; i < shots; ++i) {
      const std::size_t j = i + rng.uniform_index(pool.size() - i);
      std::swap(pool[i], pool[j]);
    }
    split.per_class[k].assign(pool.begin(), pool.begin() + shots);
  }
  return split;
}

template <typename T>
TrainResult<T> train(const EncoderWeights<T>& weights,
                     PromptEnsemble<T> ensemble, const ClassTokenTable& classes,
                     const SpecialTokens& specials, const FewShotSplit& split,
                     const EmbeddingBank& bank, const TrainConfig& config) {
  config.validate();
  ensemble.validate();
  if (bank.dim != weights.config.output_dim) {
    throw DimensionError("bank dim " + std::to_string(bank.dim) +
                         " differs from encoder output dim " +
                         std::to_string(weights.config.output_dim));
  }
  const std::size_t K = classes.size(), d = bank.dim;
  std::vector<std::size_t> order = split.flattened();
  if (order.empty()) throw ProtocolError("training split is empty");
  const std::size_t batch = config.effective_batch_size(K);

  EnsembleOptions ens_opts = config.ensemble;
  ens_opts.threads = config.threads;
  SeededRng shuffle_rng = stream_rng(config.seed, SeedStream::kShuffle);
  Tensor<T> velocity(ensemble.context.shape());
  const T momentum = static_cast<T>(config.momentum);

  TrainResult<T> result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.learning_rate(epoch);
    const T step = static_cast<T>(lr);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);
    }
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t B = std::min(batch, order.size() - start);
      Tensor<T> queries({B, d});
      std::vector<std::uint32_t> labels(B);
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t r = order[start + b];
        auto v = bank.vector(r);
        std::copy(v.begin(), v.end(), queries.row(b).begin());
        labels[b] = bank.labels[r];
      }
      auto fwd = ensemble_class_features(weights, ensemble, classes, specials,
                                         ens_opts);
      if (!fwd.features.all_finite()) {
        throw DivergenceError(epoch, lr,
                              "non-finite class features at epoch " +
                                  std::to_string(epoch + 1) + " (lr " +
                                  std::to_string(lr) + ")");
      }
      auto lg = cross_entropy(queries, labels, fwd.features, config.temperature);
      if (!std::isfinite(static_cast<double>(lg.loss))) {
        throw DivergenceError(epoch, lr,
                              "non-finite loss at epoch " +
                                  std::to_string(epoch + 1) + " (lr " +
                                  std::to_string(lr) + ")");
      }
      epoch_loss += static_cast<double>(lg.loss) * static_cast<double>(B);
      const Tensor<T> grad =
          scatter_feature_grads(lg.d_text_features, fwd, weights, config.threads);
      auto ctx = ensemble.context.values();
      auto vel = velocity.values();
      auto g = grad.values();
      for (std::size_t i = 0; i < ctx.size(); ++i) {
        vel[i] = momentum * vel[i] + g[i];
        ctx[i] -= step * vel[i];
      }
    }
    result.loss_history.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  result.ensemble = std::move(ensemble);
  return result;
}

template <typename T>
double evaluate(const EncoderWeights<T>& weights,
                const PromptEnsemble<T>& ensemble, const ClassTokenTable& classes,
                const SpecialTokens& specials, const EmbeddingBank& test,
                const EnsembleOptions& options) {
  const auto bank = precompute_prototypes(weights, ensemble, classes, specials, options);
  return accuracy(bank.prototypes, test);
}

namespace {

std::vector<std::string> split_commas(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto b = tok.find_first_not_of(" \t");
    const auto e = tok.find_last_not_of(" \t");
    out.push_back(b == std::string::npos ? "" : tok.substr(b, e - b + 1));
  }
  if (!text.empty() && text.back() == ',') out.emplace_back();
  return out;
}

bool parse_unsigned(const std::string& s, std::uint64_t& out) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos ||
      s.size() > 19) {
    return false;
  }
  out = std::stoull(s);
  return true;
}

}  // namespace

std::vector<GridCell> parse_grid(const std::string& text) {
  std::vector<GridCell> grid;
  for (const auto& tok : split_commas(text)) {
    const auto x = tok.find('x');
    std::uint64_t D = 0, N = 0;
    if (x == std::string::npos || !parse_unsigned(tok.substr(0, x), D) ||
        !parse_unsigned(tok.substr(x + 1), N) || D == 0 || N == 0) {
      throw ConfigError("malformed grid token '" + tok +
                        "' (expected DxN with D, N >= 1)");
    }
    grid.push_back({D, N});
  }
  if (grid.empty()) throw ConfigError("grid is empty");
  return grid;
}

std::vector<std::size_t> parse_count_list(const std::string& text,
                                          const char* what) {
  std::vector<std::size_t> out;
  for (const auto& tok : split_commas(text)) {
    std::uint64_t v = 0;
    if (!parse_unsigned(tok, v) || v == 0) {
      throw ConfigError(std::string("malformed ") + what + " token '" + tok + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(std::string(what) + " list is empty");
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  for (const auto& tok : split_commas(text)) {
    std::uint64_t v = 0;
    if (!parse_unsigned(tok, v)) {
      throw ConfigError("malformed seed token '" + tok + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("seed list is empty");
  return out;
}

void check_parity(const std::vector<GridCell>& grid, std::size_t budget) {
  for (const auto& c : grid) {
    if (c.prompts * c.ctx_len != budget) {
      throw ParityError("grid cell " + std::to_string(c.prompts) + "x" +
                        std::to_string(c.ctx_len) + " has D*N = " +
                        std::to_string(c.prompts * c.ctx_len) +
                        ", expected budget M = " + std::to_string(budget));
    }
  }
}

double RunReport::seed_mean(const std::string& dataset, const GridCell& cell,
                            std::size_t shot_count) const {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::uint64_t seed : seeds) {
    for (const auto& r : records) {
      if (r.dataset == dataset && r.prompts == cell.prompts &&
          r.ctx_len == cell.ctx_len && r.shots == shot_count && r.seed == seed) {
        sum += r.accuracy;
        ++n;
        break;
      }
    }
  }
  if (n != seeds.size()) {
    throw ContractError("report is missing runs for " + dataset + " " +
                        std::to_string(cell.prompts) + "x" +
                        std::to_string(cell.ctx_len) + " at " +
                        std::to_string(shot_count) + " shots");
  }
  return sum / static_cast<double>(n);
}

std::optional<GridCell> RunReport::coop_cell() const {
  const GridCell coop{1, budget};
  if (std::find(grid.begin(), grid.end(), coop) == grid.end()) return std::nullopt;
  return coop;
}

std::vector<AggregateRow> RunReport::aggregate() const {
  std::vector<AggregateRow> rows;
  for (const auto& cell : grid) {
    AggregateRow row{cell.prompts, cell.ctx_len, {}, {}};
    for (std::size_t s : shots) {
      double sum = 0.0;
      for (const auto& ds : datasets) sum += seed_mean(ds, cell, s);
      row.mean_accuracy.push_back(sum / static_cast<double>(datasets.size()));
    }
    rows.push_back(std::move(row));
  }
  if (auto coop = coop_cell()) {
    const auto it = std::find_if(rows.begin(), rows.end(), [&](const auto& r) {
      return r.prompts == coop->prompts && r.ctx_len == coop->ctx_len;
    });
    const std::vector<double> base = it->mean_accuracy;
    for (auto& r : rows) {
      for (std::size_t i = 0; i < base.size(); ++i) {
        r.delta_vs_coop.push_back(r.mean_accuracy[i] - base[i]);
      }
    }
  }
  return rows;
}

template <typename T>
RunRecord run_once(const EncoderWeights<T>& weights, const SpecialTokens& specials,
                   const Dataset& dataset, const GridCell& cell, std::size_t shots,
                   std::uint64_t seed, const TrainConfig& base) {
  const auto start = std::chrono::steady_clock::now();
  TrainConfig cfg = base;
  cfg.shots = shots;
  cfg.seed = seed;

  RunRecord rec;
  rec.dataset = dataset.name;
  rec.prompts = cell.prompts;
  rec.ctx_len = cell.ctx_len;
  rec.shots = shots;
  rec.seed = seed;
  rec.epochs = cfg.epochs;
  rec.encoder_hash_before = weights.hash();

  SeededRng split_rng = stream_rng(seed, SeedStream::kFewShot);
  const FewShotSplit split = sample_few_shot(dataset.train, shots, split_rng);
  SeededRng init_rng = stream_rng(seed, SeedStream::kContextInit);
  auto ensemble = init_context<T>(cell.prompts, cell.ctx_len, weights.config.width,
                                  cfg.init_std, init_rng);
  auto trained = train(weights, std::move(ensemble), dataset.train.classes,
                       specials, split, dataset.train, cfg);
  rec.final_loss = trained.loss_history.back();
  rec.accuracy = evaluate(weights, trained.ensemble, dataset.train.classes,
                          specials, dataset.test, cfg.ensemble);
  rec.encoder_hash_after = weights.hash();
  rec.wall_seconds = std::chrono::duration<double>(
                         std::chrono::steady_clock::now() - start)
                         .count();
  return rec;
}

template <typename T>
RunReport sweep(const EncoderWeights<T>& weights, const SpecialTokens& specials,
                const std::vector<Dataset>& datasets,
                const std::vector<GridCell>& grid,
                const std::vector<std::size_t>& shots_list,
                const std::vector<std::uint64_t>& seeds,
                const SweepOptions& options) {
  check_parity(grid, options.budget);
  if (datasets.empty()) throw ConfigError("sweep needs at least one dataset");
  if (shots_list.empty() || seeds.empty()) {
    throw ConfigError("sweep needs at least one shot count and one seed");
  }
  RunReport report;
  for (const auto& ds : datasets) report.datasets.push_back(ds.name);
  report.grid = grid;
  report.shots = shots_list;
  report.seeds = seeds;
  report.budget = options.budget;

  struct Job {
    std::size_t dataset, cell, shots;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t di = 0; di < datasets.size(); ++di) {
    for (std::size_t ci = 0; ci < grid.size(); ++ci) {
      for (std::size_t s : shots_list) {
        for (std::uint64_t seed : seeds) jobs.push_back({di, ci, s, seed});
      }
    }
  }
  TrainConfig base = options.train;
  if (options.threads > 1) base.threads = 1;
  report.records.resize(jobs.size());
  parallel_for(jobs.size(), options.threads, [&](std::size_t i) {
    const Job& j = jobs[i];
    report.records[i] = run_once(weights, specials, datasets[j.dataset],
                                 grid[j.cell], j.shots, j.seed, base);
  });
  return report;
}

#define ECO_INSTANTIATE_TRAINER(T)                                            \
  template TrainResult<T> train<T>(                                           \
      const EncoderWeights<T>&, PromptEnsemble<T>, const ClassTokenTable&,    \
      const SpecialTokens&, const FewShotSplit&, const EmbeddingBank&,        \
      const TrainConfig&);                                                    \
  template double evaluate<T>(const EncoderWeights<T>&,                       \
                              const PromptEnsemble<T>&,                       \
                              const ClassTokenTable&, const SpecialTokens&,   \
                              const EmbeddingBank&, const EnsembleOptions&);  \
  template RunRecord run_once<T>(const EncoderWeights<T>&,                    \
                                 const SpecialTokens&, const Dataset&,        \
                                 const GridCell&, std::size_t, std::uint64_t, \
                                 const TrainConfig&);                         \
  template RunReport sweep<T>(                                                \
      const EncoderWeights<T>&, const SpecialTokens&,                         \
      const std::vector<Dataset>&, const std::vector<GridCell>&,              \
      const std::vector<std::size_t>&, const std::vector<std::uint64_t>&,     \
      const SweepOptions&);

ECO_INSTANTIATE_TRAINER(float)
ECO_INSTANTIATE_TRAINER(double)
#undef ECO_INSTANTIATE_TRAINER

}  // namespace eco
