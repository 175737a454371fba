#ifndef ECO_TRAINER_HPP_
#define ECO_TRAINER_HPP_

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "eco/bank.hpp"
#include "eco/classifier.hpp"
#include "eco/prompt_ensemble.hpp"
#include "eco/text_encoder.hpp"

namespace eco {

inline constexpr std::size_t kProtocolShots[] = {1, 2, 4, 8, 16};
inline constexpr std::uint64_t kProtocolSeeds[] = {1, 2, 3};

struct TrainConfig {
  std::size_t shots = 16;
  std::size_t epochs = 50;
  std::size_t batch_size = 0;  // 0 selects min(32, K * shots)
  double lr = 0.002;
  double momentum = 0.9;
  std::size_t warmup_epochs = 1;
  double warmup_lr = 1e-5;
  std::uint64_t seed = 1;
  double temperature = kDefaultTemperature;
  double init_std = 0.02;
  std::size_t threads = 1;
  EnsembleOptions ensemble;

  std::size_t effective_batch_size(std::size_t classes) const;
  // Constant warmup, then cosine decay from lr towards 0.
  double learning_rate(std::size_t epoch) const;
  void validate() const;
};

bool is_protocol_shot_count(std::size_t shots);

// Streams derived from a run seed; every consumer draws from its own stream.
enum class SeedStream : std::uint64_t {
  kFewShot = 1,
  kContextInit = 2,
  kShuffle = 3,
};
SeededRng stream_rng(std::uint64_t seed, SeedStream stream);

struct FewShotSplit {
  std::size_t shots = 0;
  // per_class[k] holds bank record indices.
  std::vector<std::vector<std::size_t>> per_class;

  std::vector<std::size_t> flattened() const;
  friend bool operator==(const FewShotSplit&, const FewShotSplit&) = default;
};

FewShotSplit sample_few_shot(const EmbeddingBank& bank, std::size_t shots,
                             SeededRng& rng);

template <typename T>
struct TrainResult {
  PromptEnsemble<T> ensemble;
  std::vector<double> loss_history;  // mean loss per epoch
};

// SGD with momentum on the context vectors only. Everything else (encoder
// weights, class embeddings, temperature) is read-only.
template <typename T>
TrainResult<T> train(const EncoderWeights<T>& weights,
                     PromptEnsemble<T> ensemble, const ClassTokenTable& classes,
                     const SpecialTokens& specials, const FewShotSplit& split,
                     const EmbeddingBank& bank, const TrainConfig& config);

// Top-1 accuracy over the whole bank using precomputed prototypes.
template <typename T>
double evaluate(const EncoderWeights<T>& weights,
                const PromptEnsemble<T>& ensemble, const ClassTokenTable& classes,
                const SpecialTokens& specials, const EmbeddingBank& test,
                const EnsembleOptions& options = {});

struct GridCell {
  std::size_t prompts = 0;  // D
  std::size_t ctx_len = 0;  // N

  friend bool operator==(const GridCell&, const GridCell&) = default;
};

// "16x1,8x2" -> {(16,1),(8,2)}; throws ConfigError naming a bad token.
std::vector<GridCell> parse_grid(const std::string& text);
std::vector<std::size_t> parse_count_list(const std::string& text,
                                          const char* what);
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

// Throws ParityError unless every cell has D * N == budget.
void check_parity(const std::vector<GridCell>& grid, std::size_t budget);

struct RunRecord {
  std::string dataset;
  std::size_t prompts = 0;
  std::size_t ctx_len = 0;
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double final_loss = 0.0;
  std::size_t epochs = 0;
  double wall_seconds = 0.0;
  std::uint64_t encoder_hash_before = 0;
  std::uint64_t encoder_hash_after = 0;
};

struct AggregateRow {
  std::size_t prompts = 0;
  std::size_t ctx_len = 0;
  // shots -> mean over seeds and datasets, same order as RunReport::shots.
  std::vector<double> mean_accuracy;
  std::vector<double> delta_vs_coop;  // empty when no CoOp cell exists
};

struct RunReport {
  std::vector<std::string> datasets;
  std::vector<GridCell> grid;
  std::vector<std::size_t> shots;
  std::vector<std::uint64_t> seeds;
  std::size_t budget = 0;
  std::vector<RunRecord> records;

  // Mean accuracy of one (dataset, cell, shots) over the declared seeds.
  double seed_mean(const std::string& dataset, const GridCell& cell,
                   std::size_t shots) const;
  // Per-cell means over seeds, then over datasets; delta rows are computed
  // against the (1, budget) cell when present.
  std::vector<AggregateRow> aggregate() const;
  std::optional<GridCell> coop_cell() const;
};

struct Dataset {
  std::string name;
  EmbeddingBank train;
  EmbeddingBank test;
};

struct SweepOptions {
  std::size_t budget = 16;  // M
  TrainConfig train;        // shots and seed are overridden per run
  std::size_t threads = 1;  // workers across runs
};

// One sample_few_shot + init_context + train + evaluate run.
template <typename T>
RunRecord run_once(const EncoderWeights<T>& weights, const SpecialTokens& specials,
                   const Dataset& dataset, const GridCell& cell, std::size_t shots,
                   std::uint64_t seed, const TrainConfig& base);

template <typename T>
RunReport sweep(const EncoderWeights<T>& weights, const SpecialTokens& specials,
                const std::vector<Dataset>& datasets,
                const std::vector<GridCell>& grid,
                const std::vector<std::size_t>& shots_list,
                const std::vector<std::uint64_t>& seeds,
                const SweepOptions& options);

}  // namespace eco

#endif  // ECO_TRAINER_HPP_
