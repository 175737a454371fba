#ifndef ECO_DATASETS_IO_HPP_
#define ECO_DATASETS_IO_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "eco/bank.hpp"
#include "eco/numerics.hpp"
#include "eco/prompt_ensemble.hpp"
#include "eco/text_encoder.hpp"
#include "eco/trainer.hpp"

namespace eco {

using Bytes = std::vector<std::uint8_t>;

// ---------------------------------------------------------------------------
// Embedding bank, little-endian:
//   "ECOBANK1" | u32 version=1 | u32 K | u32 d | u32 records
//   per class:  u16 name bytes | UTF-8 name | u16 token count | u32 ids...
//   per record: u32 label | d x f32
// ---------------------------------------------------------------------------
inline constexpr char kBankMagic[8] = {'E', 'C', 'O', 'B', 'A', 'N', 'K', '1'};
inline constexpr std::uint32_t kBankVersion = 1;

Bytes write_bank(const EmbeddingBank& bank);
EmbeddingBank read_bank(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Tensor manifest container, shared by weights, checkpoints and prototypes:
//   "ECOWMAN1" | u32 version=1 | u32 header bytes | UTF-8 JSON header | blob
// The header holds {"format_version", "metadata", "tensors": [{name, shape,
// dtype, offset, length}]}; offsets are relative to the blob start.
// ---------------------------------------------------------------------------
inline constexpr char kManifestMagic[8] = {'E', 'C', 'O', 'W', 'M', 'A', 'N', '1'};
inline constexpr std::uint32_t kManifestVersion = 1;

using MetadataValue = std::variant<std::int64_t, double, std::string>;

struct ManifestTensor {
  std::string name;
  Shape shape;
  std::string dtype;  // "f32" or "f64"
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct WeightManifest {
  std::uint32_t format_version = kManifestVersion;
  std::map<std::string, MetadataValue> metadata;
  std::vector<ManifestTensor> tensors;
  Bytes blob;

  template <typename T>
  void add_tensor(const std::string& name, const Tensor<T>& t);
  const ManifestTensor* find(const std::string& name) const;
  // Any stored tensor converted to T; throws SchemaError when absent.
  template <typename T>
  Tensor<T> tensor(const std::string& name) const;

  std::int64_t int_metadata(const std::string& key) const;
  double real_metadata(const std::string& key) const;
  std::string string_metadata(const std::string& key) const;
  bool has_metadata(const std::string& key) const {
    return metadata.count(key) != 0;
  }
  // Unique names, non-overlapping in-bounds ranges, lengths match shapes.
  void validate() const;
};

Bytes write_manifest(const WeightManifest& manifest);
WeightManifest read_manifest(std::span<const std::uint8_t> bytes);

// Encoder weights as a manifest: config and special tokens in metadata,
// every schema tensor by name, stored as f32.
WeightManifest weights_to_manifest(const EncoderWeights<float>& weights,
                                   const SpecialTokens& specials);
EncoderWeights<float> weights_from_manifest(const WeightManifest& manifest);
SpecialTokens specials_from_manifest(const WeightManifest& manifest);

Bytes write_weights(const EncoderWeights<float>& weights,
                    const SpecialTokens& specials);
struct LoadedWeights {
  EncoderWeights<float> weights;
  SpecialTokens specials;
};
LoadedWeights read_weights(std::span<const std::uint8_t> bytes);

// Checkpoint: tensor "context" [D, N, w] plus D, N, the encoder hash and,
// when given, the class table it was trained on.
Bytes save_checkpoint(const PromptEnsemble<float>& ensemble,
                      std::uint64_t encoder_hash,
                      const ClassTokenTable& classes = {});
struct LoadedCheckpoint {
  PromptEnsemble<float> ensemble;
  std::uint64_t encoder_hash = 0;
  std::optional<ClassTokenTable> classes;
};
LoadedCheckpoint load_checkpoint(std::span<const std::uint8_t> bytes);
// Warning text when the checkpoint was trained against different weights.
std::optional<std::string> checkpoint_compatibility(
    const LoadedCheckpoint& checkpoint, std::uint64_t encoder_hash);
// Warning text when D * N differs from the declared budget.
std::optional<std::string> checkpoint_parity(const LoadedCheckpoint& checkpoint,
                                             std::size_t budget);

// Prototype bank: tensor "prototypes" [K, d] plus both fingerprints.
Bytes write_prototypes(const PrototypeBank<float>& bank);
PrototypeBank<float> read_prototypes(std::span<const std::uint8_t> bytes);

// Reports: JSON for machines, an aligned table with the delta-vs-CoOp row for
// people, and a CSV of (shots, accuracy) series per cell for plotting.
std::string report_to_json(const RunReport& report);
RunReport report_from_json(const std::string& text);
std::string report_to_table(const RunReport& report);
std::string report_to_series_csv(const RunReport& report);

// ---------------------------------------------------------------------------
// Teacher-prompt synthetic task.
// ---------------------------------------------------------------------------
struct SynthSpec {
  std::size_t classes = 5;
  EncoderConfig encoder;
  std::size_t teacher_prompts = 2;
  std::size_t teacher_length = 4;
  std::size_t class_tokens = 2;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 100;
  double noise = 0.3;
  std::uint64_t seed = 1;

  void validate() const;
};

struct SynthTask {
  EmbeddingBank train;
  EmbeddingBank test;
  ClassTokenTable classes;
  EncoderWeights<float> weights;
  SpecialTokens specials;
  // teacher_sequences[k][p]: complete [sot, teacher p, class k, eot] ids.
  std::vector<std::vector<std::vector<TokenId>>> teacher_sequences;
  Tensor<float> centroids;  // [K, d], the encoded teacher class features
};

SynthTask generate_synthetic(const SynthSpec& spec);

std::string teacher_record_to_json(const SynthTask& task, const SynthSpec& spec);
std::vector<std::vector<std::vector<TokenId>>> teacher_sequences_from_json(
    const std::string& text);

// File helpers. read_file throws ConfigError naming the path when missing.
Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);
std::uint64_t hash_bytes(std::span<const std::uint8_t> bytes);

}  // namespace eco

#endif  // ECO_DATASETS_IO_HPP_
