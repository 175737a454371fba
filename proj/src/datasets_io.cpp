#include "eco/datasets_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "json.hpp"

namespace eco {

using json = nlohmann::json;

namespace {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint64_t offset() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

  void need(std::size_t n, const std::string& what) const {
    if (remaining() < n) {
      throw FormatError(pos_, "truncated input while reading " + what);
    }
  }
  std::span<const std::uint8_t> take(std::size_t n, const std::string& what) {
    need(n, what);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint16_t u16(const std::string& what) {
    auto s = take(2, what);
    return static_cast<std::uint16_t>(s[0] | (s[1] << 8));
  }
  std::uint32_t u32(const std::string& what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{s[i]} << (8 * i);
    return v;
  }
  float f32(const std::string& what) {
    const std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFull) throw ConfigError(std::string(what) + " exceeds u32");
  return static_cast<std::uint32_t>(v);
}

std::uint16_t checked_u16(std::size_t v, const std::string& what) {
  if (v > 0xFFFF) throw ConfigError(what + " exceeds u16");
  return static_cast<std::uint16_t>(v);
}

}  // namespace

void EmbeddingBank::add(std::uint32_t label, std::span<const float> v) {
  if (v.size() != dim) {
    throw DimensionError("record has " + std::to_string(v.size()) +
                         " values, bank dim is " + std::to_string(dim));
  }
  labels.push_back(label);
  vectors.insert(vectors.end(), v.begin(), v.end());
}

void EmbeddingBank::validate() const {
  if (dim == 0) throw DimensionError("bank dim must be positive");
  if (vectors.size() != labels.size() * dim) {
    throw DimensionError("bank vectors do not match records x dim");
  }
  for (std::size_t r = 0; r < records(); ++r) {
    if (labels[r] >= num_classes()) {
      throw ContractError("record " + std::to_string(r) + " has label " +
                          std::to_string(labels[r]) + " >= K=" +
                          std::to_string(num_classes()));
    }
    double sq = 0.0;
    for (float v : vector(r)) {
      if (!std::isfinite(v)) {
        throw DegenerateFeatureError("record " + std::to_string(r) +
                                     " has a non-finite value");
      }
      sq += double(v) * double(v);
    }
    if (sq == 0.0) {
      throw DegenerateFeatureError("record " + std::to_string(r) +
                                   " is the zero vector");
    }
  }
}

EmbeddingBank EmbeddingBank::subset(std::span<const std::size_t> indices) const {
  EmbeddingBank out;
  out.dim = dim;
  out.classes = classes;
  for (std::size_t r : indices) out.add(labels.at(r), vector(r));
  return out;
}

// --------------------------------------------------------------------------
// Bank format
// --------------------------------------------------------------------------

Bytes write_bank(const EmbeddingBank& bank) {
  if (bank.vectors.size() != bank.records() * bank.dim) {
    throw DimensionError("bank vectors do not match records x dim");
  }
  ByteWriter w;
  w.bytes(kBankMagic, 8);
  w.u32(kBankVersion);
  w.u32(checked_u32(bank.num_classes(), "class count"));
  w.u32(checked_u32(bank.dim, "dim"));
  w.u32(checked_u32(bank.records(), "record count"));
  for (const auto& c : bank.classes.classes) {
    w.u16(checked_u16(c.name.size(), "class name '" + c.name + "'"));
    w.bytes(c.name.data(), c.name.size());
    w.u16(checked_u16(c.tokens.size(), "token count of '" + c.name + "'"));
    for (TokenId id : c.tokens) w.u32(id);
  }
  for (std::size_t r = 0; r < bank.records(); ++r) {
    w.u32(bank.labels[r]);
    for (float v : bank.vector(r)) w.f32(v);
  }
  return w.take();
}

EmbeddingBank read_bank(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.take(8, "bank magic");
  if (!std::equal(magic.begin(), magic.end(), kBankMagic)) {
    throw FormatError(0, "bad bank magic (expected ECOBANK1)");
  }
  const std::uint32_t version = r.u32("bank version");
  if (version != kBankVersion) {
    throw FormatError(8, "unsupported bank version " + std::to_string(version));
  }
  EmbeddingBank bank;
  const std::uint32_t K = r.u32("class count");
  bank.dim = r.u32("dim");
  const std::uint32_t records = r.u32("record count");
  if (bank.dim == 0) throw FormatError(16, "bank dim is zero");
  for (std::uint32_t k = 0; k < K; ++k) {
    const std::string what = "class " + std::to_string(k);
    ClassEntry entry;
    const std::uint16_t name_len = r.u16(what + " name length");
    auto name = r.take(name_len, what + " name");
    entry.name.assign(name.begin(), name.end());
    const std::uint16_t count = r.u16(what + " token count");
    for (std::uint16_t t = 0; t < count; ++t) {
      entry.tokens.push_back(r.u32(what + " token ids"));
    }
    bank.classes.classes.push_back(std::move(entry));
  }
  // Reserve only what the remaining bytes can actually hold.
  const std::size_t record_bytes = 4 + std::size_t{bank.dim} * 4;
  const std::size_t fit = std::min<std::size_t>(records, r.remaining() / record_bytes);
  bank.labels.reserve(fit);
  bank.vectors.reserve(fit * bank.dim);
  for (std::uint32_t i = 0; i < records; ++i) {
    const std::string what = "record " + std::to_string(i);
    const std::uint64_t at = r.offset();
    r.need(record_bytes, what);
    const std::uint32_t label = r.u32(what);
    if (label >= K) {
      throw FormatError(at, what + " has label " + std::to_string(label) +
                                " >= K=" + std::to_string(K));
    }
    bank.labels.push_back(label);
    for (std::uint32_t j = 0; j < bank.dim; ++j) bank.vectors.push_back(r.f32(what));
  }
  if (r.remaining() != 0) {
    throw FormatError(r.offset(), std::to_string(r.remaining()) +
                                      " trailing bytes after the last record");
  }
  return bank;
}

// --------------------------------------------------------------------------
// Manifest container
// --------------------------------------------------------------------------

template <typename T>
void WeightManifest::add_tensor(const std::string& name, const Tensor<T>& t) {
  if (find(name) != nullptr) throw SchemaError("duplicate tensor name '" + name + "'");
  ManifestTensor entry{name, t.shape(), precision_name<T>(), blob.size(),
                       t.size() * sizeof(T)};
  ByteWriter w;
  for (T v : t.values()) {
    if constexpr (std::is_same_v<T, float>) {
      w.f32(v);
    } else {
      w.f64(v);
    }
  }
  const Bytes b = w.take();
  blob.insert(blob.end(), b.begin(), b.end());
  tensors.push_back(std::move(entry));
}

const ManifestTensor* WeightManifest::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

template <typename T>
Tensor<T> WeightManifest::tensor(const std::string& name) const {
  const ManifestTensor* e = find(name);
  if (e == nullptr) throw SchemaError("manifest is missing tensor '" + name + "'");
  const std::size_t n = shape_size(e->shape);
  const std::size_t width = e->dtype == "f32" ? 4 : 8;
  if (e->offset + e->length > blob.size() || e->length != n * width) {
    throw FormatError(e->offset, "tensor '" + name + "' range is inconsistent");
  }
  std::vector<T> data(n);
  const std::uint8_t* p = blob.data() + e->offset;
  for (std::size_t i = 0; i < n; ++i, p += width) {
    if (width == 4) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= std::uint32_t{p[b]} << (8 * b);
      float v;
      std::memcpy(&v, &bits, 4);
      data[i] = static_cast<T>(v);
    } else {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= std::uint64_t{p[b]} << (8 * b);
      double v;
      std::memcpy(&v, &bits, 8);
      data[i] = static_cast<T>(v);
    }
  }
  return Tensor<T>(e->shape, std::move(data));
}

template void WeightManifest::add_tensor<float>(const std::string&, const Tensor<float>&);
template void WeightManifest::add_tensor<double>(const std::string&, const Tensor<double>&);
template Tensor<float> WeightManifest::tensor<float>(const std::string&) const;
template Tensor<double> WeightManifest::tensor<double>(const std::string&) const;

std::int64_t WeightManifest::int_metadata(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw SchemaError("manifest metadata is missing '" + key + "'");
  if (const auto* v = std::get_if<std::int64_t>(&it->second)) return *v;
  throw SchemaError("manifest metadata '" + key + "' is not an integer");
}

double WeightManifest::real_metadata(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw SchemaError("manifest metadata is missing '" + key + "'");
  if (const auto* v = std::get_if<double>(&it->second)) return *v;
  if (const auto* v = std::get_if<std::int64_t>(&it->second)) return static_cast<double>(*v);
  throw SchemaError("manifest metadata '" + key + "' is not a number");
}

std::string WeightManifest::string_metadata(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw SchemaError("manifest metadata is missing '" + key + "'");
  if (const auto* v = std::get_if<std::string>(&it->second)) return *v;
  throw SchemaError("manifest metadata '" + key + "' is not a string");
}

void WeightManifest::validate() const {
  std::set<std::string> names;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  for (const auto& t : tensors) {
    if (!names.insert(t.name).second) {
      throw SchemaError("duplicate tensor name '" + t.name + "'");
    }
    if (t.dtype != "f32" && t.dtype != "f64") {
      throw SchemaError("tensor '" + t.name + "' has unsupported dtype '" + t.dtype + "'");
    }
    const std::uint64_t width = t.dtype == "f32" ? 4 : 8;
    if (t.length != shape_size(t.shape) * width) {
      throw SchemaError("tensor '" + t.name + "' length " + std::to_string(t.length) +
                        " does not match shape " + shape_to_string(t.shape));
    }
    if (t.offset > blob.size() || t.length > blob.size() - t.offset) {
      throw SchemaError("tensor '" + t.name + "' lies outside the blob");
    }
    if (t.length > 0) ranges.emplace_back(t.offset, t.offset + t.length);
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first < ranges[i - 1].second) {
      throw SchemaError("tensor byte ranges overlap");
    }
  }
}

Bytes write_manifest(const WeightManifest& manifest) {
  manifest.validate();
  json header;
  header["format_version"] = manifest.format_version;
  json meta = json::object();
  for (const auto& [k, v] : manifest.metadata) {
    std::visit([&](const auto& x) { meta[k] = x; }, v);
  }
  header["metadata"] = meta;
  json list = json::array();
  for (const auto& t : manifest.tensors) {
    list.push_back({{"name", t.name},
                    {"shape", t.shape},
                    {"dtype", t.dtype},
                    {"offset", t.offset},
                    {"length", t.length}});
  }
  header["tensors"] = list;
  const std::string text = header.dump();
  ByteWriter w;
  w.bytes(kManifestMagic, 8);
  w.u32(kManifestVersion);
  w.u32(checked_u32(text.size(), "manifest header"));
  w.bytes(text.data(), text.size());
  w.bytes(manifest.blob.data(), manifest.blob.size());
  return w.take();
}

WeightManifest read_manifest(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.take(8, "manifest magic");
  if (!std::equal(magic.begin(), magic.end(), kManifestMagic)) {
    throw FormatError(0, "bad manifest magic (expected ECOWMAN1)");
  }
  const std::uint32_t version = r.u32("manifest version");
  if (version != kManifestVersion) {
    throw FormatError(8, "unsupported manifest version " + std::to_string(version));
  }
  const std::uint32_t header_len = r.u32("manifest header length");
  const std::uint64_t header_at = r.offset();
  auto header_bytes = r.take(header_len, "manifest header");
  json header;
  try {
    header = json::parse(header_bytes.begin(), header_bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(header_at, std::string("manifest header is not valid JSON: ") + e.what());
  }
  WeightManifest m;
  try {
    m.format_version = header.at("format_version").get<std::uint32_t>();
    for (const auto& [k, v] : header.at("metadata").items()) {
      if (v.is_number_integer()) {
        m.metadata[k] = v.get<std::int64_t>();
      } else if (v.is_number()) {
        m.metadata[k] = v.get<double>();
      } else if (v.is_string()) {
        m.metadata[k] = v.get<std::string>();
      } else {
        throw SchemaError("metadata '" + k + "' has an unsupported type");
      }
    }
    for (const auto& t : header.at("tensors")) {
      m.tensors.push_back({t.at("name").get<std::string>(),
                           t.at("shape").get<Shape>(),
                           t.at("dtype").get<std::string>(),
                           t.at("offset").get<std::uint64_t>(),
                           t.at("length").get<std::uint64_t>()});
    }
  } catch (const json::exception& e) {
    throw FormatError(header_at, std::string("malformed manifest header: ") + e.what());
  }
  auto blob = r.take(r.remaining(), "manifest blob");
  m.blob.assign(blob.begin(), blob.end());
  try {
    m.validate();
  } catch (const SchemaError& e) {
    throw FormatError(header_at, e.what());
  }
  return m;
}

// --------------------------------------------------------------------------
// Weights, checkpoints, prototypes
// --------------------------------------------------------------------------

WeightManifest weights_to_manifest(const EncoderWeights<float>& weights,
                                   const SpecialTokens& specials) {
  const EncoderConfig& c = weights.config;
  WeightManifest m;
  m.metadata["kind"] = std::string("encoder_weights");
  m.metadata["layers"] = static_cast<std::int64_t>(c.layers);
  m.metadata["heads"] = static_cast<std::int64_t>(c.heads);
  m.metadata["width"] = static_cast<std::int64_t>(c.width);
  m.metadata["output_dim"] = static_cast<std::int64_t>(c.output_dim);
  m.metadata["max_positions"] = static_cast<std::int64_t>(c.max_positions);
  m.metadata["vocab_size"] = static_cast<std::int64_t>(c.vocab_size);
  m.metadata["eps"] = c.eps;
  m.metadata["sot_id"] = static_cast<std::int64_t>(specials.sot);
  m.metadata["eot_id"] = static_cast<std::int64_t>(specials.eot);
  for (const auto& [name, t] : weights.named_tensors()) m.add_tensor(name, *t);
  return m;
}

namespace {

std::size_t positive_meta(const WeightManifest& m, const std::string& key) {
  const std::int64_t v = m.int_metadata(key);
  if (v <= 0) throw SchemaError("metadata '" + key + "' must be positive");
  return static_cast<std::size_t>(v);
}

}  // namespace

EncoderWeights<float> weights_from_manifest(const WeightManifest& m) {
  EncoderConfig c;
  c.layers = positive_meta(m, "layers");
  c.heads = positive_meta(m, "heads");
  c.width = positive_meta(m, "width");
  c.output_dim = positive_meta(m, "output_dim");
  c.max_positions = positive_meta(m, "max_positions");
  c.vocab_size = positive_meta(m, "vocab_size");
  c.eps = m.real_metadata("eps");
  c.validate();

  EncoderWeights<float> w;
  w.config = c;
  w.blocks.resize(c.layers);
  const auto schema = weight_schema(c);
  auto slots = w.named_tensors();
  for (std::size_t i = 0; i < schema.size(); ++i) {
    const auto& [name, shape] = schema[i];
    const ManifestTensor* e = m.find(name);
    if (e == nullptr) throw SchemaError("weights are missing tensor '" + name + "'");
    if (e->shape != shape) {
      throw DimensionError("tensor '" + name + "' has shape " +
                           shape_to_string(e->shape) + ", expected " +
                           shape_to_string(shape));
    }
    *slots[i].second = m.tensor<float>(name);
    if (!slots[i].second->all_finite()) {
      throw SchemaError("tensor '" + name + "' contains non-finite values");
    }
  }
  return w;
}

SpecialTokens specials_from_manifest(const WeightManifest& m) {
  SpecialTokens s;
  s.sot = static_cast<TokenId>(m.int_metadata("sot_id"));
  s.eot = static_cast<TokenId>(m.int_metadata("eot_id"));
  return s;
}

Bytes write_weights(const EncoderWeights<float>& weights,
                    const SpecialTokens& specials) {
  specials.validate(weights.config.vocab_size);
  return write_manifest(weights_to_manifest(weights, specials));
}

LoadedWeights read_weights(std::span<const std::uint8_t> bytes) {
  const WeightManifest m = read_manifest(bytes);
  LoadedWeights out{weights_from_manifest(m), specials_from_manifest(m)};
  out.specials.validate(out.weights.config.vocab_size);
  return out;
}

Bytes save_checkpoint(const PromptEnsemble<float>& ensemble,
                      std::uint64_t encoder_hash, const ClassTokenTable& classes) {
  ensemble.validate();
  WeightManifest m;
  if (classes.size() != 0) {
    json table = json::array();
    for (const auto& c : classes.classes) {
      table.push_back({{"name", c.name}, {"tokens", c.tokens}});
    }
    m.metadata["classes"] = table.dump();
  }
  m.metadata["kind"] = std::string("checkpoint");
  m.metadata["prompts"] = static_cast<std::int64_t>(ensemble.prompts);
  m.metadata["ctx_len"] = static_cast<std::int64_t>(ensemble.ctx_len);
  m.metadata["encoder_hash"] = hash_to_hex(encoder_hash);
  m.metadata["ensemble_hash"] = hash_to_hex(ensemble.hash());
  m.add_tensor("context", ensemble.context);
  return write_manifest(m);
}

LoadedCheckpoint load_checkpoint(std::span<const std::uint8_t> bytes) {
  const WeightManifest m = read_manifest(bytes);
  LoadedCheckpoint out;
  out.ensemble.prompts = positive_meta(m, "prompts");
  out.ensemble.ctx_len = positive_meta(m, "ctx_len");
  out.ensemble.context = m.tensor<float>("context");
  out.ensemble.validate();
  out.encoder_hash = hash_from_hex(m.string_metadata("encoder_hash"));
  if (m.has_metadata("classes")) {
    try {
      ClassTokenTable table;
      for (const auto& c : json::parse(m.string_metadata("classes"))) {
        table.classes.push_back(
            {c.at("name").get<std::string>(), c.at("tokens").get<std::vector<TokenId>>()});
      }
      out.classes = std::move(table);
    } catch (const json::exception& e) {
      throw FormatError(0, std::string("checkpoint class table: ") + e.what());
    }
  }
  return out;
}

std::optional<std::string> checkpoint_compatibility(
    const LoadedCheckpoint& checkpoint, std::uint64_t encoder_hash) {
  if (checkpoint.encoder_hash == encoder_hash) return std::nullopt;
  return "checkpoint was trained against encoder " +
         hash_to_hex(checkpoint.encoder_hash) + " but the loaded weights hash to " +
         hash_to_hex(encoder_hash) + "; accuracy may be meaningless";
}

std::optional<std::string> checkpoint_parity(const LoadedCheckpoint& checkpoint,
                                             std::size_t budget) {
  const std::size_t m = checkpoint.ensemble.prompts * checkpoint.ensemble.ctx_len;
  if (m == budget) return std::nullopt;
  return "checkpoint has D*N = " + std::to_string(m) + " (D=" +
         std::to_string(checkpoint.ensemble.prompts) + ", N=" +
         std::to_string(checkpoint.ensemble.ctx_len) + "), declared budget is " +
         std::to_string(budget);
}

Bytes write_prototypes(const PrototypeBank<float>& bank) {
  WeightManifest m;
  m.metadata["kind"] = std::string("prototypes");
  m.metadata["encoder_hash"] = hash_to_hex(bank.encoder_hash);
  m.metadata["ensemble_hash"] = hash_to_hex(bank.ensemble_hash);
  m.add_tensor("prototypes", bank.prototypes);
  return write_manifest(m);
}

PrototypeBank<float> read_prototypes(std::span<const std::uint8_t> bytes) {
  const WeightManifest m = read_manifest(bytes);
  PrototypeBank<float> bank;
  bank.prototypes = m.tensor<float>("prototypes");
  if (bank.prototypes.rank() != 2) {
    throw SchemaError("prototypes tensor must be rank 2, got " +
                      shape_to_string(bank.prototypes.shape()));
  }
  bank.encoder_hash = hash_from_hex(m.string_metadata("encoder_hash"));
  bank.ensemble_hash = hash_from_hex(m.string_metadata("ensemble_hash"));
  return bank;
}

// --------------------------------------------------------------------------
// Reports
// --------------------------------------------------------------------------

std::string report_to_json(const RunReport& report) {
  json j;
  j["budget"] = report.budget;
  j["datasets"] = report.datasets;
  json grid = json::array();
  for (const auto& c : report.grid) grid.push_back({c.prompts, c.ctx_len});
  j["grid"] = grid;
  j["shots"] = report.shots;
  j["seeds"] = report.seeds;
  json records = json::array();
  for (const auto& r : report.records) {
    records.push_back({{"dataset", r.dataset},
                       {"prompts", r.prompts},
                       {"ctx_len", r.ctx_len},
                       {"shots", r.shots},
                       {"seed", r.seed},
                       {"accuracy", r.accuracy},
                       {"final_loss", r.final_loss},
                       {"epochs", r.epochs},
                       {"wall_seconds", r.wall_seconds},
                       {"encoder_hash_before", hash_to_hex(r.encoder_hash_before)},
                       {"encoder_hash_after", hash_to_hex(r.encoder_hash_after)}});
  }
  j["records"] = records;
  json aggregates = json::array();
  for (const auto& row : report.aggregate()) {
    json a = {{"prompts", row.prompts},
              {"ctx_len", row.ctx_len},
              {"mean_accuracy", row.mean_accuracy}};
    if (!row.delta_vs_coop.empty()) a["delta_vs_coop"] = row.delta_vs_coop;
    aggregates.push_back(a);
  }
  j["aggregates"] = aggregates;
  return j.dump(2) + "\n";
}

RunReport report_from_json(const std::string& text) {
  RunReport report;
  try {
    const json j = json::parse(text);
    report.budget = j.at("budget").get<std::size_t>();
    report.datasets = j.at("datasets").get<std::vector<std::string>>();
    for (const auto& c : j.at("grid")) {
      report.grid.push_back({c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>()});
    }
    report.shots = j.at("shots").get<std::vector<std::size_t>>();
    report.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& r : j.at("records")) {
      RunRecord rec;
      rec.dataset = r.at("dataset").get<std::string>();
      rec.prompts = r.at("prompts").get<std::size_t>();
      rec.ctx_len = r.at("ctx_len").get<std::size_t>();
      rec.shots = r.at("shots").get<std::size_t>();
      rec.seed = r.at("seed").get<std::uint64_t>();
      rec.accuracy = r.at("accuracy").get<double>();
      rec.final_loss = r.at("final_loss").get<double>();
      rec.epochs = r.at("epochs").get<std::size_t>();
      rec.wall_seconds = r.at("wall_seconds").get<double>();
      rec.encoder_hash_before = hash_from_hex(r.at("encoder_hash_before").get<std::string>());
      rec.encoder_hash_after = hash_from_hex(r.at("encoder_hash_after").get<std::string>());
      report.records.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw FormatError(0, std::string("malformed report: ") + e.what());
  }
  return report;
}

namespace {

std::string cell_label(std::size_t D, std::size_t N, std::size_t budget) {
  const std::string dims = "(D=" + std::to_string(D) + ", N=" + std::to_string(N) + ")";
  return (D == 1 && N == budget ? "CoOp " : "ECO ") + dims;
}

std::string percent(double v, bool sign = false) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  if (sign && v >= 0) os << '+';
  os << 100.0 * v;
  return os.str();
}

}  // namespace

std::string report_to_table(const RunReport& report) {
  std::vector<std::pair<std::string, std::vector<std::string>>> lines;
  const auto rows = report.aggregate();
  for (const auto& r : rows) {
    std::vector<std::string> cols;
    for (double a : r.mean_accuracy) cols.push_back(percent(a));
    lines.emplace_back(cell_label(r.prompts, r.ctx_len, report.budget), cols);
  }
  if (auto coop = report.coop_cell()) {
    for (const auto& r : rows) {
      if (r.prompts == coop->prompts && r.ctx_len == coop->ctx_len) continue;
      std::vector<std::string> cols;
      for (double dlt : r.delta_vs_coop) cols.push_back(percent(dlt, true));
      lines.emplace_back("gain over CoOp (D=" + std::to_string(r.prompts) +
                             ", N=" + std::to_string(r.ctx_len) + ")",
                         cols);
    }
  }
  std::size_t label_w = std::string("Method").size();
  for (const auto& l : lines) label_w = std::max(label_w, l.first.size());
  constexpr int kCol = 8;
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(label_w)) << "Method";
  for (std::size_t s : report.shots) os << std::right << std::setw(kCol) << s;
  os << "\n";
  for (const auto& [label, cols] : lines) {
    os << std::left << std::setw(static_cast<int>(label_w)) << label;
    for (const auto& c : cols) os << std::right << std::setw(kCol) << c;
    os << "\n";
  }
  return os.str();
}

std::string report_to_series_csv(const RunReport& report) {
  std::ostringstream os;
  os << "dataset,prompts,ctx_len,shots,mean_accuracy\n";
  os << std::fixed << std::setprecision(6);
  for (const auto& ds : report.datasets) {
    for (const auto& cell : report.grid) {
      for (std::size_t s : report.shots) {
        os << ds << ',' << cell.prompts << ',' << cell.ctx_len << ',' << s << ','
           << report.seed_mean(ds, cell, s) << "\n";
      }
    }
  }
  for (const auto& row : report.aggregate()) {
    for (std::size_t i = 0; i < report.shots.size(); ++i) {
      os << "average," << row.prompts << ',' << row.ctx_len << ','
         << report.shots[i] << ',' << row.mean_accuracy[i] << "\n";
    }
  }
  return os.str();
}

// --------------------------------------------------------------------------
// Synthetic teacher-prompt task
// --------------------------------------------------------------------------

void SynthSpec::validate() const {
  if (classes < 2) throw ConfigError("synthetic task needs at least 2 classes");
  encoder.validate();
  if (teacher_prompts == 0 || teacher_length == 0 || class_tokens == 0 ||
      train_per_class == 0 || test_per_class == 0) {
    throw ConfigError("synthetic counts must all be at least 1");
  }
  if (!(noise >= 0.0) || !std::isfinite(noise)) {
    throw ConfigError("synthetic noise must be finite and nonnegative");
  }
  if (encoder.vocab_size < 3) throw ConfigError("vocabulary too small for specials");
  const std::size_t len = teacher_length + class_tokens + 2;
  if (len > encoder.max_positions) {
    throw ConfigError("teacher sequence length " + std::to_string(len) +
                      " exceeds max positions " + std::to_string(encoder.max_positions));
  }
}

SynthTask generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  const SeededRng root(spec.seed);
  SynthTask task;
  SeededRng weight_rng = root.derive(1);
  task.weights = init_random<float>(spec.encoder, weight_rng, InitScheme::kWidthScaled);
  const auto V = static_cast<TokenId>(spec.encoder.vocab_size);
  task.specials = {V - 2, V - 1};
  const std::uint64_t ordinary = V - 2;

  SeededRng token_rng = root.derive(2);
  std::set<std::vector<TokenId>> used;
  for (std::size_t k = 0; k < spec.classes; ++k) {
    ClassEntry entry;
    entry.name = "class_" + std::to_string(k);
    for (int attempt = 0;; ++attempt) {
      entry.tokens.clear();
      for (std::size_t t = 0; t < spec.class_tokens; ++t) {
        entry.tokens.push_back(static_cast<TokenId>(token_rng.uniform_index(ordinary)));
      }
      if (used.insert(entry.tokens).second) break;
      if (attempt > 1000) throw ConfigError("vocabulary too small for distinct class names");
    }
    task.classes.classes.push_back(std::move(entry));
  }
  std::vector<std::vector<TokenId>> teachers(spec.teacher_prompts);
  for (auto& t : teachers) {
    for (std::size_t j = 0; j < spec.teacher_length; ++j) {
      t.push_back(static_cast<TokenId>(token_rng.uniform_index(ordinary)));
    }
  }
  task.teacher_sequences.resize(spec.classes);
  for (std::size_t k = 0; k < spec.classes; ++k) {
    for (const auto& t : teachers) {
      std::vector<TokenId> seq{task.specials.sot};
      seq.insert(seq.end(), t.begin(), t.end());
      const auto& ct = task.classes.classes[k].tokens;
      seq.insert(seq.end(), ct.begin(), ct.end());
      seq.push_back(task.specials.eot);
      task.teacher_sequences[k].push_back(std::move(seq));
    }
  }
  task.centroids = hand_prompt_features(task.weights, task.teacher_sequences);

  const std::size_t d = spec.encoder.output_dim;
  auto fill = [&](EmbeddingBank& bank, std::size_t per_class, SeededRng rng) {
    bank.dim = d;
    bank.classes = task.classes;
    std::vector<double> v(d);
    std::vector<float> out(d);
    for (std::size_t k = 0; k < spec.classes; ++k) {
      for (std::size_t n = 0; n < per_class; ++n) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          v[j] = static_cast<double>(task.centroids(k, j)) + rng.gaussian(0.0, spec.noise);
          sq += v[j] * v[j];
        }
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<float>(v[j] * inv);
        bank.add(static_cast<std::uint32_t>(k), out);
      }
    }
  };
  fill(task.train, spec.train_per_class, root.derive(3));
  fill(task.test, spec.test_per_class, root.derive(4));
  return task;
}

std::string teacher_record_to_json(const SynthTask& task, const SynthSpec& spec) {
  json j;
  j["seed"] = spec.seed;
  j["noise"] = spec.noise;
  j["sot_id"] = task.specials.sot;
  j["eot_id"] = task.specials.eot;
  json classes = json::array();
  for (std::size_t k = 0; k < task.classes.size(); ++k) {
    classes.push_back({{"name", task.classes.classes[k].name},
                       {"tokens", task.classes.classes[k].tokens},
                       {"teacher_sequences", task.teacher_sequences[k]}});
  }
  j["classes"] = classes;
  return j.dump(2) + "\n";
}

std::vector<std::vector<std::vector<TokenId>>> teacher_sequences_from_json(
    const std::string& text) {
  std::vector<std::vector<std::vector<TokenId>>> out;
  try {
    const json j = json::parse(text);
    for (const auto& c : j.at("classes")) {
      out.push_back(c.at("teacher_sequences").get<std::vector<std::vector<TokenId>>>());
    }
  } catch (const json::exception& e) {
    throw FormatError(0, std::string("malformed teacher record: ") + e.what());
  }
  return out;
}

// --------------------------------------------------------------------------
// Files
// --------------------------------------------------------------------------

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("failed writing '" + path.string() + "'");
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span<const std::uint8_t>(
                       reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text_file(const std::filesystem::path& path) {
  const Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

std::uint64_t hash_bytes(std::span<const std::uint8_t> bytes) {
  Hasher h;
  h.update(bytes.data(), bytes.size());
  return h.digest();
}

}  // namespace eco
