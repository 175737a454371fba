#include "eco/cli.hpp"

#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "eco/classifier.hpp"
#include "eco/datasets_io.hpp"
#include "eco/gradcheck.hpp"
#include "eco/prompt_ensemble.hpp"
#include "eco/trainer.hpp"

namespace eco {

namespace {

namespace fs = std::filesystem;

// Raised for flag combinations CLI11 cannot express; maps to exit 1.
class UsageError : public Error {
 public:
  using Error::Error;
};

std::string percent2(double accuracy) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * accuracy;
  return os.str();
}

void log_written(std::ostream& out, const fs::path& path,
                 std::span<const std::uint8_t> bytes) {
  out << "wrote " << path.string() << " (" << bytes.size() << " bytes, hash "
      << hash_to_hex(hash_bytes(bytes)) << ")\n";
}

LoadedWeights load_weights(const std::string& path) {
  return read_weights(read_file(path));
}

EmbeddingBank load_bank(const std::string& path, const EncoderConfig& config) {
  EmbeddingBank bank = read_bank(read_file(path));
  bank.validate();
  bank.classes.validate(config.vocab_size);
  if (bank.dim != config.output_dim) {
    throw ConfigError("bank '" + path + "' has dim " + std::to_string(bank.dim) +
                      " but the encoder outputs " + std::to_string(config.output_dim));
  }
  return bank;
}

struct GenSynthFlags {
  std::size_t classes = 5;
  std::string dim_config = "toy";
  double noise = 0.3;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 100;
  std::uint64_t seed = 1;
  std::size_t teacher_prompts = 2;
  std::size_t teacher_length = 4;
  std::size_t class_tokens = 2;
  std::string out_dir;
};

int cmd_gen_synth(const GenSynthFlags& f, std::ostream& out) {
  SynthSpec spec;
  spec.classes = f.classes;
  spec.encoder = parse_dim_config(f.dim_config);
  spec.noise = f.noise;
  spec.train_per_class = f.train_per_class;
  spec.test_per_class = f.test_per_class;
  spec.seed = f.seed;
  spec.teacher_prompts = f.teacher_prompts;
  spec.teacher_length = f.teacher_length;
  spec.class_tokens = f.class_tokens;
  spec.validate();

  std::error_code ec;
  fs::create_directories(f.out_dir, ec);
  if (ec || !fs::is_directory(f.out_dir)) {
    throw ConfigError("cannot create output directory '" + f.out_dir + "'");
  }
  const SynthTask task = generate_synthetic(spec);
  const fs::path dir(f.out_dir);
  const Bytes train = write_bank(task.train);
  const Bytes test = write_bank(task.test);
  const Bytes weights = write_weights(task.weights, task.specials);
  const std::string teacher = teacher_record_to_json(task, spec);
  const std::span<const std::uint8_t> teacher_bytes(
      reinterpret_cast<const std::uint8_t*>(teacher.data()), teacher.size());
  write_file(dir / "train.bank", train);
  log_written(out, dir / "train.bank", train);
  write_file(dir / "test.bank", test);
  log_written(out, dir / "test.bank", test);
  write_file(dir / "weights.ecow", weights);
  log_written(out, dir / "weights.ecow", weights);
  write_file(dir / "teacher.json", teacher_bytes);
  log_written(out, dir / "teacher.json", teacher_bytes);
  out << "encoder hash " << hash_to_hex(task.weights.hash()) << "\n";
  return kExitOk;
}

struct TrainFlags {
  std::string weights;
  std::string train_bank;
  std::size_t shots = 16;
  std::size_t prompts = 4;
  std::size_t ctx_len = 4;
  std::uint64_t seed = 1;
  std::size_t epochs = 50;
  double lr = 0.002;
  std::size_t batch_size = 0;
  double temperature = kDefaultTemperature;
  std::optional<std::size_t> budget;
  std::string out;
  std::string loss_log;
};

int cmd_train(const TrainFlags& f, std::size_t threads, std::ostream& out,
              std::ostream& err) {
  if (f.budget && f.prompts * f.ctx_len != *f.budget) {
    check_parity({{f.prompts, f.ctx_len}}, *f.budget);
  }
  const LoadedWeights lw = load_weights(f.weights);
  const EmbeddingBank bank = load_bank(f.train_bank, lw.weights.config);
  if (!is_protocol_shot_count(f.shots)) {
    err << "warning: " << f.shots
        << " shots is outside the 1/2/4/8/16 protocol set\n";
  }
  TrainConfig cfg;
  cfg.shots = f.shots;
  cfg.epochs = f.epochs;
  cfg.lr = f.lr;
  cfg.seed = f.seed;
  cfg.batch_size = f.batch_size;
  cfg.temperature = f.temperature;
  cfg.threads = threads;
  cfg.validate();

  const std::uint64_t hash_before = lw.weights.hash();
  SeededRng split_rng = stream_rng(f.seed, SeedStream::kFewShot);
  const FewShotSplit split = sample_few_shot(bank, f.shots, split_rng);
  SeededRng init_rng = stream_rng(f.seed, SeedStream::kContextInit);
  auto ensemble = init_context<float>(f.prompts, f.ctx_len, lw.weights.config.width,
                                      cfg.init_std, init_rng);
  const auto result = train(lw.weights, std::move(ensemble), bank.classes,
                            lw.specials, split, bank, cfg);
  if (lw.weights.hash() != hash_before) {
    throw ContractError("encoder weights changed during training");
  }

  const Bytes ckpt = save_checkpoint(result.ensemble, hash_before, bank.classes);
  write_file(f.out, ckpt);
  log_written(out, f.out, ckpt);
  const std::string log_path = f.loss_log.empty() ? f.out + ".loss.csv" : f.loss_log;
  std::ostringstream log;
  log << "epoch,lr,mean_loss\n" << std::setprecision(9);
  for (std::size_t e = 0; e < result.loss_history.size(); ++e) {
    log << e + 1 << ',' << cfg.learning_rate(e) << ',' << result.loss_history[e] << "\n";
  }
  write_text_file(log_path, log.str());
  out << "wrote " << log_path << "\n";
  out << (f.prompts == 1 ? "CoOp" : "ECO") << " D=" << f.prompts << " N=" << f.ctx_len
      << " shots=" << f.shots << " seed=" << f.seed << " epochs=" << f.epochs
      << " final loss " << std::setprecision(6) << result.loss_history.back() << "\n";
  out << "encoder hash " << hash_to_hex(hash_before) << " (unchanged)\n";
  return kExitOk;
}

struct EvalFlags {
  std::string weights;
  std::string checkpoint;
  std::string prototypes;
  std::string test_bank;
  std::string report_out;
};

int cmd_eval(const EvalFlags& f, std::size_t threads, std::ostream& out,
             std::ostream& err) {
  if (f.checkpoint.empty() == f.prototypes.empty()) {
    throw UsageError("eval needs exactly one of --checkpoint or --prototypes");
  }
  std::optional<LoadedWeights> lw;
  if (!f.weights.empty()) lw = load_weights(f.weights);
  if (!f.checkpoint.empty() && !lw) {
    throw UsageError("--checkpoint evaluation needs --weights");
  }

  PrototypeBank<float> protos;
  std::string source;
  if (!f.checkpoint.empty()) {
    const LoadedCheckpoint ckpt = load_checkpoint(read_file(f.checkpoint));
    if (auto warn = checkpoint_compatibility(ckpt, lw->weights.hash())) {
      err << "warning: " << *warn << "\n";
    }
    source = f.checkpoint;
    const EmbeddingBank test = load_bank(f.test_bank, lw->weights.config);
    EnsembleOptions opts;
    opts.threads = threads;
    protos = precompute_prototypes(lw->weights, ckpt.ensemble, test.classes,
                                   lw->specials, opts);
  } else {
    protos = read_prototypes(read_file(f.prototypes));
    source = f.prototypes;
    if (lw && lw->weights.hash() != protos.encoder_hash) {
      err << "warning: prototypes were computed with encoder "
          << hash_to_hex(protos.encoder_hash) << ", loaded weights hash to "
          << hash_to_hex(lw->weights.hash()) << "\n";
    }
  }
  EmbeddingBank test = read_bank(read_file(f.test_bank));
  test.validate();
  if (test.num_classes() != protos.classes() || test.dim != protos.dim()) {
    throw ConfigError("test bank has K=" + std::to_string(test.num_classes()) +
                      ", d=" + std::to_string(test.dim) + " but the model has K=" +
                      std::to_string(protos.classes()) + ", d=" +
                      std::to_string(protos.dim()));
  }
  const double acc = accuracy(protos.prototypes, test);
  out << "top-1 accuracy: " << percent2(acc) << "%\n";
  if (!f.report_out.empty()) {
    nlohmann::json rec = {{"source", source},
                          {"test_bank", f.test_bank},
                          {"records", test.records()},
                          {"accuracy", acc},
                          {"accuracy_percent", percent2(acc)},
                          {"encoder_hash", hash_to_hex(protos.encoder_hash)},
                          {"ensemble_hash", hash_to_hex(protos.ensemble_hash)}};
    write_text_file(f.report_out, rec.dump(2) + "\n");
  }
  return kExitOk;
}

struct SweepFlags {
  std::string weights;
  std::vector<std::string> train_banks;
  std::vector<std::string> test_banks;
  std::vector<std::string> names;
  std::string grid = "16x1,8x2,4x4,2x8,1x16";
  std::string shots = "1,2,4,8,16";
  std::string seeds = "1,2,3";
  std::size_t budget = 16;
  std::size_t epochs = 50;
  double lr = 0.002;
  std::string out_report;
};

int cmd_sweep(const SweepFlags& f, std::size_t threads, std::ostream& out) {
  const auto grid = parse_grid(f.grid);
  const auto shots = parse_count_list(f.shots, "shots");
  const auto seeds = parse_seed_list(f.seeds);
  check_parity(grid, f.budget);
  if (f.train_banks.empty() || f.train_banks.size() != f.test_banks.size()) {
    throw UsageError("sweep needs matching --train-bank/--test-bank pairs");
  }
  if (!f.names.empty() && f.names.size() != f.train_banks.size()) {
    throw UsageError("--name must be given once per dataset or not at all");
  }
  const LoadedWeights lw = load_weights(f.weights);
  std::vector<Dataset> datasets;
  for (std::size_t i = 0; i < f.train_banks.size(); ++i) {
    Dataset ds;
    ds.name = f.names.empty() ? "dataset" + std::to_string(i) : f.names[i];
    ds.train = load_bank(f.train_banks[i], lw.weights.config);
    ds.test = load_bank(f.test_banks[i], lw.weights.config);
    if (!(ds.train.classes == ds.test.classes)) {
      throw ConfigError("train and test banks of '" + ds.name +
                        "' have different class tables");
    }
    datasets.push_back(std::move(ds));
  }
  SweepOptions opts;
  opts.budget = f.budget;
  opts.train.epochs = f.epochs;
  opts.train.lr = f.lr;
  opts.threads = threads;
  const RunReport report = sweep(lw.weights, lw.specials, datasets, grid, shots, seeds, opts);
  for (const auto& r : report.records) {
    if (r.encoder_hash_before != r.encoder_hash_after) {
      throw ContractError("encoder weights changed during a sweep run");
    }
  }
  out << report.records.size() << " training runs recorded\n";
  const std::string table = report_to_table(report);
  out << table;
  if (!f.out_report.empty()) {
    write_text_file(f.out_report, report_to_json(report));
    write_text_file(f.out_report + ".table.txt", table);
    write_text_file(f.out_report + ".series.csv", report_to_series_csv(report));
    out << "wrote " << f.out_report << " (+ .table.txt, .series.csv)\n";
  }
  return kExitOk;
}

struct GradcheckFlags {
  std::string dim_config = "toy";
  std::vector<std::uint64_t> seeds{1};
  double tolerance = 1e-4;
};

int cmd_gradcheck(const GradcheckFlags& f, std::ostream& out) {
  const EncoderConfig config = parse_dim_config(f.dim_config);
  if (!(f.tolerance > 0.0)) throw ConfigError("--tolerance must be positive");
  double worst = 0.0;
  for (std::uint64_t seed : f.seeds) {
    for (const auto& r : run_gradcheck(config, seed)) {
      worst = std::max(worst, r.max_relative_error);
      out << "seed " << seed << " " << std::left << std::setw(9) << r.path
          << std::right << " coords " << std::setw(5) << r.coordinates
          << "  max rel err " << std::scientific << std::setprecision(3)
          << r.max_relative_error << std::defaultfloat << "  "
          << (r.max_relative_error <= f.tolerance ? "ok" : "FAIL") << "\n";
    }
  }
  const bool pass = worst <= f.tolerance;
  out << (pass ? "PASS" : "FAIL") << ": max relative error " << std::scientific
      << std::setprecision(3) << worst << " vs tolerance " << f.tolerance
      << std::defaultfloat << "\n";
  return pass ? kExitOk : kExitUser;
}

struct ExportFlags {
  std::string weights;
  std::string checkpoint;
  std::string test_bank;
  std::string out;
};

int cmd_export_prototypes(const ExportFlags& f, std::size_t threads,
                          std::ostream& out, std::ostream& err) {
  const LoadedWeights lw = load_weights(f.weights);
  const LoadedCheckpoint ckpt = load_checkpoint(read_file(f.checkpoint));
  if (auto warn = checkpoint_compatibility(ckpt, lw.weights.hash())) {
    err << "warning: " << *warn << "\n";
  }
  ClassTokenTable classes;
  if (!f.test_bank.empty()) {
    classes = load_bank(f.test_bank, lw.weights.config).classes;
  } else if (ckpt.classes) {
    classes = *ckpt.classes;
  } else {
    throw UsageError("checkpoint carries no class table; pass --bank");
  }
  classes.validate(lw.weights.config.vocab_size);
  EnsembleOptions opts;
  opts.threads = threads;
  const auto protos =
      precompute_prototypes(lw.weights, ckpt.ensemble, classes, lw.specials, opts);
  const Bytes bytes = write_prototypes(protos);
  write_file(f.out, bytes);
  log_written(out, f.out, bytes);
  out << "encoder hash " << hash_to_hex(protos.encoder_hash) << ", ensemble hash "
      << hash_to_hex(protos.ensemble_hash) << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
  CLI::App app{"Prompt-ensemble context optimization for a frozen text encoder"};
  app.require_subcommand(1);
  std::optional<std::size_t> threads_flag;
  app.add_option("--threads", threads_flag,
                 "Worker threads (default: ECO_THREADS or 1; 1 is bit-deterministic)")
      ->check(CLI::PositiveNumber);

  GenSynthFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-synth", "Generate a teacher-prompt synthetic task");
  gen_cmd->add_option("--classes", gen.classes, "Number of classes K (>= 2)")
      ->capture_default_str();
  gen_cmd->add_option("--dim-config", gen.dim_config,
                      "Encoder dims: 'toy' or key=value list (layers,heads,width,out,vocab,positions)")
      ->capture_default_str();
  gen_cmd->add_option("--noise", gen.noise, "Feature noise std sigma")->capture_default_str();
  gen_cmd->add_option("--train-per-class", gen.train_per_class, "Train examples per class")
      ->capture_default_str();
  gen_cmd->add_option("--test-per-class", gen.test_per_class, "Test examples per class")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--teacher-prompts", gen.teacher_prompts, "Hidden teacher prompts")
      ->capture_default_str();
  gen_cmd->add_option("--teacher-length", gen.teacher_length, "Tokens per teacher prompt")
      ->capture_default_str();
  gen_cmd->add_option("--class-tokens", gen.class_tokens, "Tokens per class name")
      ->capture_default_str();
  gen_cmd->add_option("--out-dir", gen.out_dir, "Output directory")->required();

  TrainFlags tr;
  auto* train_cmd = app.add_subcommand("train", "Learn a prompt ensemble on a few-shot split");
  train_cmd->add_option("--weights", tr.weights, "Encoder weight file")->required();
  train_cmd->add_option("--train-bank", tr.train_bank, "Training embedding bank")->required();
  train_cmd->add_option("--shots", tr.shots, "Examples per class (1,2,4,8,16)")
      ->capture_default_str();
  train_cmd->add_option("--d-prompts", tr.prompts, "Number of prompts D")
      ->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--n-ctx", tr.ctx_len, "Context tokens per prompt N")
      ->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->add_option("--seed", tr.seed, "Run seed")->capture_default_str();
  train_cmd->add_option("--epochs", tr.epochs, "Training epochs")->capture_default_str();
  train_cmd->add_option("--lr", tr.lr, "Peak learning rate")->capture_default_str();
  train_cmd->add_option("--batch-size", tr.batch_size, "Batch size (0: min(32, K*shots))")
      ->capture_default_str();
  train_cmd->add_option("--temperature", tr.temperature, "Softmax temperature")
      ->capture_default_str();
  train_cmd->add_option("--budget", tr.budget, "Declared context budget M; requires D*N == M");
  train_cmd->add_option("--out", tr.out, "Checkpoint output path")->required();
  train_cmd->add_option("--loss-log", tr.loss_log, "Loss log path (default: <out>.loss.csv)");

  EvalFlags ev;
  auto* eval_cmd = app.add_subcommand("eval", "Top-1 accuracy on a test bank");
  eval_cmd->add_option("--weights", ev.weights, "Encoder weight file");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Trained checkpoint");
  eval_cmd->add_option("--prototypes", ev.prototypes, "Exported prototype bank");
  eval_cmd->add_option("--test-bank", ev.test_bank, "Test embedding bank")->required();
  eval_cmd->add_option("--report-out", ev.report_out, "Write a JSON result record here");

  SweepFlags sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "Train and evaluate a (D, N) grid over shots and seeds");
  sweep_cmd->add_option("--weights", sw.weights, "Encoder weight file")->required();
  sweep_cmd->add_option("--train-bank", sw.train_banks, "Training bank (repeat per dataset)")
      ->required();
  sweep_cmd->add_option("--test-bank", sw.test_banks, "Test bank (repeat per dataset)")
      ->required();
  sweep_cmd->add_option("--name", sw.names, "Dataset name (repeat per dataset)");
  sweep_cmd->add_option("--grid", sw.grid, "Comma list of DxN cells")->capture_default_str();
  sweep_cmd->add_option("--shots", sw.shots, "Comma list of shot counts")->capture_default_str();
  sweep_cmd->add_option("--seeds", sw.seeds, "Comma list of seeds")->capture_default_str();
  sweep_cmd->add_option("--budget", sw.budget, "Context budget M = D*N")->capture_default_str();
  sweep_cmd->add_option("--epochs", sw.epochs, "Training epochs per run")->capture_default_str();
  sweep_cmd->add_option("--lr", sw.lr, "Peak learning rate")->capture_default_str();
  sweep_cmd->add_option("--out-report", sw.out_report,
                        "Report path (JSON; also writes .table.txt and .series.csv)");

  GradcheckFlags gc;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Analytic vs finite-difference gradients");
  grad_cmd->add_option("--dim-config", gc.dim_config, "Encoder dims (see gen-synth)")
      ->capture_default_str();
  grad_cmd->add_option("--seed", gc.seeds, "Seeds to check (repeat or comma list)")
      ->delimiter(',')
      ->capture_default_str();
  grad_cmd->add_option("--tolerance", gc.tolerance, "Maximum relative error")
      ->capture_default_str();

  ExportFlags ex;
  auto* export_cmd =
      app.add_subcommand("export-prototypes", "Precompute averaged class prototypes");
  export_cmd->add_option("--weights", ex.weights, "Encoder weight file")->required();
  export_cmd->add_option("--checkpoint", ex.checkpoint, "Trained checkpoint")->required();
  export_cmd->add_option("--bank", ex.test_bank,
                         "Bank whose class table to use (default: the checkpoint's)");
  export_cmd->add_option("--out", ex.out, "Prototype file output path")->required();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    err << (sub != nullptr ? sub->help() : app.help());
    return kExitUser;
  }

  const std::size_t threads = threads_flag ? *threads_flag : default_thread_count();
  try {
    if (*gen_cmd) return cmd_gen_synth(gen, out);
    if (*train_cmd) return cmd_train(tr, threads, out, err);
    if (*eval_cmd) return cmd_eval(ev, threads, out, err);
    if (*sweep_cmd) return cmd_sweep(sw, threads, out);
    if (*grad_cmd) return cmd_gradcheck(gc, out);
    if (*export_cmd) return cmd_export_prototypes(ex, threads, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const ParityError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const ProtocolError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}

}  // namespace eco
