#include <regex>
#include <sstream>

#include "doctest.h"
#include "eco/cli.hpp"
#include "eco/datasets_io.hpp"
#include "support.hpp"

using namespace eco;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "eco");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// One small generated task shared by the CLI tests.
struct Workspace {
  testing::TempDir dir{"cli"};
  std::string weights, train, test;
  Workspace() {
    const auto r = run({"gen-synth", "--out-dir", dir.path.string(), "--train-per-class", "20",
                        "--test-per-class", "40"});
    REQUIRE(r.code == 0);
    weights = dir.file("weights.ecow");
    train = dir.file("train.bank");
    test = dir.file("test.bank");
  }
};

std::string printed_accuracy(const std::string& out) {
  std::smatch m;
  REQUIRE(std::regex_search(out, m, std::regex("top-1 accuracy: ([0-9]+\\.[0-9]{2})%")));
  return m[1];
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("help lists every flag of every subcommand") {
  const std::map<std::string, std::vector<std::string>> flags{
      {"gen-synth", {"--classes", "--dim-config", "--noise", "--train-per-class",
                     "--test-per-class", "--seed", "--out-dir"}},
      {"train", {"--weights", "--train-bank", "--shots", "--d-prompts", "--n-ctx", "--seed",
                 "--epochs", "--lr", "--out", "--budget"}},
      {"eval", {"--weights", "--checkpoint", "--prototypes", "--test-bank"}},
      {"sweep", {"--grid", "--shots", "--seeds", "--out-report", "--budget"}},
      {"gradcheck", {"--dim-config", "--seed", "--tolerance"}},
      {"export-prototypes", {"--weights", "--checkpoint", "--out"}},
  };
  for (const auto& [cmd, list] : flags) {
    const auto r = run({cmd, "--help"});
    CAPTURE(cmd);
    CHECK(r.code == 0);
    for (const auto& f : list) CHECK(r.out.find(f) != std::string::npos);
  }
  const auto top = run({"--help"});
  CHECK(top.code == 0);
  CHECK(top.out.find("export-prototypes") != std::string::npos);
  CHECK(top.out.find("--threads") != std::string::npos);
}

TEST_CASE("usage errors exit 1 with usage text") {
  const auto unknown = run({"gradcheck", "--bogus", "1"});
  CHECK(unknown.code == 1);
  CHECK(unknown.err.find("--bogus") != std::string::npos);
  CHECK(unknown.err.find("Usage") != std::string::npos);
  CHECK(run({}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
}

TEST_CASE("gen-synth determinism and validation") {
  testing::TempDir a("gen_a"), b("gen_b");
  const auto ra = run({"gen-synth", "--out-dir", a.path.string()});
  const auto rb = run({"gen-synth", "--out-dir", b.path.string()});
  REQUIRE(ra.code == 0);
  REQUIRE(rb.code == 0);
  for (const char* f : {"train.bank", "test.bank", "weights.ecow", "teacher.json"}) {
    CAPTURE(f);
    CHECK(std::filesystem::exists(a.path / f));
    CHECK(read_file(a.path / f) == read_file(b.path / f));
  }
  // Logged hashes are the same too (paths differ).
  std::regex hash_re("hash ([0-9a-f]{16})");
  std::vector<std::string> ha, hb;
  for (std::sregex_iterator it(ra.out.begin(), ra.out.end(), hash_re), end; it != end; ++it) ha.push_back((*it)[1]);
  for (std::sregex_iterator it(rb.out.begin(), rb.out.end(), hash_re), end; it != end; ++it) hb.push_back((*it)[1]);
  CHECK(ha.size() == 5);
  CHECK(ha == hb);

  testing::TempDir c("gen_c");
  CHECK(run({"gen-synth", "--classes", "1", "--out-dir", c.path.string()}).code == 1);
  CHECK(run({"gen-synth", "--dim-config", "width=7", "--out-dir", c.path.string()}).code == 1);
  const std::string blocked = c.file("plain_file");
  write_text_file(blocked, "x");
  CHECK(run({"gen-synth", "--out-dir", blocked + "/sub"}).code == 1);
}

TEST_CASE("train, eval and export agree") {
  Workspace ws;
  const std::string ck = ws.dir.file("ck.ecow"), protos = ws.dir.file("p.ecow");
  auto tr = run({"train", "--weights", ws.weights, "--train-bank", ws.train, "--shots", "16",
                 "--d-prompts", "4", "--n-ctx", "4", "--out", ck});
  REQUIRE(tr.code == 0);
  CHECK(std::filesystem::exists(ck + ".loss.csv"));
  const auto log = read_text_file(ck + ".loss.csv");
  CHECK(std::count(log.begin(), log.end(), '\n') == 51);

  const auto ev = run({"eval", "--weights", ws.weights, "--checkpoint", ck, "--test-bank", ws.test,
                       "--report-out", ws.dir.file("eval.json")});
  REQUIRE(ev.code == 0);
  CHECK(std::stod(printed_accuracy(ev.out)) >= 95.0);
  CHECK(std::filesystem::exists(ws.dir.file("eval.json")));

  const auto ex = run({"export-prototypes", "--weights", ws.weights, "--checkpoint", ck, "--out", protos});
  REQUIRE(ex.code == 0);
  const auto pv = run({"eval", "--prototypes", protos, "--test-bank", ws.test});
  REQUIRE(pv.code == 0);
  CHECK(printed_accuracy(pv.out) == printed_accuracy(ev.out));

  const auto first = read_file(protos);
  REQUIRE(run({"export-prototypes", "--weights", ws.weights, "--checkpoint", ck, "--out", protos}).code == 0);
  CHECK(read_file(protos) == first);

  Bytes corrupt = read_file(ck);
  corrupt.resize(corrupt.size() / 2);
  write_file(ws.dir.file("bad.ecow"), corrupt);
  const auto bad = run({"export-prototypes", "--weights", ws.weights, "--checkpoint",
                        ws.dir.file("bad.ecow"), "--out", ws.dir.file("x.ecow")});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("at byte") != std::string::npos);
}

TEST_CASE("train with lr 0 writes the initialization; parity is enforced with a budget") {
  Workspace ws;
  const std::string ck = ws.dir.file("zero.ecow");
  REQUIRE(run({"train", "--weights", ws.weights, "--train-bank", ws.train, "--shots", "2",
               "--d-prompts", "1", "--n-ctx", "16", "--epochs", "2", "--lr", "0", "--seed", "7",
               "--out", ck})
              .code == 0);
  SeededRng init_rng = stream_rng(7, SeedStream::kContextInit);
  const auto init = init_context<float>(1, 16, 64, 0.02, init_rng);
  CHECK(load_checkpoint(read_file(ck)).ensemble.context == init.context);

  const auto viol = run({"train", "--weights", ws.weights, "--train-bank", ws.train, "--d-prompts",
                         "3", "--n-ctx", "5", "--budget", "16", "--out", ck});
  CHECK(viol.code == 1);
  CHECK(viol.err.find("16") != std::string::npos);
  CHECK(run({"train", "--weights", ws.weights, "--train-bank", ws.train, "--shots", "1",
             "--d-prompts", "2", "--n-ctx", "8", "--budget", "16", "--epochs", "1", "--out", ck})
            .code == 0);
  CHECK(run({"train", "--weights", ws.weights, "--train-bank", ws.train, "--shots", "21",
             "--epochs", "1", "--out", ck})
            .code == 1);
}

TEST_CASE("eval source flags and missing files") {
  Workspace ws;
  CHECK(run({"eval", "--weights", ws.weights, "--test-bank", ws.test}).code == 1);
  CHECK(run({"eval", "--weights", ws.weights, "--checkpoint", "a", "--prototypes", "b",
             "--test-bank", ws.test})
            .code == 1);
  const auto missing = run({"eval", "--weights", ws.weights, "--checkpoint",
                            ws.dir.file("nope.ecow"), "--test-bank", ws.test});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("nope.ecow") != std::string::npos);
}

TEST_CASE("sweep counting, reports and token errors") {
  Workspace ws;
  const std::string report = ws.dir.file("report.json");
  const auto r = run({"sweep", "--weights", ws.weights, "--train-bank", ws.train, "--test-bank",
                      ws.test, "--epochs", "1", "--out-report", report});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("75 training runs") != std::string::npos);
  const auto rep = report_from_json(read_text_file(report));
  CHECK(rep.records.size() == 75);
  for (const auto& rec : rep.records) CHECK(rec.encoder_hash_before == rec.encoder_hash_after);
  CHECK(std::filesystem::exists(report + ".table.txt"));
  CHECK(std::filesystem::exists(report + ".series.csv"));

  const auto single = run({"sweep", "--weights", ws.weights, "--train-bank", ws.train,
                           "--test-bank", ws.test, "--epochs", "1", "--grid", "4x4", "--shots",
                           "2", "--seeds", "1", "--out-report", report});
  REQUIRE(single.code == 0);
  const auto one = report_from_json(read_text_file(report));
  REQUIRE(one.records.size() == 1);
  CHECK(one.aggregate()[0].mean_accuracy[0] == one.records[0].accuracy);

  const auto bad = run({"sweep", "--weights", ws.weights, "--train-bank", ws.train, "--test-bank",
                        ws.test, "--grid", "16x1,4by4"});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("4by4") != std::string::npos);
  const auto parity = run({"sweep", "--weights", ws.weights, "--train-bank", ws.train,
                           "--test-bank", ws.test, "--grid", "3x5"});
  CHECK(parity.code == 1);
  CHECK(run({"sweep", "--weights", ws.weights, "--train-bank", ws.train, "--test-bank", ws.test,
             "--seeds", "1,x"})
            .code == 1);
}

TEST_CASE("gradcheck pass, fail and per-seed reporting") {
  const auto pass = run({"gradcheck", "--seed", "1"});
  CHECK(pass.code == 0);
  CHECK(pass.out.find("PASS") != std::string::npos);
  const auto fail = run({"gradcheck", "--seed", "1", "--tolerance", "1e-12"});
  CHECK(fail.code == 1);
  CHECK(std::regex_search(fail.out, std::regex("FAIL: max relative error [0-9.]+e-[0-9]+")));
  const auto two = run({"gradcheck", "--seed", "1,2", "--dim-config", "layers=1,width=32,out=16"});
  CHECK(two.code == 0);
  CHECK(two.out.find("seed 1 encoder") != std::string::npos);
  CHECK(two.out.find("seed 2 encoder") != std::string::npos);
}

}  // TEST_SUITE
