#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "satm/cli.hpp"
#include "satm/io.hpp"
#include "satm/trajectory.hpp"

using namespace satm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("satm_cli_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int cli(std::initializer_list<std::string> args) { return run_cli(std::vector<std::string>(args)); }

uint64_t fhash(const fs::path& p) { return io::hash_file(p); }

json read_json(const fs::path& p) { return json::parse(io::read_file(p)); }

// A small end-to-end workspace shared by the pipeline tests.
struct Pipeline {
  fs::path dir;
  explicit Pipeline(const std::string& tag) : dir(fresh_dir(tag)) {
    REQUIRE(cli({"gen-data", "--out", dir.string(), "--seed", "5", "--n-train", "80",
                 "--n-test", "80"}) == 0);
    REQUIRE(cli({"train-experts", "--data", (dir / "train.satmrd").string(), "--out", dir.string(),
                 "--seed", "5", "--count", "2", "--epochs", "6"}) == 0);
  }
};

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(cli({}) == kExitConfig);
  CHECK(cli({"no-such-command"}) == kExitConfig);
  CHECK(cli({"train-experts"}) == kExitConfig);                    // missing required --data
  CHECK(cli({"bench", "--mode", "bogus"}) == kExitConfig);         // bad enum value
  const fs::path dir = fresh_dir("usage");
  CHECK(cli({"train-experts", "--data", (dir / "train.satmrd").string(), "--out", dir.string(),
             "--epochs", "0"}) == kExitConfig);  // epochs validated before any file access
  CHECK(cli({"gen-data", "--kind", "idx", "--out", dir.string()}) == kExitConfig);
}

TEST_CASE("divergent expert training exits with code 4") {
  const fs::path dir = fresh_dir("exit4");
  REQUIRE(cli({"gen-data", "--out", dir.string(), "--seed", "1", "--n-train", "50", "--n-test",
               "50"}) == 0);
  CHECK(cli({"train-experts", "--data", (dir / "train.satmrd").string(), "--out", dir.string(),
             "--count", "1", "--step-size", "1000"}) == kExitNumeric);
}

TEST_CASE("SATM_OUTPUT_DIR provides the default output root") {
  const fs::path dir = fresh_dir("envdir");
  setenv("SATM_OUTPUT_DIR", dir.string().c_str(), 1);
  CHECK(cli({"gen-data", "--seed", "2", "--n-train", "20", "--n-test", "20"}) == 0);
  unsetenv("SATM_OUTPUT_DIR");
  CHECK(fs::exists(dir / "train.satmrd"));
}

TEST_CASE("missing and corrupted input files exit with code 3") {
  const fs::path dir = fresh_dir("io");
  CHECK(cli({"eval", "--synthetic", (dir / "nope.satmds").string(), "--test",
             (dir / "nope.satmrd").string(), "--out", dir.string()}) == kExitIo);

  REQUIRE(cli({"gen-data", "--out", dir.string(), "--seed", "1", "--n-train", "30", "--n-test",
               "30"}) == 0);
  std::string bytes = io::read_file(dir / "train.satmrd");
  bytes[4] ^= 0x10;
  io::write_file(dir / "train.satmrd", bytes);
  CHECK(cli({"train-experts", "--data", (dir / "train.satmrd").string(), "--out", dir.string()}) ==
        kExitIo);
}

TEST_CASE("gen-data is deterministic across output directories") {
  const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
  REQUIRE(cli({"gen-data", "--out", a.string(), "--seed", "9"}) == 0);
  REQUIRE(cli({"gen-data", "--out", b.string(), "--seed", "9"}) == 0);
  CHECK(fhash(a / "train.satmrd") == fhash(b / "train.satmrd"));
  CHECK(fhash(a / "test.satmrd") == fhash(b / "test.satmrd"));
  CHECK(fhash(a / "manifest-gen-data.json") == fhash(b / "manifest-gen-data.json"));

  const fs::path c = fresh_dir("det_c");
  REQUIRE(cli({"gen-data", "--out", c.string(), "--seed", "10"}) == 0);
  CHECK(fhash(a / "train.satmrd") != fhash(c / "train.satmrd"));
}

TEST_CASE("expert sidecars record an improved final loss and training is rerun-stable") {
  Pipeline p("experts");
  const json sidecar = read_json(p.dir / "expert_000.satmtrj.json");
  CHECK(sidecar["loss_final"].get<double>() < sidecar["loss_initial"].get<double>());
  CHECK(sidecar["T"].get<std::size_t>() == 6);

  const fs::path again = fresh_dir("experts_again");
  REQUIRE(cli({"gen-data", "--out", again.string(), "--seed", "5", "--n-train", "80", "--n-test",
               "80"}) == 0);
  REQUIRE(cli({"train-experts", "--data", (again / "train.satmrd").string(), "--out",
               again.string(), "--seed", "5", "--count", "2", "--epochs", "6"}) == 0);
  CHECK(fhash(p.dir / "expert_000.satmtrj") == fhash(again / "expert_000.satmtrj"));
  CHECK(fhash(p.dir / "expert_001.satmtrj") == fhash(again / "expert_001.satmtrj"));
}

TEST_CASE("condense labels runs and reruns hash-equal from the manifest") {
  Pipeline p("condense");
  const uint64_t train_before = fhash(p.dir / "train.satmrd");
  const uint64_t expert_before = fhash(p.dir / "expert_000.satmtrj");
  REQUIRE(cli({"condense", "--data", (p.dir / "train.satmrd").string(), "--experts", p.dir.string(),
               "--out", p.dir.string(), "--seed", "5", "--iterations", "40", "--max-start", "2"}) ==
          0);
  CHECK(fhash(p.dir / "train.satmrd") == train_before);  // inputs are never mutated
  CHECK(fhash(p.dir / "expert_000.satmtrj") == expert_before);
  const json manifest = read_json(p.dir / "manifest-condense.json");
  CHECK(manifest["equivalence"] == "satm");
  CHECK(manifest["parameters"]["iterations"] == 40);

  // rerun purely from the manifest into a fresh directory
  const fs::path rerun = fresh_dir("condense_rerun");
  REQUIRE(cli({"condense", "--config", (p.dir / "manifest-condense.json").string(), "--out",
               rerun.string()}) == 0);
  CHECK(fhash(p.dir / "synthetic.satmds") == fhash(rerun / "synthetic.satmds"));
  CHECK(fhash(p.dir / "sharpness.csv") == fhash(rerun / "sharpness.csv"));
  CHECK(fhash(p.dir / "manifest-condense.json") == fhash(rerun / "manifest-condense.json"));
}

TEST_CASE("the mtt-equivalent reduction is labeled in the manifest") {
  Pipeline p("mtt");
  REQUIRE(cli({"condense", "--data", (p.dir / "train.satmrd").string(), "--experts", p.dir.string(),
               "--out", p.dir.string(), "--seed", "5", "--iterations", "10", "--rho", "0",
               "--gamma", "0", "--iota", "0"}) == 0);
  CHECK(read_json(p.dir / "manifest-condense.json")["equivalence"] == "mtt-equivalent");
}

TEST_CASE("the published image-scale schema is accepted and echoed") {
  Pipeline p("schema");
  // N = 50, M = 2, max start 2: needs T >= 4, our experts have T = 6
  const fs::path cfg_path = p.dir / "cifar10-ipc1-style.json";
  io::write_file(cfg_path, json{{"inner-steps", 50},
                                {"expert-span", 2},
                                {"max-start", 2},
                                {"iota", 33},
                                {"rho", 0.01},
                                {"gamma", 0.0},
                                {"outer-lr", 1000.0},
                                {"lr-lr", 1e-6},
                                {"iterations", 5}}
                               .dump(2));
  REQUIRE(cli({"condense", "--config", cfg_path.string(), "--data",
               (p.dir / "train.satmrd").string(), "--experts", p.dir.string(), "--out",
               p.dir.string(), "--seed", "5"}) == 0);
  const json manifest = read_json(p.dir / "manifest-condense.json");
  CHECK(manifest["parameters"]["inner-steps"] == 50);
  CHECK(manifest["parameters"]["expert-span"] == 2);
  CHECK(manifest["parameters"]["max-start"] == 2);
  CHECK(manifest["parameters"]["outer-lr"] == 1000.0);
}

TEST_CASE("eval emits paired rows and repeats=1 yields a zero std") {
  Pipeline p("eval");
  REQUIRE(cli({"condense", "--data", (p.dir / "train.satmrd").string(), "--experts", p.dir.string(),
               "--out", p.dir.string(), "--seed", "5", "--iterations", "30"}) == 0);
  const fs::path mtt_dir = fresh_dir("eval_mtt");
  REQUIRE(cli({"condense", "--data", (p.dir / "train.satmrd").string(), "--experts", p.dir.string(),
               "--out", mtt_dir.string(), "--seed", "5", "--iterations", "30", "--rho", "0",
               "--gamma", "0", "--iota", "0"}) == 0);

  REQUIRE(cli({"eval", "--synthetic",
               (p.dir / "synthetic.satmds").string() + "," + (mtt_dir / "synthetic.satmds").string(),
               "--test", (p.dir / "test.satmrd").string(), "--out", p.dir.string(), "--seed", "1",
               "--repeats", "1", "--epochs", "150"}) == 0);
  std::ifstream csv(p.dir / "eval.csv");
  std::string header, row1, row2;
  std::getline(csv, header);
  std::getline(csv, row1);
  std::getline(csv, row2);
  CHECK(header.find("acc_mean,acc_std") != std::string::npos);
  CHECK(row1.find("synthetic.satmds") != std::string::npos);
  CHECK_FALSE(row2.empty());  // paired row for the mtt-equivalent run
  CHECK(row1.substr(row1.rfind(',') + 1) == "0");  // std with one repeat
}

TEST_CASE("cross-eval writes one row per architecture") {
  Pipeline p("cross");
  REQUIRE(cli({"condense", "--data", (p.dir / "train.satmrd").string(), "--experts", p.dir.string(),
               "--out", p.dir.string(), "--seed", "5", "--iterations", "20"}) == 0);
  REQUIRE(cli({"cross-eval", "--synthetic", (p.dir / "synthetic.satmds").string(), "--test",
               (p.dir / "test.satmrd").string(), "--out", p.dir.string(), "--archs",
               "softmax,mlp1:8", "--repeats", "2", "--epochs", "100"}) == 0);
  std::ifstream csv(p.dir / "cross_eval.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 3);  // header + two architectures
}

TEST_CASE("outputs listed in manifests carry correct hashes") {
  Pipeline p("hashes");
  const json manifest = read_json(p.dir / "manifest-train-experts.json");
  for (const auto& [name, want] : manifest["outputs"].items())
    CHECK(io::hex64(fhash(p.dir / name)) == want.get<std::string>());
}
