#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "softguard/errors.hpp"
#include "softguard/experiment.hpp"
#include "softguard/png_io.hpp"

using namespace softguard;
namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("softguard_exp_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

/// Runs the CLI with the given arguments inside dir.
RunResult run_cli(const fs::path& dir, const std::string& args) {
  const fs::path out = dir / "stdout.txt";
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = "cd '" + dir.string() + "' && '" + SOFTGUARD_CLI_PATH + "' " + args +
                          " > '" + out.string() + "' 2> '" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

constexpr const char* kTinyConfig = R"({
  "data": {"train_size": 6, "val_size": 3, "noise_size": 2, "texture_size": 2,
           "height": 16, "width": 16},
  "train": {"epochs": 1, "batch_size": 3},
  "seeds": [1]
})";

fs::path tiny_setup(const std::string& name) {
  const fs::path dir = fresh_dir(name);
  std::ofstream(dir / "config.json") << kTinyConfig;
  return dir;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

}  // namespace

TEST_CASE("config parsing rejects unknown keys and keeps defaults") {
  const auto c = ExperimentConfig::from_json_text("{}");
  CHECK(c.train.learning_rate == 0.05);
  CHECK(c.train.momentum == 0.9);
  CHECK(c.train.epochs == 30);
  CHECK(c.train.batch_size == 8);
  CHECK(c.train.ece_bins == 15);
  CHECK(c.seeds == std::vector<std::uint64_t>{1, 2, 3});

  CHECK_THROWS_AS(ExperimentConfig::from_json_text(R"({"trian": {}})"), UsageError);
  CHECK_THROWS_AS(ExperimentConfig::from_json_text(R"({"train": {"lr": 0.1}})"), UsageError);
  CHECK_THROWS_AS(ExperimentConfig::from_json_text(R"({"data": {"classes": 9}})"), UsageError);
  CHECK_THROWS_AS(ExperimentConfig::from_json_text("not json"), UsageError);
  CHECK_THROWS_AS(ExperimentConfig::from_json_text(R"({"metrics": {"id_softmax": "half"}})"),
                  UsageError);
  CHECK_THROWS_AS(ExperimentConfig::from_file("/nonexistent/config.json"), UsageError);
}

TEST_CASE("config hash tracks the resolved configuration") {
  const auto a = ExperimentConfig::from_json_text("{}");
  const auto b = ExperimentConfig::from_json_text(R"({"train": {"epochs": 30}})");
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 64);
  const auto c = ExperimentConfig::from_json_text(R"({"train": {"epochs": 29}})");
  CHECK(a.hash() != c.hash());
  const auto d = ExperimentConfig::from_json_text(R"({"metrics": {"ece_bins": 10}})");
  CHECK(a.hash() != d.hash());
  // The canonical text parses back to the same hash.
  CHECK(ExperimentConfig::from_json_text(c.to_json_text(2)).hash() == c.hash());
}

TEST_CASE("run layout") {
  const auto c = ExperimentConfig::from_json_text(R"({"output_dir": "out"})");
  CHECK(c.run_dir(HeadKind::Implicit, 2) == fs::path("out/implicit_seed2"));
  CHECK(c.checkpoint_path(HeadKind::Explicit, 1) == fs::path("out/explicit_seed1/checkpoint.bin"));
  const auto specs = c.dataset_specs();
  REQUIRE(specs.size() == 4);
  CHECK(specs[0].id == "train");
  CHECK(specs[0].count == 512);
  CHECK(specs[1].count == 128);
  CHECK(specs[2].kind == DatasetKind::Noise);
  CHECK(specs[3].kind == DatasetKind::Texture);
}

TEST_CASE("directional judgement") {
  MetricRow e;
  e.miou_val = 80.0;
  e.bg_iou_texture = 50.0;
  e.bg_iou_noise = 60.0;
  e.ece_val = 5.0;
  e.ece_texture = 20.0;
  e.ece_noise = 10.0;
  e.end_val = 30.0;
  e.end_texture = 40.0;
  e.end_noise = 50.0;
  MetricRow i = e;
  i.miou_val = 81.0;
  i.bg_iou_texture = 55.0;
  i.bg_iou_noise = 60.0;
  i.ece_val = 4.0;
  i.ece_texture = 25.0;
  i.ece_noise = 9.0;
  i.end_val = 20.0;
  i.end_texture = 30.0;
  i.end_noise = 40.0;

  auto checks = judge_directional({{1, e, i}, {2, e, i}, {3, e, i}});
  REQUIRE(checks.size() == 4);
  for (const auto& c : checks) CHECK(c.passed);

  // One seed with ties-only END is enough to break (ii).
  MetricRow tie = i;
  tie.end_noise = e.end_noise;
  checks = judge_directional({{1, e, i}, {2, e, tie}, {3, e, i}});
  CHECK(!checks[1].passed);

  // Majority: one losing seed out of three still passes (iii).
  MetricRow worse = i;
  worse.bg_iou_noise = 59.0;
  checks = judge_directional({{1, e, worse}, {2, e, i}, {3, e, i}});
  CHECK(checks[2].passed);
  checks = judge_directional({{1, e, worse}, {2, e, worse}, {3, e, i}});
  CHECK(!checks[2].passed);

  MetricRow far = i;
  far.miou_val = 83.5;
  checks = judge_directional({{1, e, far}, {2, e, far}, {3, e, i}});
  CHECK(!checks[0].passed);
}

TEST_CASE("exit codes by error type") {
  CHECK(exit_code_for(UsageError("x")) == 1);
  CHECK(exit_code_for(IoError("x")) == 2);
  CHECK(exit_code_for(FormatError("x")) == 2);
  CHECK(exit_code_for(TrainingDivergence("x", 1)) == 3);
}

TEST_CASE("cli end to end on a tiny config") {
  const fs::path dir = tiny_setup("cli");

  SUBCASE("usage errors") {
    CHECK(run_cli(dir, "").code == 1);
    CHECK(run_cli(dir, "frobnicate").code == 1);
    CHECK(run_cli(dir, "--config config.json train --head neither").code == 1);
    const auto v = run_cli(dir, "--version");
    CHECK(v.code == 0);
    CHECK(contains(v.out, kToolVersion));
    std::ofstream(dir / "bad.json") << R"({"train": {"epoch": 3}})";
    const auto bad = run_cli(dir, "--config bad.json generate");
    CHECK(bad.code == 1);
    CHECK(contains(bad.err, "epoch"));
  }

  SUBCASE("missing dataset names the manifest") {
    const auto r = run_cli(dir, "--config config.json train --head implicit");
    CHECK(r.code == 2);
    CHECK(contains(r.err, "manifest.json"));
  }

  SUBCASE("full pipeline") {
    REQUIRE(run_cli(dir, "--config config.json generate").code == 0);
    for (const char* split : {"train", "val", "noise", "texture"}) {
      CHECK(fs::exists(dir / "data" / split / "manifest.json"));
    }

    // A second generate refuses and leaves everything in place.
    const auto before = fs::last_write_time(dir / "data" / "val" / "manifest.json");
    const std::string manifest = slurp(dir / "data" / "val" / "manifest.json");
    const auto again = run_cli(dir, "--config config.json generate");
    CHECK(again.code != 0);
    CHECK(contains(again.err, "--force"));
    CHECK(fs::last_write_time(dir / "data" / "val" / "manifest.json") == before);
    CHECK(slurp(dir / "data" / "val" / "manifest.json") == manifest);
    CHECK(run_cli(dir, "--config config.json generate --force").code == 0);
    CHECK(slurp(dir / "data" / "val" / "manifest.json") == manifest);

    REQUIRE(run_cli(dir, "--config config.json train").code == 0);
    for (HeadKind h : {HeadKind::Explicit, HeadKind::Implicit}) {
      const fs::path ckpt = dir / "runs" / (std::string(to_string(h)) + "_seed1") / "checkpoint.bin";
      REQUIRE(fs::exists(ckpt));
      const Checkpoint cp = load_checkpoint(ckpt);
      CHECK(cp.header.head == h);
      CHECK(cp.header.classes == 5);
      CHECK(cp.header.out_channels == (h == HeadKind::Explicit ? 5 : 4));
      CHECK(cp.header.seed == 1);
      CHECK(fs::exists(ckpt.parent_path() / "train_log.jsonl"));
    }

    // eval: report schema and byte-identical rerun
    const fs::path run = dir / "runs" / "implicit_seed1";
    REQUIRE(run_cli(dir, "--config config.json eval --head implicit --seed 1").code == 0);
    const auto report = ordered_json::parse(slurp(run / "report.json"));
    std::vector<std::string> keys;
    for (const auto& [k, _] : report.items()) keys.push_back(k);
    CHECK(keys == std::vector<std::string>{"tool_version", "config_hash", "head_kind", "seed",
                                           "checkpoint_sha256", "ece_bins", "id_softmax",
                                           "ece_scoring", "noise_generator", "config",
                                           "datasets"});
    CHECK(report["head_kind"] == "implicit");
    CHECK(report["ece_bins"] == 15);
    CHECK(report["datasets"]["val"].contains("miou"));
    CHECK(report["datasets"]["noise"].contains("bg_iou"));
    CHECK(report["datasets"]["texture"].contains("expected_nd"));
    CHECK(fs::exists(run / "report.csv"));
    CHECK(fs::exists(run / "reliability_val.csv"));
    CHECK(slurp(run / "report.csv").rfind("# softguard", 0) == 0);
    const std::string first = slurp(run / "report.json");
    REQUIRE(run_cli(dir, "--config config.json eval --checkpoint runs/implicit_seed1/checkpoint.bin")
                .code == 0);
    CHECK(slurp(run / "report.json") == first);

    // A different bin count shows up in the report.
    REQUIRE(run_cli(dir, "--config config.json --ece-bins 10 eval --head implicit --seed 1 --out e10")
                .code == 0);
    CHECK(ordered_json::parse(slurp(dir / "e10" / "report.json"))["ece_bins"] == 10);

    // maps
    const fs::path img = dir / "data" / "val" / "images" / "00000.png";
    REQUIRE(run_cli(dir, "--config config.json maps --checkpoint runs/implicit_seed1/checkpoint.bin "
                         "--image '" + img.string() + "' --out maps")
                .code == 0);
    for (const char* f : {"00000_mu_id.png", "00000_mu_bg.png", "00000_mu_nd.png", "00000_seg.png"}) {
      CHECK(fs::exists(dir / "maps" / f));
    }
    const Image8 id = read_png_indices(dir / "maps" / "00000_mu_id.png");
    const Image8 bg = read_png_indices(dir / "maps" / "00000_mu_bg.png");
    const Image8 nd = read_png_indices(dir / "maps" / "00000_mu_nd.png");
    REQUIRE(nd.bytes.size() == 256);
    for (std::size_t p = 0; p < nd.bytes.size(); ++p) {
      CHECK(std::abs(nd.bytes[p] / 255.0 - (bg.bytes[p] / 255.0) * (id.bytes[p] / 255.0)) <=
            1.0 / 255.0);
    }
    CHECK(run_cli(dir, "--config config.json maps --checkpoint runs/implicit_seed1/checkpoint.bin "
                       "--image nothing.png --out maps")
              .code != 0);

    // compare
    REQUIRE(run_cli(dir, "--config config.json compare").code == 0);
    const std::string csv = slurp(dir / "runs" / "compare.csv");
    std::istringstream lines(csv);
    std::string line;
    std::vector<std::string> rows;
    while (std::getline(lines, line)) rows.push_back(line);
    REQUIRE(rows.size() == 6);
    CHECK(rows[0].rfind("# softguard", 0) == 0);
    CHECK(std::count(rows[1].begin(), rows[1].end(), ',') == 10);
    CHECK(rows[2].rfind("1,explicit,", 0) == 0);
    CHECK(rows[3].rfind("1,implicit,", 0) == 0);
    const auto cj = ordered_json::parse(slurp(dir / "runs" / "compare.json"));
    CHECK(cj.contains("directional_checks"));

    const auto missing = run_cli(dir, "--config config.json compare --seed 7");
    CHECK(missing.code != 0);
    CHECK(contains(missing.err, "head="));
    CHECK(contains(missing.err, "seed=7"));

    // A corrupt checkpoint is a format error.
    std::ofstream(dir / "junk.bin", std::ios::binary) << "definitely not a checkpoint";
    const auto junk = run_cli(dir, "--config config.json eval --checkpoint junk.bin --out j");
    CHECK(junk.code == 2);
    CHECK(contains(junk.err, "format version"));
  }

  SUBCASE("divergence exits with 3") {
    REQUIRE(run_cli(dir, "--config config.json generate").code == 0);
    std::ofstream(dir / "hot.json")
        << R"({"data": {"train_size": 6, "val_size": 3, "noise_size": 2, "texture_size": 2,
                        "height": 16, "width": 16},
              "train": {"epochs": 2, "batch_size": 3, "learning_rate": 1e200}})";
    const auto r = run_cli(dir, "--config hot.json train --head explicit --seed 1");
    CHECK(r.code == 3);
    CHECK(contains(r.err, "epoch"));
  }

  fs::remove_all(dir);
}
