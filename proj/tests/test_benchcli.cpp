// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "evacap/bench.hpp"
#include "evacap/cli.hpp"
#include "evacap/errors.hpp"

using namespace evacap;
namespace fs = std::filesystem;

namespace {

model::ModelConfig tiny_bench_model() {
  model::ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_dec_layers = 1;
  c.d_in_audio = 4;
  c.audio_patch = 4;
  c.d_in_visual = 6;
  c.patches_per_frame = 4;
  c.vocab_size = 12;
  c.max_caption_len = 4;
  return c;
}

struct Run {
  int code;
  std::string out, err;
};

Run run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "evacap");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("evacap_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Small end-to-end config so CLI tests stay fast.
fs::path write_config(const fs::path& dir) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << R"({"model": {"d_model": 16, "n_dec_layers": 1},
    "task": {"n_train": 24, "n_val": 4, "n_test": 12},
    "train": {"epochs": 2, "batch_size": 8}})";
  return p;
}

}  // namespace

TEST_SUITE("bench") {
  TEST_CASE("spec validation") {
    bench::BenchSpec s;
    s.timed_runs = 0;
    CHECK_THROWS_AS(s.validate(), InvalidInput);
    s = bench::BenchSpec{};
    s.frame_counts.clear();
    CHECK_THROWS_AS(s.validate(), InvalidInput);
    CHECK_THROWS_AS(bench::bench_from_json({{"runs", 3}}), InvalidInput);
    CHECK(bench::BenchSpec{}.frame_counts == std::vector<std::size_t>{0, 1, 4, 8, 18});
  }

  TEST_CASE("a single timed run reports zero spread") {
    bench::BenchSpec s;
    s.frame_counts = {0, 2};
    s.audio_frames = 16;
    s.warmup_runs = 0;
    s.timed_runs = 1;
    s.decode_steps = 2;
    const auto r = bench::run_bench(s, tiny_bench_model());
    for (const auto& c : r.cells) {
      CHECK(c.seconds.size() == 1);
      CHECK(c.stddev() == 0.0);
    }
  }

  TEST_CASE("report invariants") {
    bench::BenchSpec s;
    s.frame_counts = {0, 1, 3};
    s.audio_frames = 16;
    s.warmup_runs = 1;
    s.timed_runs = 4;
    s.decode_steps = 3;
    const auto r = bench::run_bench(s, tiny_bench_model());
    CHECK(r.cells.size() == 6);
    for (const auto& c : r.cells) {
      CHECK(c.seconds.size() == 4);
      CHECK(c.mean() >= c.min());
      CHECK(c.mean() <= c.max());
      CHECK(c.stddev() >= 0.0);
    }
    for (std::size_t f : s.frame_counts) {
      CHECK(r.ratio(f) == r.cell(model::FusionMode::concat, f).mean() / r.cell(model::FusionMode::gated, f).mean());
    }
    CHECK(r.cell(model::FusionMode::concat, 3).memory_length == 4 + 3 * 4);
    CHECK(r.cell(model::FusionMode::gated, 3).memory_length == 4);
    CHECK(r.cell(model::FusionMode::concat, 0).memory_length == 4);
    CHECK(r.records().size() == 6 * 4);
    CHECK(r.format().find("concat/gated ratio") != std::string::npos);
  }

  TEST_CASE("audio length must fold into whole tokens") {
    bench::BenchSpec s;
    s.audio_frames = 10;
    CHECK_THROWS_AS(bench::run_bench(s, tiny_bench_model()), InvalidInput);
  }
}

TEST_SUITE("cli") {
  TEST_CASE("unknown flags print usage and exit 2") {
    const Run r = run_cli({"train", "--bogus"});
    CHECK(r.code == 2);
    CHECK(r.err.find("train") != std::string::npos);
    CHECK(run_cli({}).code == 2);
    CHECK(run_cli({"frobnicate"}).code == 2);
  }

  TEST_CASE("gradcheck passes and reports the error") {
    const Run r = run_cli({"gradcheck", "--configs", "10"});
    CHECK(r.code == 0);
    CHECK(r.out.find("max relative error") != std::string::npos);
  }

  TEST_CASE("failures give one diagnostic line and a nonzero status") {
    const Run r = run_cli({"eval", "--checkpoint", "/nonexistent/model.ckpt"});
    CHECK(r.code == 1);
    CHECK(r.err.find("error") != std::string::npos);
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  }

  TEST_CASE("gen-data is reproducible and seedable") {
    const fs::path a = scratch("gen_a"), b = scratch("gen_b"), c = scratch("gen_c");
    const fs::path spec = a / "spec.json";
    std::ofstream(spec) << R"({"n_train": 10, "n_val": 2, "n_test": 3})";
    CHECK(run_cli({"gen-data", "--spec", spec.string(), "--out", (a / "d").string()}).code == 0);
    CHECK(run_cli({"gen-data", "--spec", spec.string(), "--out", (b / "d").string()}).code == 0);
    CHECK(run_cli({"gen-data", "--spec", spec.string(), "--out", (c / "d").string(), "--seed", "8"}).code == 0);
    for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl"}) {
      CHECK(slurp(a / "d" / f) == slurp(b / "d" / f));
      CHECK(slurp(a / "d" / f) != slurp(c / "d" / f));
    }
  }

  TEST_CASE("train and eval runs are reproducible") {
    const fs::path dir = scratch("train");
    const fs::path cfg = write_config(dir);
    std::vector<std::string> outputs;
    for (const char* tag : {"a", "b"}) {
      const fs::path report = dir / tag;
      const fs::path ckpt = dir / (std::string(tag) + ".ckpt");
      const Run t = run_cli({"train", "--config", cfg.string(), "--shuffle-prob", "0.5", "--seed", "3", "--out",
                         ckpt.string(), "--report", report.string()});
      REQUIRE(t.code == 0);
      const Run e = run_cli({"eval", "--checkpoint", ckpt.string(), "--config", cfg.string(), "--test-shuffle-grid",
                         "0,0.05,0.5,1.0", "--report", report.string()});
      REQUIRE(e.code == 0);
      // The last stdout line of train names the checkpoint path, which differs.
      outputs.push_back(slurp(ckpt) + slurp(report / "train_report.json") + slurp(report / "eval_sweep.jsonl") +
                        t.out.substr(0, t.out.rfind("checkpoint ")) + e.out);
    }
    CHECK(outputs[0] == outputs[1]);
  }

  TEST_CASE("eval grid yields four rows") {
    const fs::path dir = scratch("eval");
    const fs::path cfg = write_config(dir);
    REQUIRE(run_cli({"train", "--config", cfg.string(), "--out", (dir / "m.ckpt").string(), "--report", dir.string()})
                .code == 0);
    const Run e = run_cli({"eval", "--checkpoint", (dir / "m.ckpt").string(), "--config", cfg.string(),
                       "--test-shuffle-grid", "0,0.05,0.5,1.0", "--report", dir.string()});
    REQUIRE(e.code == 0);
    for (const char* row : {"  0%", "  5%", " 50%", "100%"}) CHECK(e.out.find(row) != std::string::npos);
    std::ifstream is(dir / "eval_sweep.jsonl");
    std::size_t lines = 0;
    for (std::string l; std::getline(is, l);) ++lines;
    CHECK(lines == 4 * 6);
  }

  TEST_CASE("report directory comes from the environment when no flag is given") {
    const fs::path dir = scratch("env");
    ::setenv("EVACAP_REPORT_DIR", (dir / "reports").c_str(), 1);
    const Run r = run_cli({"bench", "--frames", "0,1", "--warmup", "0", "--runs", "1", "--steps", "1"});
    ::unsetenv("EVACAP_REPORT_DIR");
    CHECK(r.code == 0);
    CHECK(fs::exists(dir / "reports" / "bench.jsonl"));
  }
}
