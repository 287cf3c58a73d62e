// SPDX-License-Identifier: Apache-2.0
#include "evacap/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "evacap/bench.hpp"
#include "evacap/data.hpp"
#include "evacap/errors.hpp"
#include "evacap/gradcheck.hpp"
#include "evacap/model.hpp"
#include "evacap/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

namespace evacap::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct RunConfig {
  model::ModelConfig model;
  data::SyntheticTaskSpec task;
  train::OptimizerConfig optimizer;
  bench::BenchSpec bench;
  model::ModelConfig bench_model = bench::default_bench_model();
};

json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidInput("cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw InvalidInput("malformed JSON in " + path + ": " + e.what());
  }
}

// The synthetic task always uses the model's feature layout.
void align_task(RunConfig& rc) {
  rc.task.T_a = rc.model.T_a;
  rc.task.T_v = rc.model.T_v;
  rc.task.d_audio = rc.model.d_in_audio;
  rc.task.d_visual = rc.model.visual_row_width();
}

RunConfig load_config(const std::string& path) {
  RunConfig rc;
  if (!path.empty()) {
    const json j = read_json_file(path);
    if (!j.is_object()) throw InvalidInput("config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (key == "model") rc.model = model::config_from_json(value);
      else if (key == "task") rc.task = data::task_from_json(value);
      else if (key == "train") rc.optimizer = train::optimizer_from_json(value);
      else if (key == "bench") rc.bench = bench::bench_from_json(value);
      else if (key == "bench_model") rc.bench_model = model::config_from_json(value);
      else throw InvalidInput("config: unknown section '" + key + "'");
    }
  }
  align_task(rc);
  return rc;
}

fs::path report_dir(const std::string& flag) {
  fs::path dir = ".";
  if (const char* env = std::getenv("EVACAP_REPORT_DIR"); env && *env) dir = env;
  if (!flag.empty()) dir = flag;
  fs::create_directories(dir);
  return dir;
}

void write_lines(const fs::path& path, const std::vector<json>& records) {
  std::ofstream os(path);
  if (!os) throw InvalidInput("cannot write " + path.string());
  for (const auto& r : records) os << r.dump() << '\n';
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw InvalidInput("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

data::Dataset load_dataset(const RunConfig& rc, const std::string& data_dir) {
  if (data_dir.empty()) return data::generate_synthetic(rc.task);
  const fs::path d = data_dir;
  data::Dataset ds;
  ds.train = data::read_jsonl((d / "train.jsonl").string());
  if (fs::exists(d / "val.jsonl")) ds.val = data::read_jsonl((d / "val.jsonl").string());
  ds.test = data::read_jsonl((d / "test.jsonl").string());
  return ds;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Entropy-gated audio-visual captioning toolkit", "evacap"};
  app.require_subcommand(1);

  // train
  std::string config_path, out_path = "model.ckpt", data_dir, report_flag, mode_flag;
  double shuffle_prob = 0.05;
  std::optional<std::uint64_t> seed;
  auto* train_cmd = app.add_subcommand("train", "Train a captioner on the synthetic task");
  train_cmd->add_option("--config", config_path, "JSON config with model/task/train/bench sections");
  train_cmd->add_option("--shuffle-prob", shuffle_prob, "SMS probability per training batch")
      ->check(CLI::Range(0.0, 1.0));
  train_cmd->add_option("--seed", seed, "Seed for initialization and batch order");
  train_cmd->add_option("--out", out_path, "Checkpoint path");
  train_cmd->add_option("--data", data_dir, "Directory with train/val/test.jsonl (default: generate)");
  train_cmd->add_option("--mode", mode_flag, "Fusion mode: gated, concat or audio_only");
  train_cmd->add_option("--report", report_flag, "Report directory");

  // eval
  std::string checkpoint;
  std::vector<double> grid{0.0, 0.05, 0.5, 1.0};
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint under test-time shuffling");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint path")->required();
  eval_cmd->add_option("--test-shuffle-grid", grid, "Comma-separated shuffle probabilities")
      ->delimiter(',')
      ->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--config", config_path, "JSON config (task section)");
  eval_cmd->add_option("--data", data_dir, "Directory with test.jsonl (default: generate)");
  eval_cmd->add_option("--seed", seed, "Seed for the test-time shuffle");
  eval_cmd->add_option("--report", report_flag, "Report directory");

  // bench
  std::vector<std::size_t> frames;
  std::optional<std::size_t> warmup, runs, steps;
  auto* bench_cmd = app.add_subcommand("bench", "Inference latency versus video frame count");
  bench_cmd->add_option("--frames", frames, "Comma-separated frame counts")->delimiter(',');
  bench_cmd->add_option("--warmup", warmup, "Untimed warm-up passes per cell");
  bench_cmd->add_option("--runs", runs, "Timed passes per cell");
  bench_cmd->add_option("--steps", steps, "Decode steps per pass");
  bench_cmd->add_option("--config", config_path, "JSON config (bench and bench_model sections)");
  bench_cmd->add_option("--seed", seed, "Seed for weights and inputs");
  bench_cmd->add_option("--report", report_flag, "Report directory");

  // gradcheck
  std::size_t configurations = 60;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of all gradients");
  grad_cmd->add_option("--configs", configurations, "Random fusion configurations");
  grad_cmd->add_option("--seed", seed, "Seed for the random configurations");

  // gen-data
  std::string spec_path, data_out = "data";
  auto* gen_cmd = app.add_subcommand("gen-data", "Write the synthetic dataset as JSON lines");
  gen_cmd->add_option("--spec", spec_path, "Task spec JSON (a bare task object or a full config)");
  gen_cmd->add_option("--out", data_out, "Output directory");
  gen_cmd->add_option("--seed", seed, "Dataset seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "evacap: " << one_line(e.what()) << '\n' << app.help();
    return 2;
  }

  try {
    if (*train_cmd) {
      RunConfig rc = load_config(config_path);
      if (seed) {
        rc.model.seed = *seed;
        rc.optimizer.seed = *seed;
      }
      if (!mode_flag.empty()) rc.model.fusion_mode = model::fusion_mode_from_string(mode_flag);
      if (rc.model.vocab_size < rc.task.vocab_needed()) {
        throw InvalidInput("model vocab_size " + std::to_string(rc.model.vocab_size) + " is below the task's " +
                           std::to_string(rc.task.vocab_needed()));
      }
      const data::Dataset ds = load_dataset(rc, data_dir);
      model::Captioner m(rc.model);
      const train::TrainReport report = train::train(m, ds.train, shuffle_prob, rc.optimizer);
      m.save(out_path);
      for (std::size_t e = 0; e < report.epoch_loss.size(); ++e) {
        out << "epoch " << e + 1 << " loss " << std::setprecision(6) << report.epoch_loss[e] << '\n';
      }
      if (report.gate_matched_mean) out << "gate matched " << *report.gate_matched_mean << '\n';
      if (report.gate_mismatched_mean) out << "gate mismatched " << *report.gate_mismatched_mean << '\n';
      json j = train::to_json(report);
      j["model"] = model::to_json(rc.model);
      j["task"] = data::to_json(rc.task);
      j["optimizer"] = train::to_json(rc.optimizer);
      j["shuffle_prob"] = shuffle_prob;
      write_json(report_dir(report_flag) / "train_report.json", j);
      out << "checkpoint " << out_path << '\n';
    } else if (*eval_cmd) {
      const model::Captioner m = model::Captioner::load(checkpoint);
      RunConfig rc = load_config(config_path);
      rc.model = m.config();
      align_task(rc);
      const data::Dataset ds = load_dataset(rc, data_dir);
      const auto rows = train::mismatch_sweep(m, ds.test, grid, seed.value_or(2024));
      out << train::format_sweep(rows, "test-time shuffle sweep (" + model::to_string(m.config().fusion_mode) + ")");
      write_lines(report_dir(report_flag) / "eval_sweep.jsonl",
                  train::sweep_records(rows, model::to_string(m.config().fusion_mode)));
    } else if (*bench_cmd) {
      RunConfig rc = load_config(config_path);
      if (!frames.empty()) rc.bench.frame_counts = frames;
      if (warmup) rc.bench.warmup_runs = *warmup;
      if (runs) rc.bench.timed_runs = *runs;
      if (steps) rc.bench.decode_steps = *steps;
      if (seed) {
        rc.bench.seed = *seed;
        rc.bench_model.seed = *seed;
      }
      rc.bench_model.max_caption_len = std::max(rc.bench_model.max_caption_len, rc.bench.decode_steps);
      const bench::BenchReport report = bench::run_bench(rc.bench, rc.bench_model);
      out << report.format();
      write_lines(report_dir(report_flag) / "bench.jsonl", report.records());
    } else if (*grad_cmd) {
      const std::uint64_t s = seed.value_or(0);
      auto fusion = gradcheck::fusion_suite(configurations, s);
      auto whole = gradcheck::model_suite(s);
      const double worst = std::max(fusion.max_rel_error, whole.max_rel_error);
      std::size_t entries = 0;
      for (const auto& r : fusion.results) entries += r.entries;
      for (const auto& r : whole.results) {
        entries += r.entries;
        out << r.name << " max relative error " << std::scientific << std::setprecision(3) << r.max_rel_error
            << '\n';
      }
      out << "fusion configurations " << fusion.results.size() << " max relative error " << std::scientific
          << std::setprecision(3) << fusion.max_rel_error << '\n';
      out << "checked " << entries << " entries, max relative error " << worst << '\n';
      if (!(worst < 1e-4)) {
        err << "evacap: gradient check failed, max relative error " << worst << '\n';
        return 1;
      }
    } else if (*gen_cmd) {
      RunConfig rc;
      if (!spec_path.empty()) {
        const json j = read_json_file(spec_path);
        if (j.contains("task") || j.contains("model")) {
          rc = load_config(spec_path);
        } else {
          rc.task = data::task_from_json(j);
        }
      }
      if (seed) rc.task.seed = *seed;
      const data::Dataset ds = data::generate_synthetic(rc.task);
      const fs::path dir = data_out;
      fs::create_directories(dir);
      data::write_jsonl((dir / "train.jsonl").string(), ds.train);
      data::write_jsonl((dir / "val.jsonl").string(), ds.val);
      data::write_jsonl((dir / "test.jsonl").string(), ds.test);
      out << "wrote " << ds.train.size() << '/' << ds.val.size() << '/' << ds.test.size() << " samples to "
          << dir.string() << '\n';
      out << "checksum " << std::setprecision(17) << data::dataset_checksum(ds.train) + data::dataset_checksum(ds.val) +
                                                           data::dataset_checksum(ds.test)
          << '\n';
    }
  } catch (const std::exception& e) {
    err << "evacap: error: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 0;
}

}  // namespace evacap::cli
