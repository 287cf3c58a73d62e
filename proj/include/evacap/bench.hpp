// SPDX-License-Identifier: Apache-2.0
#pragma once

// Inference latency benchmark: full greedy decodes timed per (mode, frame
// count). The timed region covers audio/visual encoding, fusion and decoding;
// model construction and input generation happen outside it.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "evacap/model.hpp"

#include <json.hpp>

namespace evacap::bench {

struct BenchSpec {
  std::vector<std::size_t> frame_counts{0, 1, 4, 8, 18};
  std::size_t audio_frames = 1024;
  std::size_t warmup_runs = 5;
  std::size_t timed_runs = 10;
  std::vector<model::FusionMode> modes{model::FusionMode::gated, model::FusionMode::concat};
  /// Every pass emits exactly this many tokens.
  std::size_t decode_steps = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const BenchSpec& s);
BenchSpec bench_from_json(const nlohmann::json& j);

/// Desk-scale model used for timing. T_a and T_v are overwritten per cell.
model::ModelConfig default_bench_model();

struct Cell {
  model::FusionMode mode = model::FusionMode::gated;
  std::size_t frames = 0;
  std::vector<double> seconds;  // one entry per timed run
  std::size_t memory_length = 0;

  double mean() const;
  /// Sample standard deviation (n - 1); 0 for a single run.
  double stddev() const;
  double min() const;
  double max() const;
};

struct BenchReport {
  BenchSpec spec;
  model::ModelConfig model;
  std::vector<Cell> cells;

  const Cell& cell(model::FusionMode mode, std::size_t frames) const;
  /// mean_concat(frames) / mean_gated(frames).
  double ratio(std::size_t frames) const;
  bool has(model::FusionMode mode) const;

  /// Human-readable table.
  std::string format() const;
  /// One record per timed run: {mode, frames, run_index, seconds}.
  std::vector<nlohmann::json> records() const;
};

/// Models for every mode share `model_config` (including its seed) apart from
/// fusion_mode. Frame count 0 runs the audio-only path for every mode.
/// Throws std::runtime_error on a non-finite or negative timing.
BenchReport run_bench(const BenchSpec& spec, const model::ModelConfig& model_config);

}  // namespace evacap::bench
