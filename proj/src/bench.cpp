// SPDX-License-Identifier: Apache-2.0
#include "evacap/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "evacap/errors.hpp"
#include "evacap/rng.hpp"

namespace evacap::bench {

void BenchSpec::validate() const {
  if (frame_counts.empty()) throw InvalidInput("bench: frame_counts must be nonempty");
  if (timed_runs < 1) throw InvalidInput("bench: timed_runs must be at least 1");
  if (audio_frames == 0) throw InvalidInput("bench: audio_frames must be positive");
  if (modes.empty()) throw InvalidInput("bench: at least one fusion mode is required");
  if (decode_steps == 0) throw InvalidInput("bench: decode_steps must be positive");
}

nlohmann::json to_json(const BenchSpec& s) {
  nlohmann::json modes = nlohmann::json::array();
  for (auto m : s.modes) modes.push_back(model::to_string(m));
  return {{"frame_counts", s.frame_counts}, {"audio_frames", s.audio_frames}, {"warmup_runs", s.warmup_runs},
          {"timed_runs", s.timed_runs},     {"modes", modes},                 {"decode_steps", s.decode_steps},
          {"seed", s.seed}};
}

BenchSpec bench_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidInput("bench config must be an object");
  BenchSpec s;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "frame_counts") s.frame_counts = value.get<std::vector<std::size_t>>();
      else if (key == "audio_frames") s.audio_frames = value.get<std::size_t>();
      else if (key == "warmup_runs") s.warmup_runs = value.get<std::size_t>();
      else if (key == "timed_runs") s.timed_runs = value.get<std::size_t>();
      else if (key == "decode_steps") s.decode_steps = value.get<std::size_t>();
      else if (key == "seed") s.seed = value.get<std::uint64_t>();
      else if (key == "modes") {
        s.modes.clear();
        for (const auto& m : value) s.modes.push_back(model::fusion_mode_from_string(m.get<std::string>()));
      } else {
        throw InvalidInput("bench config: unknown key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("bench config: ") + e.what());
  }
  s.validate();
  return s;
}

model::ModelConfig default_bench_model() {
  model::ModelConfig c;
  c.d_model = 64;
  c.n_heads = 4;
  c.n_enc_layers = 2;
  c.n_dec_layers = 2;
  c.mlp_ratio = 2;
  c.d_in_audio = 16;
  c.audio_patch = 16;
  c.d_in_visual = 48;
  c.patches_per_frame = 16;
  c.vocab_size = 32;
  c.max_caption_len = 16;
  c.T_a = 1024;
  c.T_v = 18;
  return c;
}

double Cell::mean() const {
  return std::accumulate(seconds.begin(), seconds.end(), 0.0) / static_cast<double>(seconds.size());
}

double Cell::stddev() const {
  if (seconds.size() < 2) return 0.0;
  const double mu = mean();
  double ss = 0.0;
  for (double s : seconds) ss += (s - mu) * (s - mu);
  return std::sqrt(ss / static_cast<double>(seconds.size() - 1));
}

double Cell::min() const { return *std::min_element(seconds.begin(), seconds.end()); }
double Cell::max() const { return *std::max_element(seconds.begin(), seconds.end()); }

const Cell& BenchReport::cell(model::FusionMode mode, std::size_t frames) const {
  for (const auto& c : cells)
    if (c.mode == mode && c.frames == frames) return c;
  throw InvalidInput("bench report: no cell for " + model::to_string(mode) + " at " + std::to_string(frames) +
                     " frames");
}

bool BenchReport::has(model::FusionMode mode) const {
  return std::any_of(cells.begin(), cells.end(), [&](const Cell& c) { return c.mode == mode; });
}

double BenchReport::ratio(std::size_t frames) const {
  return cell(model::FusionMode::concat, frames).mean() / cell(model::FusionMode::gated, frames).mean();
}

std::string BenchReport::format() const {
  std::ostringstream os;
  os << "# timed region: encode + fuse + " << spec.decode_steps << "-step greedy decode; " << spec.warmup_runs
     << " warm-up, " << spec.timed_runs << " timed runs; audio frames " << spec.audio_frames << "\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %6s %8s %12s %12s %12s %12s\n", "mode", "frames", "memory", "mean_s",
                "std_s", "min_s", "max_s");
  os << line;
  for (const auto& c : cells) {
    std::snprintf(line, sizeof line, "%-10s %6zu %8zu %12.6f %12.6f %12.6f %12.6f\n",
                  model::to_string(c.mode).c_str(), c.frames, c.memory_length, c.mean(), c.stddev(), c.min(),
                  c.max());
    os << line;
  }
  if (has(model::FusionMode::gated) && has(model::FusionMode::concat)) {
    os << "concat/gated ratio:";
    for (std::size_t f : spec.frame_counts) {
      std::snprintf(line, sizeof line, " %zu:%.3f", f, ratio(f));
      os << line;
    }
    os << "\n";
  }
  return os.str();
}

std::vector<nlohmann::json> BenchReport::records() const {
  std::vector<nlohmann::json> out;
  for (const auto& c : cells)
    for (std::size_t i = 0; i < c.seconds.size(); ++i)
      out.push_back({{"mode", model::to_string(c.mode)}, {"frames", c.frames}, {"run_index", i},
                     {"seconds", c.seconds[i]}});
  return out;
}

BenchReport run_bench(const BenchSpec& spec, const model::ModelConfig& model_config) {
  spec.validate();
  model_config.validate();
  if (spec.audio_frames % model_config.audio_patch != 0) {
    throw InvalidInput("bench: audio_frames must be a multiple of audio_patch");
  }
  BenchReport report;
  report.spec = spec;
  report.model = model_config;
  report.model.T_a = spec.audio_frames;

  Rng rng(spec.seed);
  Tensor audio({spec.audio_frames, model_config.d_in_audio});
  for (auto& v : audio.data()) v = rng.normal();
  std::size_t max_frames = *std::max_element(spec.frame_counts.begin(), spec.frame_counts.end());
  Tensor all_visual({std::max<std::size_t>(max_frames, 1), model_config.visual_row_width()});
  for (auto& v : all_visual.data()) v = rng.normal();

  for (auto mode : spec.modes) {
    model::ModelConfig c = report.model;
    c.fusion_mode = mode;
    const model::Captioner m(c);
    for (std::size_t frames : spec.frame_counts) {
      Cell cell;
      cell.mode = mode;
      cell.frames = frames;
      const model::FusionMode path = frames == 0 ? model::FusionMode::audio_only : mode;
      Tensor visual;
      if (frames > 0) {
        visual = Tensor({frames, c.visual_row_width()});
        std::copy_n(all_visual.data().begin(), visual.size(), visual.data().begin());
      }
      const std::size_t audio_tokens = spec.audio_frames / c.audio_patch;
      cell.memory_length = path == model::FusionMode::concat ? audio_tokens + frames * c.patches_per_frame
                                                             : audio_tokens;
      const model::DecodeOptions forced{true};
      for (std::size_t r = 0; r < spec.warmup_runs; ++r) m.decode_greedy(audio, visual, spec.decode_steps, path, forced);
      for (std::size_t r = 0; r < spec.timed_runs; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto tokens = m.decode_greedy(audio, visual, spec.decode_steps, path, forced);
        const auto t1 = std::chrono::steady_clock::now();
        const double s = std::chrono::duration<double>(t1 - t0).count();
        if (!std::isfinite(s) || s < 0.0 || tokens.size() != spec.decode_steps) {
          throw std::runtime_error("bench: invalid timing sample");
        }
        cell.seconds.push_back(s);
      }
      report.cells.push_back(std::move(cell));
    }
  }
  return report;
}

}  // namespace evacap::bench
