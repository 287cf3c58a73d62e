// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic audio-visual captioning task and its line-delimited JSON format.
//
// Each clip has an audio event class c and a visual attribute a. The caption
// is the four tokens [class(c), verb(c), attr(a), object(a)].
//   * Audio frames carry a class prototype plus noise.
//   * One "salient" video frame carries a class signature plus an attribute
//     signature; the remaining frames show background prototypes.
//   * For the non-informative share of clips the attribute is the class
//     default (c mod n_attributes) and so is predictable from audio alone;
//     for the visual_informative share it is any other attribute, visible
//     only in the salient frame.
// When the pairing is broken the class signature in the video no longer
// matches the audio, which is what the fusion gate can learn to detect.

#include <cstdint>
#include <string>
#include <vector>

#include "evacap/augment.hpp"
#include "evacap/tensor.hpp"

#include <json.hpp>

namespace evacap::data {

struct SyntheticTaskSpec {
  std::size_t n_classes = 6;
  std::size_t n_attributes = 6;
  double visual_informative = 0.5;
  double noise_level = 0.3;
  std::size_t n_train = 600;
  std::size_t n_val = 60;
  std::size_t n_test = 200;
  std::uint64_t seed = 7;
  // Feature layout; normally copied from the model config.
  std::size_t T_a = 8;
  std::size_t T_v = 4;
  std::size_t d_audio = 12;
  std::size_t d_visual = 12;  // width of one visual row (all patches)

  void validate() const;
  /// Smallest vocabulary that holds every caption token.
  std::size_t vocab_needed() const;
};

nlohmann::json to_json(const SyntheticTaskSpec& spec);
SyntheticTaskSpec task_from_json(const nlohmann::json& j);

struct Sample {
  std::string id;
  Tensor audio;   // T_a x d_audio
  Tensor visual;  // T_v x d_visual
  std::vector<int> caption;
};

struct Dataset {
  std::vector<Sample> train, val, test;
};

/// Deterministic in spec (including seed).
Dataset generate_synthetic(const SyntheticTaskSpec& spec);

/// Token ids for the caption vocabulary layout.
struct Vocabulary {
  std::size_t n_classes, n_attributes;
  int class_token(std::size_t c) const;
  int verb_token(std::size_t c) const;
  int attribute_token(std::size_t a) const;
  int object_token(std::size_t a) const;
  std::size_t size() const;
};

augment::Batch to_batch(const std::vector<Sample>& samples);

nlohmann::json sample_to_json(const Sample& s);
Sample sample_from_json(const nlohmann::json& j);
void write_jsonl(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> read_jsonl(const std::string& path);

/// Order-sensitive checksum over all features and captions.
double dataset_checksum(const std::vector<Sample>& samples);

}  // namespace evacap::data
